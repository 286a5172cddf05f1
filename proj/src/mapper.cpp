#include "ftex/mapper.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "ftex/error.hpp"
#include "ftex/rng.hpp"
#include "ftex/tensor_file.hpp"

namespace ftex {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_embedding(const Embedding& e, std::size_t dim, const char* what) {
  if (e.dim() != dim) {
    throw ShapeError(std::string(what) + " embedding has dimension " + std::to_string(e.dim()) + ", mapper expects " +
                     std::to_string(dim));
  }
}

}  // namespace

std::pair<std::string, std::string> split_text(std::string_view prompt) {
  const auto comma = prompt.find(',');
  if (comma == std::string_view::npos) {
    throw FormatError("prompt must read \"<upper>, <lower>\": no comma in '" + std::string(prompt) + "'");
  }
  if (prompt.find(',', comma + 1) != std::string_view::npos) {
    throw FormatError("prompt must contain exactly one comma: '" + std::string(prompt) + "'");
  }
  std::string_view upper = trim(prompt.substr(0, comma));
  std::string_view lower = trim(prompt.substr(comma + 1));
  if (lower.size() > 4 && lower.substr(0, 3) == "and" && std::isspace(static_cast<unsigned char>(lower[3]))) {
    lower = trim(lower.substr(4));
  }
  if (upper.empty() || lower.empty()) throw FormatError("prompt has an empty side: '" + std::string(prompt) + "'");
  return {std::string(upper), std::string(lower)};
}

std::string build_prompt(std::string_view upper, std::string_view lower) {
  if (trim(upper).empty() || trim(lower).empty()) throw FormatError("prompt attributes must be non-empty");
  if (upper.find(',') != std::string_view::npos || lower.find(',') != std::string_view::npos) {
    throw FormatError("prompt attributes must not contain commas");
  }
  return std::string(upper) + ", " + std::string(lower);
}

void EditCondition::validate() const {
  if (empty()) throw FormatError("at least one condition required");
  for (const auto* t : {&text_upper, &text_lower}) {
    if (*t && trim(**t).empty()) throw FormatError("text condition must not be blank");
  }
  for (const auto* p : {&patch_upper, &patch_lower}) {
    if (!*p) continue;
    if ((*p)->height() != (*p)->width()) throw FormatError("texture patches must be square");
    if ((*p)->height() < kMinPatchSide) {
      throw FormatError("texture patches must be at least " + std::to_string(kMinPatchSide) + " px");
    }
  }
}

void EditCondition::set_prompt(std::string_view prompt) {
  auto [u, l] = split_text(prompt);
  text_upper = std::move(u);
  text_lower = std::move(l);
}

Embedding texture_embedding(const Image& patch, const TextureExtractor& extractor) {
  const FeaturePyramid p = extractor.extract(patch);
  const FeatureMap& last = p[3];
  Embedding e{std::vector<double>(last.channels, 0.0), EmbeddingSpace::Texture};
  for (std::size_t c = 0; c < last.channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < last.positions; ++i) s += last.values[c * last.positions + i];
    e.values[c] = s / static_cast<double>(last.positions);
  }
  return e;
}

ConditionEmbeddings embed_condition(const EditCondition& c, const BackboneSet& backbones) {
  c.validate();
  ConditionEmbeddings e;
  if (c.text_upper) e.text_upper = backbones.joint_embedder->embed_text(*c.text_upper);
  if (c.text_lower) e.text_lower = backbones.joint_embedder->embed_text(*c.text_lower);
  if (c.patch_upper) e.patch_upper = texture_embedding(*c.patch_upper, *backbones.texture_extractor);
  if (c.patch_lower) e.patch_lower = texture_embedding(*c.patch_lower, *backbones.texture_extractor);
  return e;
}

std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::TypeUpper: return "type_upper";
    case Branch::TypeLower: return "type_lower";
    case Branch::TextureUpper: return "texture_upper";
    case Branch::TextureLower: return "texture_lower";
  }
  return "";
}

Matrix modulate(const Matrix& w_part, const Embedding& e, const ModulationBlock& block) {
  ad::Tape tape;
  const std::array<ad::Var, 4> p{tape.constant(block.gamma_w), tape.constant(block.gamma_b), tape.constant(block.beta_w),
                                 tape.constant(block.beta_b)};
  const ad::Var out = modulate(tape.constant(w_part), tape.constant(e.values, {e.dim()}), p, block.eps);
  Matrix m(w_part.rows, w_part.cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<float>(out.value()[i]);
  return m;
}

ad::Var modulate(ad::Var w_part, ad::Var e, std::span<const ad::Var, 4> block, double eps) {
  if (!(eps >= 0.0)) throw ConfigError("modulation epsilon must be non-negative");
  const ad::Var gamma = ad::linear(block[0], e, block[1]);
  const ad::Var beta = ad::linear(block[2], e, block[3]);
  return ad::affine_rows(ad::standardize_rows(w_part, eps), gamma, beta);
}

MapperWeights::MapperWeights(MapperShape shape, NamedTensors params) : shape_(shape), params_(std::move(params)) {
  if (shape_.blocks == 0) throw ConfigError("mapper needs at least one modulation block");
  if (params_.size() != 16 * shape_.blocks) throw ShapeError("mapper parameter count does not match its block count");
  for (Branch b : kBranches) {
    const std::size_t k = shape_.condition_dim(b), d = shape_.latent_dim;
    for (std::size_t j = 0; j < shape_.blocks; ++j) {
      const std::size_t i = block_index(b, j);
      const std::string prefix = std::string(branch_name(b)) + "." + std::to_string(j) + ".";
      const std::array<std::pair<const char*, std::pair<std::size_t, std::size_t>>, 4> expect{
          {{"gamma_w", {d, k}}, {"gamma_b", {1, d}}, {"beta_w", {d, k}}, {"beta_b", {1, d}}}};
      for (std::size_t t = 0; t < 4; ++t) {
        const auto& [name, m] = params_[i + t];
        if (name != prefix + expect[t].first || m.rows != expect[t].second.first || m.cols != expect[t].second.second) {
          throw ShapeError("mapper tensor '" + name + "' " + m.shape_string() + " does not match " + prefix +
                           expect[t].first);
        }
      }
    }
  }
}

MapperWeights MapperWeights::init(const MapperShape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "mapper"));
  NamedTensors p;
  for (Branch b : kBranches) {
    const std::size_t k = shape.condition_dim(b), d = shape.latent_dim;
    for (std::size_t j = 0; j < shape.blocks; ++j) {
      const std::string prefix = std::string(branch_name(b)) + "." + std::to_string(j) + ".";
      Matrix gw(d, k);
      if (j + 1 < shape.blocks) {
        for (float& v : gw.data) v = static_cast<float>(rng.normal() * 0.01);
      }
      p.add(prefix + "gamma_w", std::move(gw));
      p.add(prefix + "gamma_b", Matrix(1, d, j + 1 < shape.blocks ? 1.0f : 0.0f));
      p.add(prefix + "beta_w", Matrix(d, k));
      p.add(prefix + "beta_b", Matrix(1, d));
    }
  }
  return MapperWeights(shape, std::move(p));
}

ModulationBlock MapperWeights::block(Branch b, std::size_t j) const {
  const std::size_t i = block_index(b, j);
  return ModulationBlock{params_[i].second, params_[i + 1].second, params_[i + 2].second, params_[i + 3].second,
                         shape_.eps};
}

ad::Var branch_offset(ad::Var w_part, ad::Var e, std::span<const ad::Var> params, const MapperWeights& weights, Branch b) {
  const MapperShape& s = weights.shape();
  if (w_part.shape().size() != 2 || w_part.shape()[1] != s.latent_dim) {
    throw ShapeError("latent group width does not match the mapper");
  }
  if (e.size() != s.condition_dim(b)) {
    throw ShapeError("condition embedding for " + std::string(branch_name(b)) + " has dimension " +
                     std::to_string(e.size()) + ", mapper expects " + std::to_string(s.condition_dim(b)));
  }
  ad::Var x = w_part;
  for (std::size_t j = 0; j < s.blocks; ++j) {
    const std::span<const ad::Var, 4> blk(params.data() + weights.block_index(b, j), 4);
    x = modulate(x, e, blk, s.eps);
    if (j + 1 < s.blocks) x = ad::leaky_relu(x, s.slope);
  }
  return x;
}

OffsetVars mapper_forward(std::span<const ad::Var> params, const MapperWeights& weights, ad::Var w_medium,
                          ad::Var w_fine, const ConditionEmbeddings& e) {
  if (params.size() != weights.params().size()) throw ShapeError("mapper parameters are not fully bound");
  ad::Tape& tape = w_medium.tape();
  auto run = [&](ad::Var part, const std::optional<Embedding>& up, const std::optional<Embedding>& low, Branch bu,
                 Branch bl) -> std::optional<ad::Var> {
    std::optional<ad::Var> sum;
    for (auto [emb, br] : {std::pair{&up, bu}, std::pair{&low, bl}}) {
      if (!*emb) continue;
      const ad::Var ev = tape.constant((*emb)->values, {(*emb)->dim()});
      const ad::Var off = branch_offset(part, ev, params, weights, br);
      sum = sum ? ad::add(*sum, off) : off;
    }
    return sum;
  };
  OffsetVars out;
  out.medium = run(w_medium, e.text_upper, e.text_lower, Branch::TypeUpper, Branch::TypeLower);
  out.fine = run(w_fine, e.patch_upper, e.patch_lower, Branch::TextureUpper, Branch::TextureLower);
  return out;
}

namespace {

Matrix group_offsets(const Matrix& part, const std::optional<Embedding>& upper, const std::optional<Embedding>& lower,
                     const MapperWeights& weights, Branch bu, Branch bl) {
  if (part.cols != weights.shape().latent_dim) throw ShapeError("latent group width does not match the mapper");
  Matrix out(part.rows, part.cols);
  if (!upper && !lower) return out;
  ad::Tape tape;
  const auto params = bind_parameters(tape, weights.params(), false);
  const ad::Var w = tape.constant(part);
  std::optional<ad::Var> sum;
  for (auto [emb, br] : {std::pair{&upper, bu}, std::pair{&lower, bl}}) {
    if (!*emb) continue;
    check_embedding(**emb, weights.shape().condition_dim(br), std::string(branch_name(br)).c_str());
    const ad::Var off = branch_offset(w, tape.constant((*emb)->values, {(*emb)->dim()}), params, weights, br);
    sum = sum ? ad::add(*sum, off) : off;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(sum->value()[i]);
  return out;
}

}  // namespace

Matrix type_offsets(const Matrix& w_m, const std::optional<Embedding>& upper, const std::optional<Embedding>& lower,
                    const MapperWeights& weights) {
  return group_offsets(w_m, upper, lower, weights, Branch::TypeUpper, Branch::TypeLower);
}

Matrix texture_offsets(const Matrix& w_f, const std::optional<Embedding>& upper, const std::optional<Embedding>& lower,
                       const MapperWeights& weights) {
  return group_offsets(w_f, upper, lower, weights, Branch::TextureUpper, Branch::TextureLower);
}

LatentCode compose_latent(const LatentCode& w, const std::optional<Matrix>& delta_medium,
                          const std::optional<Matrix>& delta_fine) {
  Matrix out = w.layers();
  auto add_group = [&](Group g, const std::optional<Matrix>& d) {
    if (!d) return;
    const LayerRange r = w.bounds()[g];
    if (d->rows != r.size() || d->cols != w.dim()) {
      throw ShapeError(std::string(group_name(g)) + " offset is " + d->shape_string() + ", group is " +
                       std::to_string(r.size()) + "x" + std::to_string(w.dim()));
    }
    for (std::size_t i = 0; i < d->size(); ++i) out.data[r.begin * w.dim() + i] += d->data[i];
  };
  add_group(Group::Medium, delta_medium);
  add_group(Group::Fine, delta_fine);
  return LatentCode(std::move(out), w.bounds());
}

EditResult edit(const LatentCode& w, const ConditionEmbeddings& e, const MapperWeights& weights, const BackboneSet& backbones) {
  std::optional<Matrix> dm, df;
  if (e.text_upper || e.text_lower) dm = type_offsets(w.group(Group::Medium), e.text_upper, e.text_lower, weights);
  if (e.patch_upper || e.patch_lower) df = texture_offsets(w.group(Group::Fine), e.patch_upper, e.patch_lower, weights);
  EditResult r;
  r.latent = compose_latent(w, dm, df);
  r.offset = LatentOffset::zeros(w);
  if (dm) r.offset.delta_medium = *dm;
  if (df) r.offset.delta_fine = *df;
  r.image = backbones.generator->generate(r.latent);
  return r;
}

EditResult edit(const LatentCode& w, const EditCondition& c, const MapperWeights& weights, const BackboneSet& backbones) {
  return edit(w, embed_condition(c, backbones), weights, backbones);
}

void save_mapper(const MapperWeights& weights, const std::filesystem::path& path, std::string_view extra_meta,
                 const NamedTensors* extra_tensors) {
  const MapperShape& s = weights.shape();
  std::string meta = "kind: mapper\nblocks: " + std::to_string(s.blocks) + "\neps: " + format_double(s.eps) +
                     "\nslope: " + format_double(s.slope) + "\n";
  meta += extra_meta;
  if (!extra_tensors) {
    save_container(path, weights.params(), meta);
    return;
  }
  NamedTensors all = weights.params();
  for (const auto& [name, m] : *extra_tensors) all.add(name, m);
  save_container(path, all, meta);
}

MapperWeights load_mapper(const std::filesystem::path& path, std::string* extra_meta, NamedTensors* extra_tensors) {
  TensorContainer c = load_container(path);
  std::istringstream in(c.meta);
  std::string line;
  MapperShape s;
  bool is_mapper = false;
  std::size_t consumed = 0;
  for (int i = 0; i < 4 && std::getline(in, line); ++i) {
    consumed += line.size() + 1;
    const auto colon = line.find(": ");
    if (colon == std::string::npos) throw FormatError("mapper checkpoint has malformed metadata");
    const std::string key = line.substr(0, colon), val = line.substr(colon + 2);
    try {
      if (key == "kind") is_mapper = val == "mapper";
      else if (key == "blocks") s.blocks = std::stoul(val);
      else if (key == "eps") s.eps = std::stod(val);
      else if (key == "slope") s.slope = std::stod(val);
      else throw FormatError("unexpected metadata key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("mapper checkpoint has malformed metadata value for '" + key + "'");
    }
  }
  if (!is_mapper) throw FormatError(path.string() + " is not a mapper checkpoint");
  if (s.blocks == 0 || c.tensors.size() < 16 * s.blocks) throw FormatError("mapper checkpoint is missing modulation blocks");
  s.latent_dim = c.tensors[0].second.rows;
  s.text_dim = c.tensors[0].second.cols;
  s.texture_dim = c.tensors[2 * 4 * s.blocks].second.cols;
  if (extra_meta) *extra_meta = c.meta.substr(std::min(consumed, c.meta.size()));
  const std::size_t own = 16 * s.blocks;
  NamedTensors mine;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    if (i < own) {
      mine.add(c.tensors[i].first, std::move(c.tensors[i].second));
    } else if (extra_tensors) {
      extra_tensors->add(c.tensors[i].first, std::move(c.tensors[i].second));
    }
  }
  try {
    return MapperWeights(s, std::move(mine));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("corrupt mapper checkpoint: ") + e.what());
  }
}

}  // namespace ftex
