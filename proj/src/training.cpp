#include "ftex/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ftex/error.hpp"

namespace ftex {

bool AttributeVocabulary::has_upper(std::string_view a) const { return std::find(upper.begin(), upper.end(), a) != upper.end(); }
bool AttributeVocabulary::has_lower(std::string_view a) const { return std::find(lower.begin(), lower.end(), a) != lower.end(); }

void AttributeVocabulary::validate() const {
  if (upper.empty() || lower.empty()) throw ConfigError("attribute vocabulary needs upper and lower entries");
  for (const auto* list : {&upper, &lower})
    for (const auto& a : *list) {
      if (a.empty() || a.find(',') != std::string::npos || a.find('\t') != std::string::npos) {
        throw ConfigError("vocabulary attribute '" + a + "' must be non-empty without commas or tabs");
      }
    }
}

std::size_t train_split_size(std::size_t n) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * 11265.0 / 12401.0));
}

std::optional<Image> align_image(const Image& img, const HumanParser& parser, int* shift) {
  const ParsingMask pm = parser.parse(img);
  const auto cloth = pm.cloth();
  double sx = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y < pm.height; ++y)
    for (std::size_t x = 0; x < pm.width; ++x)
      if (cloth[y * pm.width + x]) {
        sx += static_cast<double>(x) + 0.5;
        ++count;
      }
  if (count == 0) return std::nullopt;
  const int s = static_cast<int>(std::lround(static_cast<double>(pm.width) / 2.0 - sx / static_cast<double>(count)));
  if (shift) *shift = s;
  if (std::abs(s) > static_cast<int>(pm.width / 4)) return std::nullopt;
  if (s == 0) return img;
  Image out(img.height(), img.width());
  const int w = static_cast<int>(img.width());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, static_cast<std::size_t>(x)) = img.at(c, y, static_cast<std::size_t>(std::clamp(x - s, 0, w - 1)));
  return out;
}

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Sample prepare_sample(DatasetRecord rec, Image image, LatentCode latent, const BackboneSet& bb) {
  Sample s;
  s.record = std::move(rec);
  s.image = std::move(image);
  s.latent = std::move(latent);
  {
    ad::Tape tape;
    const ad::Var out = bb.generator->forward(tape, tape.constant(s.latent.layers()), bb.generator->bind_frozen(tape));
    s.reconstruction_values = std::make_shared<const std::vector<double>>(out.value().begin(), out.value().end());
    s.reconstruction = var_to_image(out);
  }
  s.parse = bb.parser->parse(s.reconstruction);
  s.e_image = bb.joint_embedder->embed_image(s.reconstruction);
  s.e_source = bb.joint_embedder->embed_text(build_prompt(s.record.upper_tag, s.record.lower_tag));
  return s;
}

}  // namespace

Dataset ingest_dataset(const std::filesystem::path& root, const IngestOptions& opt, const BackboneSet& bb,
                       const GroupBounds& bounds, const AttributeVocabulary& vocab, const LogSink& log) {
  std::error_code ec;
  if (!std::filesystem::is_directory(root, ec)) throw Error("cannot read dataset root " + root.string());
  const auto manifest = root / kManifestName;
  std::ifstream in(manifest);
  if (!in) throw Error("cannot read manifest " + manifest.string());

  std::vector<DatasetRecord> records;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_tabs(line);
    if (f.size() != 3 || f[0].empty()) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected path<TAB>upper_tag<TAB>lower_tag");
    }
    if (!vocab.has_upper(f[1])) throw FormatError("manifest line " + std::to_string(lineno) + ": unknown upper tag '" + f[1] + "'");
    if (!vocab.has_lower(f[2])) throw FormatError("manifest line " + std::to_string(lineno) + ": unknown lower tag '" + f[2] + "'");
    records.push_back({f[0], f[1], f[2], {}});
  }
  if (records.empty()) throw FormatError("empty manifest " + manifest.string());

  const std::size_t n = bb.generator->image_size();
  const auto cache_dir = root / kCacheDirName;
  if (opt.use_cache) std::filesystem::create_directories(cache_dir);

  Dataset data;
  data.index.root = root;
  std::vector<Sample> kept;
  for (DatasetRecord& rec : records) {
    const auto path = root / rec.path;
    const std::string bytes = read_file(path);
    Image img = decode_png({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
    if (img.height() != n || img.width() != n) img = resize_area(img, n, n);
    if (opt.align) {
      int shift = 0;
      auto aligned = align_image(img, *bb.parser, &shift);
      if (!aligned) {
        const std::string why = bb.parser->parse(img).cloth() == std::vector<std::uint8_t>(img.pixels(), 0)
                                    ? "no cloth pixels"
                                    : "alignment shift " + std::to_string(shift) + " px too large";
        data.index.dropped.push_back(rec.path + ": " + why);
        if (log) log("dropped " + rec.path + ": " + why);
        continue;
      }
      img = std::move(*aligned);
    }
    const ParsingMask pm = bb.parser->parse(img);
    if (pm.count(Region::UpperCloth) + pm.count(Region::LowerCloth) == 0) {
      data.index.dropped.push_back(rec.path + ": no cloth pixels");
      if (log) log("dropped " + rec.path + ": no cloth pixels");
      continue;
    }
    LatentCode latent;
    const std::string key = hex64(fnv1a(rec.path + "|" + bb.config_hash + "|" + (opt.align ? "a" : "n") + "|" + hex64(fnv1a(bytes))));
    const auto cache_file = cache_dir / (key + ".ftw");
    bool cached = false;
    if (opt.use_cache && std::filesystem::is_regular_file(cache_file, ec)) {
      try {
        latent = load_latent(cache_file, bounds);
        cached = latent.num_layers() == bb.generator->num_layers() && latent.dim() == bb.generator->latent_dim();
      } catch (const Error&) {
        cached = false;
      }
    }
    if (!cached) {
      latent = bb.inverter->invert(img, bounds);
      if (opt.use_cache) save_latent(latent, cache_file);
    }
    if (opt.use_cache) rec.latent_path = std::filesystem::path(kCacheDirName) / (key + ".ftw");
    kept.push_back(prepare_sample(rec, std::move(img), std::move(latent), bb));
  }
  if (kept.empty()) throw FormatError("no usable records in " + manifest.string());

  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(opt.seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const std::size_t n_train = train_split_size(kept.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    Sample& s = kept[order[i]];
    (i < n_train ? data.index.train : data.index.test).push_back(s.record);
    (i < n_train ? data.train : data.test).push_back(std::move(s));
  }
  return data;
}

namespace {

// Fits the medium rows of w so the joint embedding of G(w) lands on target.
void fit_medium(Matrix& w, const Embedding& target, const BackboneSet& bb, const GroupBounds& bounds) {
  const LayerRange med = bounds[Group::Medium];
  const std::size_t dim = w.cols, n = med.size() * dim;
  std::vector<double> x(n), m(n, 0.0), v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) x[i] = w.data[med.begin * dim + i];
  const double lr = 0.005, b1 = 0.9, b2 = 0.999;
  for (std::size_t step = 1; step <= kSynthFitSteps; ++step) {
    ad::Tape tape;
    std::vector<double> full(w.data.begin(), w.data.end());
    std::copy(x.begin(), x.end(), full.begin() + static_cast<std::ptrdiff_t>(med.begin * dim));
    const ad::Var wv = tape.variable(std::move(full), {w.rows, dim});
    const auto theta = bb.generator->bind_frozen(tape);
    const ad::Var e = bb.joint_embedder->embed_image(tape, bb.generator->forward(tape, wv, theta));
    const ad::Var loss = ad::mean_squared_diff(e, tape.constant(target.values, {target.dim()}));
    tape.backward(loss);
    const auto g = tape.grad(wv);
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[med.begin * dim + i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      x[i] -= lr * (m[i] / (1 - std::pow(b1, step))) / (std::sqrt(v[i] / (1 - std::pow(b2, step))) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < n; ++i) w.data[med.begin * dim + i] = static_cast<float>(x[i]);
}

}  // namespace

void synth_dataset(const std::filesystem::path& root, std::size_t n, std::uint64_t seed, const BackboneSet& bb,
                   const AttributeVocabulary& vocab) {
  if (n == 0) throw ConfigError("synthetic dataset needs at least one image");
  vocab.validate();
  std::filesystem::create_directories(root / "images");
  Rng rng(derive_seed(seed, "synth-data"));
  const std::size_t layers = bb.generator->num_layers(), dim = bb.generator->latent_dim();
  const GroupBounds bounds = GroupBounds::scaled(layers);
  const Embedding base = bb.joint_embedder->embed_image(bb.generator->generate(LatentCode(Matrix(layers, dim), bounds)));
  std::ofstream manifest(root / kManifestName);
  if (!manifest) throw Error("cannot write " + (root / kManifestName).string());
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& up = vocab.upper[rng.index(vocab.upper.size())];
    const std::string& low = vocab.lower[rng.index(vocab.lower.size())];
    Matrix w(layers, dim);
    for (float& v : w.data) v = static_cast<float>(rng.normal() * kSynthLatentStd);
    // Garment colors follow the tags: the image embedding sits at base + text(prompt).
    fit_medium(w, base + bb.joint_embedder->embed_text(build_prompt(up, low)), bb, bounds);
    const Image img = bb.generator->generate(LatentCode(std::move(w), bounds));
    char name[48];
    std::snprintf(name, sizeof name, "images/img_%04zu.png", i);
    write_png(img, root / name);
    manifest << name << '\t' << up << '\t' << low << '\n';
  }
}

SampledCondition sample_condition(const std::vector<Sample>& donors, const AttributeVocabulary& vocab, std::size_t crop_size,
                                  Rng& rng, std::size_t retry_budget) {
  if (donors.empty()) throw Error("cannot sample a condition from an empty dataset");
  SampledCondition s;
  s.upper_attr = vocab.upper[rng.index(vocab.upper.size())];
  s.lower_attr = vocab.lower[rng.index(vocab.lower.size())];
  s.condition.set_prompt(build_prompt(s.upper_attr, s.lower_attr));
  auto pick = [&](Region region, std::size_t& donor, CropWindow& win) -> Image {
    for (std::size_t attempt = 0; attempt < std::max<std::size_t>(retry_budget, 1); ++attempt) {
      donor = rng.index(donors.size());
      const Sample& d = donors[donor];
      const auto windows = valid_crops(d.parse.region(region), d.parse.height, d.parse.width, crop_size);
      if (windows.empty()) continue;
      win = windows[rng.index(windows.size())];
      return d.image.crop(win.y0, win.x0, win.size, win.size);
    }
    throw ShapeError("no donor image admits a " + std::to_string(crop_size) + "px crop after " +
                     std::to_string(retry_budget) + " attempts");
  };
  s.condition.patch_upper = pick(Region::UpperCloth, s.donor_upper, s.window_upper);
  s.condition.patch_lower = pick(Region::LowerCloth, s.donor_lower, s.window_lower);
  return s;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("training batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("training learning_rate must be positive");
  if (checkpoint_every == 0) throw ConfigError("training checkpoint_every must be positive");
  if (mapper_blocks == 0) throw ConfigError("training mapper_blocks must be positive");
  if (!(mapper_eps > 0.0)) throw ConfigError("training mapper_eps must be positive");
  if (loss.crop_size < 8) throw ConfigError("training crop_size must be at least 8");
  weights.validate();
  vocabulary.validate();
}

MapperShape mapper_shape(const TrainConfig& cfg, const BackboneSet& bb) {
  MapperShape s;
  s.text_dim = bb.joint_embedder->text_dim();
  s.texture_dim = bb.texture_extractor->embedding_dim();
  s.latent_dim = bb.generator->latent_dim();
  s.blocks = cfg.mapper_blocks;
  s.eps = cfg.mapper_eps;
  s.slope = cfg.mapper_slope;
  return s;
}

TrainState init_training(const TrainConfig& cfg, const BackboneSet& bb) {
  cfg.validate();
  TrainState st;
  st.weights = MapperWeights::init(mapper_shape(cfg, bb), cfg.seed);
  for (const auto& [name, m] : st.weights.params()) {
    st.adam_m.add(name, Matrix(m.rows, m.cols));
    st.adam_v.add(name, Matrix(m.rows, m.cols));
  }
  return st;
}

std::vector<TrainItem> draw_batch(const Dataset& data, const TrainConfig& cfg, const BackboneSet& bb, std::size_t step) {
  if (data.train.empty()) throw Error("training split is empty");
  Rng rng(derive_seed(cfg.seed, "batch", step));
  std::vector<TrainItem> batch(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    TrainItem& it = batch[i];
    it.source = &data.train[rng.index(data.train.size())];
    it.condition = sample_condition(data.train, cfg.vocabulary, cfg.loss.crop_size, rng, cfg.retry_budget);
    it.embeddings = embed_condition(it.condition.condition, bb);
    it.e_target = bb.joint_embedder->embed_text(build_prompt(it.condition.upper_attr, it.condition.lower_attr));
    it.crop_seed = derive_seed(cfg.seed, "crop", step * cfg.batch_size + i);
  }
  return batch;
}

namespace {

struct ItemGraph {
  LossVars terms;
  ad::Var total;
};

// Builds the full per-item objective on `tape` with the mapper bound as `params`.
ItemGraph build_item(ad::Tape& tape, std::span<const ad::Var> params, const TrainItem& item, const MapperWeights& weights,
                     const BackboneSet& bb, const TrainConfig& cfg) {
  const Sample& src = *item.source;
  const LatentCode& w = src.latent;
  const ad::Var wc = tape.constant(w.group(Group::Coarse));
  const ad::Var wm = tape.constant(w.group(Group::Medium));
  const ad::Var wf = tape.constant(w.group(Group::Fine));
  const OffsetVars off = mapper_forward(params, weights, wm, wf, item.embeddings);
  const std::array<ad::Var, 3> parts{wc, off.medium ? ad::add(wm, *off.medium) : wm, off.fine ? ad::add(wf, *off.fine) : wf};
  const ad::Var w_edit = ad::concat_rows(parts);
  const auto theta = bb.generator->bind_frozen(tape);
  const ad::Var i_e = bb.generator->forward(tape, w_edit, theta);
  const ParsingMask parse_e = bb.parser->parse(var_to_image(i_e));
  const std::size_t n = src.reconstruction.height();
  const ad::Var i_i = tape.constant(src.reconstruction_values, {3, n, src.reconstruction.width()});

  ItemGraph g;
  LossVars& t = g.terms;
  const EditCondition& c = item.condition.condition;
  if (c.has_text()) t.type = type_loss(bb.joint_embedder->embed_image(tape, i_e), src.e_image, src.e_source, item.e_target);
  if (c.has_patch()) {
    Rng crop_rng(item.crop_seed);
    std::optional<ad::Var> txr;
    for (auto [patch, region] : {std::pair{&c.patch_upper, Region::UpperCloth}, std::pair{&c.patch_lower, Region::LowerCloth}}) {
      if (!*patch) continue;
      const ad::Var l = texture_loss(i_e, parse_e, region, **patch, *bb.texture_extractor, crop_rng, cfg.loss);
      txr = txr ? ad::add(*txr, l) : l;
    }
    t.txr = txr;
  }
  t.id = identity_loss(i_e, i_i, *bb.identity_embedder);
  t.bg = background_loss(i_e, parse_e, i_i, src.parse);
  t.skin = skin_loss(i_e, parse_e, i_i, src.parse);
  t.norm = norm_loss(tape, off.medium, off.fine);
  g.total = total_loss(tape, t, cfg.weights);
  return g;
}

}  // namespace

double item_loss(const TrainItem& item, const MapperWeights& weights, const BackboneSet& bb, const TrainConfig& cfg) {
  ad::Tape tape;
  const auto params = bind_parameters(tape, weights.params(), false);
  return build_item(tape, params, item, weights, bb, cfg).total.scalar();
}

BatchResult evaluate_batch(const std::vector<TrainItem>& batch, const MapperWeights& weights, const BackboneSet& bb,
                           const TrainConfig& cfg) {
  const std::size_t b = batch.size();
  if (b == 0) throw Error("empty training batch");
  std::vector<LossTerms> terms(b);
  std::vector<std::vector<std::vector<double>>> grads(b);
  std::vector<std::string> errors(b);
  const long nb = static_cast<long>(b);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < nb; ++i) {
    try {
      ad::Tape tape;
      const auto params = bind_parameters(tape, weights.params(), true);
      const ItemGraph g = build_item(tape, params, batch[static_cast<std::size_t>(i)], weights, bb, cfg);
      terms[i] = values_of(g.terms);
      if (!std::isfinite(g.total.scalar())) throw NumericError("training loss became non-finite");
      tape.backward(g.total);
      auto& gi = grads[i];
      gi.reserve(params.size());
      for (const ad::Var& p : params) gi.emplace_back(tape.grad(p).begin(), tape.grad(p).end());
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw NumericError(e);

  BatchResult r;
  LossTerms mean;
  r.gradients.resize(weights.params().size());
  for (std::size_t k = 0; k < r.gradients.size(); ++k) r.gradients[k].assign(weights.params()[k].second.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    mean.type += terms[i].type * inv;
    mean.txr += terms[i].txr * inv;
    mean.id += terms[i].id * inv;
    mean.skin += terms[i].skin * inv;
    mean.bg += terms[i].bg * inv;
    mean.norm += terms[i].norm * inv;
    for (std::size_t k = 0; k < r.gradients.size(); ++k)
      for (std::size_t j = 0; j < r.gradients[k].size(); ++j) r.gradients[k][j] += grads[i][k][j] * inv;
  }
  r.report = LossReport::make(mean, cfg.weights);
  return r;
}

LossReport train_step(TrainState& st, const Dataset& data, const BackboneSet& bb, const TrainConfig& cfg) {
  const auto batch = draw_batch(data, cfg, bb, st.step);
  const BatchResult res = evaluate_batch(batch, st.weights, bb, cfg);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double t = static_cast<double>(st.step + 1);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  NamedTensors& params = st.weights.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].second.data;
    auto& m = st.adam_m[k].second.data;
    auto& v = st.adam_v[k].second.data;
    const auto& g = res.gradients[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g[i]);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
      p[i] = static_cast<float>(p[i] - cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
  ++st.step;
  return res.report;
}

void train(TrainState& st, const Dataset& data, const BackboneSet& bb, const TrainConfig& cfg, std::size_t until_step,
           const StepSink& on_step) {
  while (st.step < until_step) {
    const std::size_t step = st.step;
    const LossReport r = train_step(st, data, bb, cfg);
    if (on_step) on_step(step, r);
  }
}

void save_checkpoint(const TrainState& st, const std::string& config_text, const std::filesystem::path& path) {
  NamedTensors extra;
  for (const auto& [name, m] : st.adam_m) extra.add("adam_m." + name, m);
  for (const auto& [name, m] : st.adam_v) extra.add("adam_v." + name, m);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_mapper(st.weights, path, "step: " + std::to_string(st.step) + "\n---\n" + config_text, &extra);
}

TrainState load_checkpoint(const std::filesystem::path& path, std::string* config_text) {
  TrainState st;
  std::string meta;
  NamedTensors extra;
  st.weights = load_mapper(path, &meta, &extra);
  if (meta.rfind("step: ", 0) != 0) throw FormatError(path.string() + " is a mapper file without training state");
  const auto nl = meta.find('\n');
  try {
    st.step = std::stoul(meta.substr(6, nl - 6));
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint has a malformed step");
  }
  const auto sep = meta.find("---\n");
  if (config_text) *config_text = sep == std::string::npos ? std::string() : meta.substr(sep + 4);
  const auto& params = st.weights.params();
  if (extra.size() != 2 * params.size()) throw FormatError("checkpoint optimizer state is incomplete");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [mn, mm] = extra[k];
    const auto& [vn, vm] = extra[params.size() + k];
    if (mn != "adam_m." + params[k].first || vn != "adam_v." + params[k].first || !mm.same_shape(params[k].second) ||
        !vm.same_shape(params[k].second)) {
      throw FormatError("checkpoint optimizer state does not match the mapper tensors");
    }
    st.adam_m.add(params[k].first, mm);
    st.adam_v.add(params[k].first, vm);
  }
  return st;
}

}  // namespace ftex
