#include "ftex/losses.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ftex/error.hpp"

namespace ftex {

void LossWeights::validate() const {
  const double all[6] = {type, txr, id, skin, bg, norm};
  bool any = false;
  for (double v : all) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
    any = any || v > 0.0;
  }
  if (!any) throw ConfigError("at least one loss weight must be positive");
}

LossReport LossReport::make(const LossTerms& raw, const LossWeights& w) {
  LossReport r;
  r.raw = raw;
  r.weighted = {w.type * raw.type, w.txr * raw.txr, w.id * raw.id, w.skin * raw.skin, w.bg * raw.bg, w.norm * raw.norm};
  const LossTerms& t = r.weighted;
  r.total = t.type + t.txr + t.id + t.skin + t.bg + t.norm;
  return r;
}

std::string LossReport::log_line(std::size_t step) const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "step=%zu type=%.9g txr=%.9g id=%.9g skin=%.9g bg=%.9g norm=%.9g total=%.9g", step,
                raw.type, raw.txr, raw.id, raw.skin, raw.bg, raw.norm, total);
  return buf;
}

LossReport LossReport::parse_log_line(const std::string& line, std::size_t* step) {
  std::istringstream in(line);
  std::string field;
  LossReport r;
  const char* keys[8] = {"step", "type", "txr", "id", "skin", "bg", "norm", "total"};
  double* slots[8] = {nullptr, &r.raw.type, &r.raw.txr, &r.raw.id, &r.raw.skin, &r.raw.bg, &r.raw.norm, &r.total};
  for (int i = 0; i < 8; ++i) {
    if (!(in >> field)) throw FormatError("training log line is missing '" + std::string(keys[i]) + "'");
    const std::string prefix = std::string(keys[i]) + "=";
    if (field.rfind(prefix, 0) != 0) throw FormatError("training log line: expected '" + prefix + "'");
    try {
      const std::string v = field.substr(prefix.size());
      if (i == 0) {
        if (step) *step = std::stoul(v);
      } else {
        *slots[i] = std::stod(v);
      }
    } catch (const std::logic_error&) {
      throw FormatError("training log line: bad value in '" + field + "'");
    }
  }
  return r;
}

double cosine_distance(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) throw ShapeError("cosine distance of embeddings with different dimensions");
  ad::Tape tape;
  return ad::cosine_distance(tape.constant(a.values, {a.dim()}), tape.constant(b.values, {b.dim()})).scalar();
}

ad::Var type_loss(ad::Var e_ie, const Embedding& e_ii, const Embedding& e_ti, const Embedding& e_t) {
  const std::size_t k = e_ii.dim();
  if (e_ti.dim() != k || e_t.dim() != k || e_ie.size() != k) throw ShapeError("type loss embeddings differ in dimension");
  const Embedding target = e_ii + (e_t - e_ti);
  if (target.norm() == 0.0) throw NumericError("calibrated target embedding has zero norm");
  return ad::cosine_distance(e_ie, e_ie.tape().constant(target.values, {k}));
}

double type_loss(const Embedding& e_ie, const Embedding& e_ii, const Embedding& e_ti, const Embedding& e_t) {
  ad::Tape tape;
  return type_loss(tape.constant(e_ie.values, {e_ie.dim()}), e_ii, e_ti, e_t).scalar();
}

std::vector<double> gram(const std::vector<double>& f, std::size_t channels, std::size_t positions, bool normalized) {
  if (f.size() != channels * positions) throw ShapeError("gram: feature size does not match C x N");
  ad::Tape tape;
  const double s = normalized ? 1.0 / static_cast<double>(channels * positions) : 1.0;
  const ad::Var g = ad::gram(tape.constant(f, {channels, positions}), s);
  return {g.value().begin(), g.value().end()};
}

std::vector<CropWindow> valid_crops(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, std::size_t size) {
  if (mask.size() != h * w) throw ShapeError("crop mask does not match the image");
  std::vector<CropWindow> out;
  if (size == 0 || size > h || size > w) return out;
  // Summed-area table of mask coverage.
  std::vector<std::size_t> sat((h + 1) * (w + 1), 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      sat[(y + 1) * (w + 1) + x + 1] = (mask[y * w + x] ? 1 : 0) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] -
                                       sat[y * (w + 1) + x];
  for (std::size_t y = 0; y + size <= h; ++y)
    for (std::size_t x = 0; x + size <= w; ++x) {
      const std::size_t c = sat[(y + size) * (w + 1) + x + size] - sat[y * (w + 1) + x + size] -
                            sat[(y + size) * (w + 1) + x] + sat[y * (w + 1) + x];
      if (c == size * size) out.push_back({y, x, size});
    }
  return out;
}

CropWindow sample_crop(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, std::size_t size, Rng& rng) {
  const auto all = valid_crops(mask, h, w, size);
  if (all.empty()) {
    throw ShapeError("region too small to host a " + std::to_string(size) + "x" + std::to_string(size) + " crop");
  }
  return all[rng.index(all.size())];
}

ad::Var gram_distance(const std::array<ad::Var, 4>& a, const std::array<ad::Var, 4>& b, bool normalized) {
  std::optional<ad::Var> total;
  for (std::size_t i = 0; i < 4; ++i) {
    auto g = [&](ad::Var f) {
      const std::size_t c = f.shape()[0], n = f.size() / c;
      return ad::gram(f, normalized ? 1.0 / static_cast<double>(c * n) : 1.0);
    };
    const ad::Var d = ad::l1_norm(ad::sub(g(a[i]), g(b[i])));
    total = total ? ad::add(*total, d) : d;
  }
  return *total;
}

ad::Var texture_loss(ad::Var i_e, const ParsingMask& parse_e, Region region, const Image& patch,
                     const TextureExtractor& extractor, Rng& rng, const LossOptions& opt) {
  if (region != Region::UpperCloth && region != Region::LowerCloth) throw ShapeError("texture loss needs a cloth region");
  const CropWindow win = sample_crop(parse_e.region(region), parse_e.height, parse_e.width, opt.crop_size, rng);
  ad::Tape& tape = i_e.tape();
  const ad::Var crop = ad::crop(i_e, win.y0, win.x0, win.size, win.size);
  return gram_distance(extractor.extract(tape, crop), extractor.extract(tape, image_var(tape, patch)), opt.normalize_gram);
}

double texture_loss(const Image& i_e, Region region, const Image& patch, const HumanParser& parser,
                    const TextureExtractor& extractor, Rng& rng, const LossOptions& opt) {
  ad::Tape tape;
  return texture_loss(image_var(tape, i_e), parser.parse(i_e), region, patch, extractor, rng, opt).scalar();
}

ad::Var identity_loss(ad::Var i_e, ad::Var i_i, const IdentityEmbedder& embedder) {
  if (i_e.shape() != i_i.shape()) throw ShapeError("identity loss needs equally sized images");
  ad::Tape& tape = i_e.tape();
  return ad::cosine_distance(embedder.embed(tape, i_e), embedder.embed(tape, i_i));
}

double identity_loss(const Image& i_e, const Image& i_i, const IdentityEmbedder& embedder) {
  ad::Tape tape;
  return identity_loss(image_var(tape, i_e), image_var(tape, i_i), embedder).scalar();
}

ad::Var background_loss(ad::Var i_e, const ParsingMask& parse_e, ad::Var i_i, const ParsingMask& parse_i) {
  if (i_e.shape() != i_i.shape()) throw ShapeError("background loss needs equally sized images");
  return ad::l2_norm(ad::sub(ad::mask(i_e, parse_e.background), ad::mask(i_i, parse_i.background)));
}

double background_loss(const Image& i_e, const Image& i_i, const HumanParser& parser) {
  ad::Tape tape;
  return background_loss(image_var(tape, i_e), parser.parse(i_e), image_var(tape, i_i), parser.parse(i_i)).scalar();
}

ad::Var skin_loss(ad::Var i_e, const ParsingMask& parse_e, ad::Var i_i, const ParsingMask& parse_i) {
  if (parse_e.count(Region::Skin) == 0 || parse_i.count(Region::Skin) == 0) {
    throw NumericError("skin loss needs a non-empty skin region in both images");
  }
  const ad::Var me = ad::masked_channel_mean(ad::rgb_to_lab(i_e), parse_e.skin);
  const ad::Var mi = ad::masked_channel_mean(ad::rgb_to_lab(i_i), parse_i.skin);
  return ad::l1_norm(ad::sub(me, mi));
}

double skin_loss(const Image& i_e, const Image& i_i, const HumanParser& parser) {
  ad::Tape tape;
  return skin_loss(image_var(tape, i_e), parser.parse(i_e), image_var(tape, i_i), parser.parse(i_i)).scalar();
}

ad::Var norm_loss(ad::Tape& tape, const std::optional<ad::Var>& delta_medium, const std::optional<ad::Var>& delta_fine) {
  std::vector<ad::Var> parts;
  for (const auto* d : {&delta_medium, &delta_fine}) {
    if (*d) parts.push_back(ad::reshape(**d, {(*d)->size()}));
  }
  if (parts.empty()) return tape.constant({0.0}, {1});
  return ad::l2_norm(parts.size() == 1 ? parts[0] : ad::concat_rows(parts));
}

double norm_loss(const LatentOffset& off) {
  double s = 0.0;
  for (const Matrix* m : {&off.delta_medium, &off.delta_fine})
    for (float v : m->data) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

ad::Var total_loss(ad::Tape& tape, const LossVars& t, const LossWeights& w) {
  ad::Var total = tape.constant({0.0}, {1});
  const std::pair<const std::optional<ad::Var>*, double> terms[6] = {
      {&t.type, w.type}, {&t.txr, w.txr}, {&t.id, w.id}, {&t.skin, w.skin}, {&t.bg, w.bg}, {&t.norm, w.norm}};
  for (const auto& [v, lambda] : terms) {
    if (*v && lambda != 0.0) total = ad::add(total, ad::scale(**v, lambda));
  }
  return total;
}

LossTerms values_of(const LossVars& t) {
  auto v = [](const std::optional<ad::Var>& x) { return x ? x->scalar() : 0.0; };
  return {v(t.type), v(t.txr), v(t.id), v(t.skin), v(t.bg), v(t.norm)};
}

}  // namespace ftex
