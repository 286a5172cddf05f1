#include "ftex/backbones.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "ftex/error.hpp"
#include "ftex/rng.hpp"
#include "ftex/tensor_file.hpp"
#include "ftex/toy.hpp"

namespace ftex {

double Embedding::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

Embedding Embedding::operator+(const Embedding& o) const {
  if (o.dim() != dim()) throw ShapeError("embedding dimensions differ");
  Embedding r = *this;
  for (std::size_t i = 0; i < values.size(); ++i) r.values[i] += o.values[i];
  return r;
}

Embedding Embedding::operator-(const Embedding& o) const {
  if (o.dim() != dim()) throw ShapeError("embedding dimensions differ");
  Embedding r = *this;
  for (std::size_t i = 0; i < values.size(); ++i) r.values[i] -= o.values[i];
  return r;
}

std::string_view category_name(ClothCategory c) {
  switch (c) {
    case ClothCategory::None: return "none";
    case ClothCategory::Top: return "top";
    case ClothCategory::Skirt: return "skirt";
    case ClothCategory::Pants: return "pants";
    case ClothCategory::Dress: return "dress";
    case ClothCategory::Rompers: return "rompers";
  }
  return "none";
}

ClothCategory parse_eval_category(std::string_view name) {
  if (name == "skirt") return ClothCategory::Skirt;
  if (name == "pants") return ClothCategory::Pants;
  if (name == "dress") return ClothCategory::Dress;
  if (name == "rompers") return ClothCategory::Rompers;
  throw FormatError("unknown evaluation category '" + std::string(name) + "' (expected skirt, pants, dress or rompers)");
}

ClothCategory category_of_prompt(std::string_view prompt) {
  const auto tokens = toy::tokenize(prompt);
  auto has = [&](std::initializer_list<std::string_view> words) {
    return std::any_of(tokens.begin(), tokens.end(),
                       [&](const std::string& t) { return std::find(words.begin(), words.end(), t) != words.end(); });
  };
  if (has({"dress"})) return ClothCategory::Dress;
  if (has({"rompers", "romper"})) return ClothCategory::Rompers;
  if (has({"skirt"})) return ClothCategory::Skirt;
  if (has({"pants", "jeans", "leggings", "shorts", "joggers", "trousers"})) return ClothCategory::Pants;
  return ClothCategory::None;
}

const std::vector<std::uint8_t>& ParsingMask::region(Region r) const {
  switch (r) {
    case Region::UpperCloth: return upper_cloth;
    case Region::LowerCloth: return lower_cloth;
    case Region::Skin: return skin;
    case Region::Face: return face;
    case Region::Background: return background;
  }
  return background;
}

std::vector<std::uint8_t> ParsingMask::cloth() const {
  std::vector<std::uint8_t> m(upper_cloth.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (upper_cloth[i] | lower_cloth[i]) ? 1 : 0;
  return m;
}

std::size_t ParsingMask::count(Region r) const {
  const auto& m = region(r);
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

std::size_t ParsingMask::count(ClothCategory c) const {
  return static_cast<std::size_t>(std::count(category.begin(), category.end(), c));
}

void ParsingMask::validate() const {
  const std::size_t n = height * width;
  for (const auto* m : {&upper_cloth, &lower_cloth, &skin, &face, &background}) {
    if (m->size() != n) throw ShapeError("parsing mask region does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  if (category.size() != n) throw ShapeError("parsing category map does not match the image size");
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto* m : {&upper_cloth, &lower_cloth, &skin, &face, &background}) {
      if ((*m)[i] > 1) throw FormatError("parsing mask values must be 0 or 1");
    }
    const bool cloth = upper_cloth[i] || lower_cloth[i];
    if (cloth == static_cast<bool>(background[i])) throw FormatError("background must be the exact complement of cloth");
    if (!cloth && category[i] != ClothCategory::None) throw FormatError("garment category outside the cloth region");
  }
}

ad::Var image_var(ad::Tape& tape, const Image& img, bool requires_grad) {
  std::vector<double> v = to_planar_double(img);
  ad::Shape s{3, img.height(), img.width()};
  return requires_grad ? tape.variable(std::move(v), std::move(s)) : tape.constant(std::move(v), std::move(s));
}

Image var_to_image(ad::Var v) {
  const auto& s = v.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("expected a [3 x H x W] image variable");
  return image_from_planar(s[1], s[2], {v.value().begin(), v.value().end()});
}

std::vector<ad::Var> bind_parameters(ad::Tape& tape, const NamedTensors& params, bool trainable) {
  std::vector<ad::Var> out;
  out.reserve(params.size());
  for (const auto& [name, m] : params) out.push_back(trainable ? tape.variable(m) : tape.constant(m));
  return out;
}

FrozenParameters::FrozenParameters(const NamedTensors& params) {
  for (const auto& [name, m] : params) {
    values_.push_back(std::make_shared<const std::vector<double>>(m.data.begin(), m.data.end()));
    shapes_.push_back({m.rows, m.cols});
  }
}

std::vector<ad::Var> FrozenParameters::bind(ad::Tape& tape) const {
  std::vector<ad::Var> out;
  out.reserve(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) out.push_back(tape.constant(values_[i], shapes_[i]));
  return out;
}

std::vector<ad::Var> Generator::bind_frozen(ad::Tape& tape) const {
  std::call_once(frozen_once_, [this] { frozen_ = std::make_unique<FrozenParameters>(parameters()); });
  return frozen_->bind(tape);
}

Image Generator::generate(const LatentCode& w) const { return generate(w, parameters()); }

Image Generator::generate(const LatentCode& w, const NamedTensors& theta) const {
  if (!theta.same_layout(parameters())) throw ShapeError("generator parameter set does not match the generator");
  ad::Tape tape;
  const auto vars = &theta == &parameters() ? bind_frozen(tape) : bind_parameters(tape, theta, false);
  return var_to_image(forward(tape, tape.constant(w.layers()), vars));
}

Embedding JointEmbedder::embed_image(const Image& img) const {
  ad::Tape tape;
  const ad::Var e = embed_image(tape, image_var(tape, img));
  return Embedding{{e.value().begin(), e.value().end()}, EmbeddingSpace::JointTextImage};
}

FeaturePyramid TextureExtractor::extract(const Image& img) const {
  ad::Tape tape;
  const auto levels = extract(tape, image_var(tape, img));
  FeaturePyramid out;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = levels[i].shape();
    out[i].channels = s[0];
    out[i].positions = levels[i].size() / s[0];
    out[i].values.assign(levels[i].value().begin(), levels[i].value().end());
  }
  return out;
}

Embedding IdentityEmbedder::embed(const Image& img) const {
  ad::Tape tape;
  const ad::Var e = embed(tape, image_var(tape, img));
  return Embedding{{e.value().begin(), e.value().end()}, EmbeddingSpace::Identity};
}

double PerceptualDistance::distance(const Image& a, const Image& b) const {
  ad::Tape tape;
  return distance(tape, image_var(tape, a), image_var(tape, b)).scalar();
}

BackboneSource BackboneSource::parse(std::string_view text) {
  auto inner = [&](std::string_view prefix) -> std::optional<std::string_view> {
    if (text.size() > prefix.size() + 1 && text.substr(0, prefix.size()) == prefix && text[prefix.size()] == '(' &&
        text.back() == ')') {
      return text.substr(prefix.size() + 1, text.size() - prefix.size() - 2);
    }
    return std::nullopt;
  };
  BackboneSource s;
  if (text == "toy") return s;
  if (auto arg = inner("toy")) {
    std::uint64_t seed = 0;
    const auto [p, ec] = std::from_chars(arg->data(), arg->data() + arg->size(), seed);
    if (ec != std::errc{} || p != arg->data() + arg->size()) throw ConfigError("bad toy seed in '" + std::string(text) + "'");
    s.seed = seed;
    return s;
  }
  if (auto arg = inner("external")) {
    if (arg->empty()) throw ConfigError("external backbone needs a checkpoint path");
    s.kind = Kind::External;
    s.checkpoint = std::string(*arg);
    return s;
  }
  throw ConfigError("backbone source must be toy, toy(<seed>) or external(<path>), got '" + std::string(text) + "'");
}

std::string BackboneSource::to_string() const {
  if (kind == Kind::External) return "external(" + checkpoint + ")";
  return seed ? "toy(" + std::to_string(*seed) + ")" : "toy";
}

std::string BackboneConfig::describe() const {
  std::ostringstream os;
  os << "seed=" << seed << " image_size=" << image_size << " latent=" << latent_layers << "x" << latent_dim
     << " text_dim=" << text_dim << " image_dim=" << image_dim << " identity_dim=" << identity_dim
     << " perceptual_dim=" << perceptual_dim << " inverter_steps=" << inverter_steps << " inverter_lr=" << inverter_lr
     << " generator=" << generator.to_string() << " inverter=" << inverter.to_string()
     << " joint_embedder=" << joint_embedder.to_string() << " texture_extractor=" << texture_extractor.to_string()
     << " identity_embedder=" << identity_embedder.to_string() << " parser=" << parser.to_string()
     << " perceptual=" << perceptual.to_string();
  return os.str();
}

namespace {

template <class Init>
NamedTensors resolve(const BackboneSource& src, std::uint64_t default_seed, const char* what, Init init) {
  if (src.kind == BackboneSource::Kind::Toy) return init(src.seed.value_or(default_seed));
  std::error_code ec;
  if (!std::filesystem::is_regular_file(src.checkpoint, ec)) {
    throw ConfigError(std::string("missing checkpoint for ") + what + ": " + src.checkpoint);
  }
  try {
    return load_container(src.checkpoint).tensors;
  } catch (const FormatError& e) {
    throw ConfigError(std::string("cannot load ") + what + " checkpoint " + src.checkpoint + ": " + e.what());
  }
}

}  // namespace

BackboneSet load_backbones(const BackboneConfig& cfg) {
  BackboneSet set;
  const std::uint64_t s = cfg.seed;
  auto gen = std::make_shared<toy::ToyGenerator>(
      cfg.image_size, cfg.latent_layers, cfg.latent_dim, resolve(cfg.generator, s, "generator", [&](std::uint64_t seed) {
        return toy::ToyGenerator::init(seed, cfg.image_size, cfg.latent_layers, cfg.latent_dim);
      }));
  set.generator = gen;

  auto joint = std::make_shared<toy::ToyJointEmbedder>(resolve(cfg.joint_embedder, s, "joint embedder", [&](std::uint64_t seed) {
    return toy::ToyJointEmbedder::init(seed, cfg.text_dim, cfg.image_dim);
  }));
  if (joint->text_dim() != joint->image_dim()) {
    throw ConfigError("joint embedder text and image outputs must share a dimension (text " + std::to_string(joint->text_dim()) +
                      ", image " + std::to_string(joint->image_dim()) + ")");
  }
  set.joint_embedder = joint;

  set.inverter = std::make_shared<toy::ToyInverter>(
      gen, resolve(cfg.inverter, s, "inverter", [&](std::uint64_t) { return toy::ToyInverter::init(cfg.latent_layers, cfg.latent_dim); }),
      cfg.inverter_steps, cfg.inverter_lr);
  set.texture_extractor = std::make_shared<toy::ToyTextureExtractor>(
      resolve(cfg.texture_extractor, s, "texture extractor", [](std::uint64_t seed) { return toy::ToyTextureExtractor::init(seed); }));
  set.identity_embedder = std::make_shared<toy::ToyIdentityEmbedder>(resolve(
      cfg.identity_embedder, s, "identity embedder", [&](std::uint64_t seed) { return toy::ToyIdentityEmbedder::init(seed, cfg.identity_dim); }));
  set.parser = std::make_shared<toy::ToyParser>(
      resolve(cfg.parser, s, "parser", [](std::uint64_t seed) { return toy::ToyParser::init(seed); }));
  set.perceptual = std::make_shared<toy::ToyPerceptual>(
      resolve(cfg.perceptual, s, "perceptual", [&](std::uint64_t seed) { return toy::ToyPerceptual::init(seed, cfg.perceptual_dim); }));

  std::ostringstream h;
  h << std::hex << fnv1a(cfg.describe());
  set.config_hash = h.str();
  return set;
}

void save_backbone_parameters(const NamedTensors& params, const std::filesystem::path& path) {
  save_container(path, params, "kind: backbone\n");
}

}  // namespace ftex
