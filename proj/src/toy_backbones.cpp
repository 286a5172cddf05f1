#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "ftex/error.hpp"
#include "ftex/rng.hpp"
#include "ftex/toy.hpp"

namespace ftex::toy {

namespace {

std::size_t scale_coord(std::size_t v, std::size_t n) { return v * n / 64; }

Box scaled_box(std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1, std::size_t h, std::size_t w) {
  return Box{scale_coord(y0, h), scale_coord(y1, h), scale_coord(x0, w), scale_coord(x1, w)};
}

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (float& v : m.data) v = static_cast<float>(rng.normal() * stddev);
  return m;
}

double logit(double p) {
  p = std::clamp(p, 0.03, 0.97);
  return std::log(p / (1.0 - p));
}

void require_layout(const NamedTensors& got, const NamedTensors& expect, const char* what) {
  if (!got.same_layout(expect)) {
    throw ConfigError(std::string(what) + ": parameter tensors do not match the expected layout");
  }
}

ad::Var constant_of(ad::Tape& tape, const Matrix& m) { return tape.constant(m); }

}  // namespace

Box BodyLayout::face(std::size_t h, std::size_t w) { return scaled_box(4, 14, 24, 40, h, w); }
Box BodyLayout::upper_cloth(std::size_t h, std::size_t w) { return scaled_box(16, 36, 12, 52, h, w); }
Box BodyLayout::lower_cloth(std::size_t h, std::size_t w) { return scaled_box(36, 56, 16, 48, h, w); }
std::vector<Box> BodyLayout::skin(std::size_t h, std::size_t w) {
  return {scaled_box(14, 16, 28, 36, h, w), scaled_box(16, 34, 6, 12, h, w), scaled_box(16, 34, 52, 58, h, w),
          scaled_box(56, 62, 20, 44, h, w)};
}

const std::vector<std::string>& text_vocabulary() {
  static const std::vector<std::string> vocab = {
      "blouse",  "camisole", "coat",    "denim",  "dress",   "hoodie",  "jacket", "jeans",   "jogger",
      "joggers", "leggings", "long",    "neck",   "pants",   "pleated", "polo",   "rompers", "round",
      "shirt",   "short",    "shorts",  "skirt",  "sleeve",  "sleeveless", "suit", "sweater", "t",
      "tank",    "tight",    "loose",   "top",    "v",       "vest",    "striped", "floral", "plaid"};
  return vocab;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && cur != "and" && cur != "a" && cur != "with") tokens.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

// ---------------------------------------------------------------- generator

NamedTensors ToyGenerator::init(std::uint64_t seed, std::size_t image_size, std::size_t layers, std::size_t dim) {
  if (image_size < 16 || image_size % 16 != 0) throw ConfigError("toy generator image size must be a multiple of 16");
  const std::size_t h = image_size, w = image_size, hw = h * w, k = kBasesPerLayer;
  const GroupBounds bounds = GroupBounds::scaled(layers);
  Rng rng(derive_seed(seed, "toy-generator"));

  NamedTensors p;
  p.add("affine", gaussian(rng, layers * k, dim, 1.0));
  p.add("gain", Matrix(1, layers * k, 1.0f));

  const std::size_t split = bounds[Group::Fine].begin * k;
  Matrix basis(split, 3 * hw), texture_basis(layers * k - split, 3 * hw);
  const Box boxes[2] = {BodyLayout::upper_cloth(h, w), BodyLayout::lower_cloth(h, w)};
  for (std::size_t l = 0; l < layers; ++l) {
    const bool coarse = l < bounds[Group::Coarse].end;
    const bool medium = !coarse && l < bounds[Group::Medium].end;
    const bool first_medium = medium && l == bounds[Group::Medium].begin;
    for (std::size_t j = 0; j < k; ++j) {
      float* row = l * k + j < split ? basis.row(l * k + j).data() : texture_basis.row(l * k + j - split).data();
      auto put = [&](std::size_t y, std::size_t x, const double* rgb, double v) {
        for (std::size_t c = 0; c < 3; ++c) row[c * hw + y * w + x] = static_cast<float>(rgb[c] * v);
      };
      double rgb[3];
      if (coarse) {
        for (double& a : rgb) a = rng.normal() * 0.3;
        const double fy = static_cast<double>(rng.index(3)), fx = static_cast<double>(1 + rng.index(2));
        const double phy = rng.uniform(0.0, 2.0 * std::numbers::pi), phx = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            put(y, x, rgb, std::cos(std::numbers::pi * fy * (y + 0.5) / h + phy) * std::cos(std::numbers::pi * fx * (x + 0.5) / w + phx));
      } else if (medium) {
        // Garment color per box; odd pairs past the first six bend it with a slow ramp.
        const Box& box = boxes[j < 6 ? j / 3 : j % 2];
        if (j < 6 && first_medium) {
          for (std::size_t c = 0; c < 3; ++c) rgb[c] = c == j % 3 ? kMediumAmplitude : 0.0;
        } else {
          for (double& a : rgb) a = rng.normal() * kMediumAmplitude / std::sqrt(3.0);
        }
        const bool ramp = j >= 6 && (j / 2) % 2 == 1;
        const double ph = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (std::size_t y = box.y0; y < box.y1; ++y)
          for (std::size_t x = box.x0; x < box.x1; ++x)
            put(y, x, rgb, ramp ? 0.5 * std::cos(std::numbers::pi * (y - box.y0 + 0.5) / box.height() + ph) : 1.0);
      } else {
        // 2 px stripes, horizontal or vertical, with non-negative colors. They are summed and squashed
        // after the sigmoid, and every 2x2 block of them still sums to zero, so fine
        // bases leave any 2-aligned downsample untouched.
        const Box& box = boxes[j % 2];
        for (double& a : rgb) a = std::abs(rng.normal()) * kFineAmplitude;
        const bool vertical = rng.index(2) == 1;
        for (std::size_t y = box.y0; y < box.y1; ++y)
          for (std::size_t x = box.x0; x < box.x1; ++x) {
            const double v = (vertical ? x : y) % 2 == 0 ? 1.0 : -1.0;
            put(y, x, rgb, v);
          }
      }
    }
  }
  p.add("basis", std::move(basis));
  p.add("texture_basis", std::move(texture_basis));

  // Flat-shaded figure on a graded backdrop, stored in pre-sigmoid space.
  Matrix bias(1, 3 * hw);
  double backdrop[3], skin[3], upper_col[3], lower_col[3];
  for (int c = 0; c < 3; ++c) backdrop[c] = rng.uniform(0.72, 0.9);
  const double skin_base[3] = {0.86, 0.66, 0.55};
  for (int c = 0; c < 3; ++c) skin[c] = skin_base[c] + rng.uniform(-0.06, 0.06);
  for (int c = 0; c < 3; ++c) upper_col[c] = rng.uniform(0.35, 0.65);
  for (int c = 0; c < 3; ++c) lower_col[c] = rng.uniform(0.35, 0.65);
  const Box face = BodyLayout::face(h, w);
  const auto skin_boxes = BodyLayout::skin(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double* col = nullptr;
      double shade = 1.0;
      if (boxes[0].contains(y, x)) {
        col = upper_col;
      } else if (boxes[1].contains(y, x)) {
        col = lower_col;
      } else if (face.contains(y, x) ||
                 std::any_of(skin_boxes.begin(), skin_boxes.end(), [&](const Box& b) { return b.contains(y, x); })) {
        col = skin;
      } else {
        col = backdrop;
        shade = 1.0 - 0.15 * static_cast<double>(y) / static_cast<double>(h);
      }
      const bool cloth = col == upper_col || col == lower_col;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = cloth ? (col[c] - kTextureContrast) / (1.0 - 2.0 * kTextureContrast) : col[c] * shade;
        bias.data[c * hw + y * w + x] = static_cast<float>(logit(v) / kBiasScale);
      }
    }
  p.add("bias", std::move(bias));
  return p;
}

ToyGenerator::ToyGenerator(std::size_t image_size, std::size_t layers, std::size_t dim, NamedTensors params)
    : size_(image_size), layers_(layers), dim_(dim), params_(std::move(params)) {
  if (params_.size() != 5) throw ConfigError("toy generator expects 5 parameter tensors");
  const NamedTensors& p = params_;
  const std::size_t lk = layers * kBasesPerLayer, split = GroupBounds::scaled(layers)[Group::Fine].begin * kBasesPerLayer;
  const std::size_t px = 3 * image_size * image_size;
  if (p[0].first != "affine" || p[0].second.rows != lk || p[0].second.cols != dim || p[1].first != "gain" ||
      p[1].second.size() != lk || p[2].first != "basis" || p[2].second.rows != split || p[2].second.cols != px ||
      p[3].first != "texture_basis" || p[3].second.rows != lk - split || p[3].second.cols != px ||
      p[4].first != "bias" || p[4].second.size() != px) {
    throw ConfigError("toy generator: parameter tensors do not match the configured " + std::to_string(layers) + "x" +
                      std::to_string(dim) + " latent and " + std::to_string(image_size) + "px image");
  }
  const std::size_t hw = image_size * image_size;
  cloth_.assign(3 * hw, 0.0);
  squeeze_.assign(3 * hw, 1.0);
  for (const Box& box : {BodyLayout::upper_cloth(image_size, image_size), BodyLayout::lower_cloth(image_size, image_size)})
    for (std::size_t y = box.y0; y < box.y1; ++y)
      for (std::size_t x = box.x0; x < box.x1; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          cloth_[c * hw + y * image_size + x] = kTextureContrast;
          squeeze_[c * hw + y * image_size + x] = 1.0 - 2.0 * kTextureContrast;
        }
}

ad::Var ToyGenerator::forward(ad::Tape& tape, ad::Var latent, std::span<const ad::Var> theta) const {
  if (latent.shape() != ad::Shape{layers_, dim_}) {
    throw ShapeError("generator expects a " + std::to_string(layers_) + "x" + std::to_string(dim_) + " latent");
  }
  if (theta.size() != 5) throw ShapeError("generator expects 5 parameter variables");
  const ad::Var proj = ad::blockwise_project(theta[0], latent, kBasesPerLayer, kLatentGain / std::sqrt(static_cast<double>(dim_)));
  const ad::Var coef = ad::mul(proj, theta[1]);
  const std::size_t split = GroupBounds::scaled(layers_)[Group::Fine].begin * kBasesPerLayer, total = layers_ * kBasesPerLayer;
  const ad::Var low = ad::synthesize(ad::slice_rows(coef, 0, split), theta[2], ad::scale(theta[4], kBiasScale));
  // Stripe amplitudes are positive, so a texture has one latent preimage rather than a sign-flipped pair.
  const ad::Var fine = ad::synthesize(ad::sigmoid(ad::slice_rows(coef, split, total)), theta[3],
                                      tape.constant(std::vector<double>(cloth_.size(), 0.0), {cloth_.size()}));
  // Garment pixels: base color squeezed into [a, 1 - a], texture adds up to +-a.
  const ad::Var img = ad::add(ad::add(ad::mul(ad::sigmoid(low), tape.constant(squeeze_, {squeeze_.size()})),
                                      tape.constant(cloth_, {cloth_.size()})),
                              ad::scale(ad::tanh(fine), kTextureContrast));
  return ad::reshape(img, {3, size_, size_});
}

// ----------------------------------------------------------------- inverter

NamedTensors ToyInverter::init(std::size_t layers, std::size_t dim) {
  NamedTensors p;
  p.add("mean_latent", Matrix(layers, dim));
  return p;
}

ToyInverter::ToyInverter(std::shared_ptr<const Generator> generator, NamedTensors params, std::size_t steps, double lr)
    : generator_(std::move(generator)), params_(std::move(params)), steps_(steps), lr_(lr) {
  require_layout(params_, init(generator_->num_layers(), generator_->latent_dim()), "toy inverter");
}

LatentCode ToyInverter::invert(const Image& img, const GroupBounds& bounds) const {
  const std::size_t n = generator_->image_size();
  const Image target_img = img.same_size(Image(n, n)) ? img : resize_area(img, n, n);
  const std::vector<double> target = to_planar_double(target_img);
  const Matrix& init_latent = params_.at("mean_latent");
  std::vector<double> w(init_latent.data.begin(), init_latent.data.end());
  std::vector<double> m(w.size(), 0.0), v(w.size(), 0.0);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (std::size_t step = 1; step <= steps_; ++step) {
    ad::Tape tape;
    const ad::Var wv = tape.variable(w, {init_latent.rows, init_latent.cols});
    const auto theta = generator_->bind_frozen(tape);
    const ad::Var out = generator_->forward(tape, wv, theta);
    const ad::Var loss = ad::mean_squared_diff(out, tape.constant(target, {3, n, n}));
    tape.backward(loss);
    auto g = tape.grad(wv);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
  Matrix out(init_latent.rows, init_latent.cols);
  for (std::size_t i = 0; i < w.size(); ++i) out.data[i] = static_cast<float>(w[i]);
  return LatentCode(std::move(out), bounds);
}

// ------------------------------------------------------------ joint embedder

namespace {

// Which garment box a token mostly describes: 0 upper, 1 lower, 2 both.
int token_box(std::string_view tok) {
  static const std::vector<std::string_view> upper = {"blouse", "camisole", "coat",   "hoodie", "jacket", "neck",
                                                      "polo",   "round",    "shirt",  "sleeve", "sleeveless", "sweater",
                                                      "t",      "tank",     "top",    "v",      "vest"};
  static const std::vector<std::string_view> lower = {"jeans", "jogger", "joggers", "leggings", "pants", "pleated", "shorts", "skirt"};
  if (std::find(upper.begin(), upper.end(), tok) != upper.end()) return 0;
  if (std::find(lower.begin(), lower.end(), tok) != lower.end()) return 1;
  return 2;
}

}  // namespace

NamedTensors ToyJointEmbedder::init(std::uint64_t seed, std::size_t text_dim, std::size_t image_dim) {
  Rng rng(derive_seed(seed, "toy-joint-embedder"));
  NamedTensors p;
  constexpr std::size_t in = kInputSize, cells = kCellRows * kCellCols;
  Matrix q = gaussian(rng, image_dim, in, 0.25 / std::sqrt(static_cast<double>(cells)));
  const auto& vocab = text_vocabulary();
  const std::size_t rows = vocab.size() + kUnknownBuckets;
  Matrix table(rows, text_dim);
  if (text_dim == image_dim) {
    // A token embeds like the garment color shift it describes.
    for (std::size_t r = 0; r < rows; ++r) {
      const int box = r < vocab.size() ? token_box(vocab[r]) : 2;
      std::vector<double> pattern(in, 0.0);
      for (std::size_t b = 0; b < 2; ++b) {
        const double sd = box == 2 ? 0.12 : (static_cast<int>(b) == box ? 0.2 : 0.04);
        for (std::size_t c = 0; c < 3; ++c) {
          const double shift = rng.normal() * sd;
          for (std::size_t i = 0; i < cells; ++i) pattern[(b * 3 + c) * cells + i] = shift;
        }
      }
      for (std::size_t d = 0; d < text_dim; ++d) {
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(q(d, i)) * pattern[i];
        table(r, d) = static_cast<float>(acc);
      }
    }
  } else {
    table = gaussian(rng, rows, text_dim, 1.0);
  }
  p.add("image_proj", std::move(q));
  p.add("text_table", std::move(table));
  return p;
}

ToyJointEmbedder::ToyJointEmbedder(NamedTensors params) : params_(std::move(params)) {
  if (params_.size() != 2 || params_[0].first != "image_proj" || params_[1].first != "text_table" ||
      params_[0].second.cols != kInputSize ||
      params_[1].second.rows != text_vocabulary().size() + kUnknownBuckets) {
    throw ConfigError("toy joint embedder: parameter tensors do not match the expected layout");
  }
}

std::size_t ToyJointEmbedder::text_dim() const { return params_[1].second.cols; }
std::size_t ToyJointEmbedder::image_dim() const { return params_[0].second.rows; }

Embedding ToyJointEmbedder::embed_text(std::string_view text) const {
  const Matrix& table = params_[1].second;
  const auto& vocab = text_vocabulary();
  Embedding e{std::vector<double>(table.cols, 0.0), EmbeddingSpace::JointTextImage};
  for (const std::string& tok : tokenize(text)) {
    const auto it = std::find(vocab.begin(), vocab.end(), tok);
    const std::size_t row = it != vocab.end() ? static_cast<std::size_t>(it - vocab.begin())
                                              : vocab.size() + fnv1a(tok) % kUnknownBuckets;
    for (std::size_t j = 0; j < table.cols; ++j) e.values[j] += table(row, j);
  }
  return e;
}

ad::Var ToyJointEmbedder::embed_image(ad::Tape& tape, ad::Var img) const {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("joint embedder expects a [3 x H x W] image");
  std::array<ad::Var, 2> parts;
  const Box boxes[2] = {BodyLayout::upper_cloth(s[1], s[2]), BodyLayout::lower_cloth(s[1], s[2])};
  for (std::size_t b = 0; b < 2; ++b) {
    const ad::Var c = ad::crop(img, boxes[b].y0, boxes[b].x0, boxes[b].height(), boxes[b].width());
    parts[b] = ad::resample_area(c, kCellRows, kCellCols);
  }
  const ad::Var flat = ad::reshape(ad::add_scalar(ad::concat_rows(parts), -0.5), {kInputSize});
  return ad::linear(constant_of(tape, params_[0].second), flat, ad::Var{});
}

// --------------------------------------------------------- texture extractor

NamedTensors ToyTextureExtractor::init(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-texture-extractor"));
  NamedTensors p;
  std::size_t in = 3;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t out = kChannels[i];
    // The last level stays near-linear and small; its channel means are the patch embedding.
    const double gain = i + 1 < 4 ? 1.6 : 0.4;
    p.add("conv" + std::to_string(i) + "_w", gaussian(rng, out, in * 9, gain / std::sqrt(static_cast<double>(in * 9))));
    p.add("conv" + std::to_string(i) + "_b", gaussian(rng, 1, out, 0.1));
    in = out;
  }
  return p;
}

ToyTextureExtractor::ToyTextureExtractor(NamedTensors params) : params_(std::move(params)) {
  require_layout(params_, init(0), "toy texture extractor");
}

std::array<ad::Var, 4> ToyTextureExtractor::extract(ad::Tape& tape, ad::Var img) const {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] < 8 || s[2] < 8) throw ShapeError("texture extractor needs a 3-channel image of at least 8x8");
  std::array<ad::Var, 4> levels;
  // Mean color removed per channel: the stack only sees local contrast.
  ad::Var x = ad::reshape(ad::scale(ad::center_rows(ad::reshape(img, {3, s[1] * s[2]})), 4.0), s);
  for (std::size_t i = 0; i < 4; ++i) {
    x = ad::tanh(ad::conv3x3(x, constant_of(tape, params_[2 * i].second), constant_of(tape, params_[2 * i + 1].second)));
    levels[i] = x;
  }
  return levels;
}

// --------------------------------------------------------- identity embedder

NamedTensors ToyIdentityEmbedder::init(std::uint64_t seed, std::size_t dim) {
  Rng rng(derive_seed(seed, "toy-identity-embedder"));
  NamedTensors p;
  const std::size_t in = 3 * kGrid * kGrid;
  p.add("proj", gaussian(rng, dim, in, 3.0 / std::sqrt(static_cast<double>(in))));
  p.add("bias", gaussian(rng, 1, dim, 0.5));
  return p;
}

ToyIdentityEmbedder::ToyIdentityEmbedder(NamedTensors params) : params_(std::move(params)) {
  if (params_.size() != 2 || params_[0].first != "proj" || params_[1].first != "bias" ||
      params_[0].second.cols != 3 * kGrid * kGrid || params_[1].second.size() != params_[0].second.rows) {
    throw ConfigError("toy identity embedder: parameter tensors do not match the expected layout");
  }
}

ad::Var ToyIdentityEmbedder::embed(ad::Tape& tape, ad::Var img) const {
  const auto& s = img.shape();
  const Box face = BodyLayout::face(s[1], s[2]);
  const ad::Var f = ad::crop(img, face.y0, face.x0, face.height(), face.width());
  const ad::Var small = ad::resample_area(f, kGrid, kGrid);
  const ad::Var flat = ad::reshape(ad::add_scalar(small, -0.5), {3 * kGrid * kGrid});
  return ad::linear(constant_of(tape, params_[0].second), flat, constant_of(tape, params_[1].second));
}

// -------------------------------------------------------------------- parser

NamedTensors ToyParser::init(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "toy-parser"));
  Matrix protos(5, 3);
  for (float& v : protos.data) v = static_cast<float>(rng.uniform(0.1, 0.9));
  NamedTensors p;
  p.add("prototypes", std::move(protos));
  return p;
}

ToyParser::ToyParser(NamedTensors params) : params_(std::move(params)) { require_layout(params_, init(0), "toy parser"); }

ParsingMask ToyParser::parse(const Image& img) const {
  const std::size_t h = img.height(), w = img.width(), hw = h * w;
  ParsingMask pm;
  pm.height = h;
  pm.width = w;
  pm.upper_cloth.assign(hw, 0);
  pm.lower_cloth.assign(hw, 0);
  pm.skin.assign(hw, 0);
  pm.face.assign(hw, 0);
  pm.background.assign(hw, 0);
  pm.category.assign(hw, ClothCategory::None);
  const Box upper = BodyLayout::upper_cloth(h, w), lower = BodyLayout::lower_cloth(h, w), face = BodyLayout::face(h, w);
  const auto skin = BodyLayout::skin(h, w);
  const Matrix& protos = params_[0].second;
  static constexpr ClothCategory kAll[5] = {ClothCategory::Top, ClothCategory::Skirt, ClothCategory::Pants,
                                            ClothCategory::Dress, ClothCategory::Rompers};
  auto classify = [&](std::size_t y, std::size_t x, bool is_upper) {
    double best = 1e30;
    ClothCategory cat = ClothCategory::None;
    for (std::size_t k = 0; k < 5; ++k) {
      const ClothCategory c = kAll[k];
      if (is_upper ? (c == ClothCategory::Skirt || c == ClothCategory::Pants) : c == ClothCategory::Top) continue;
      double d = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double diff = img.at(ch, y, x) - protos(k, ch);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        cat = c;
      }
    }
    return cat;
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      if (upper.contains(y, x)) {
        pm.upper_cloth[i] = 1;
        pm.category[i] = classify(y, x, true);
      } else if (lower.contains(y, x)) {
        pm.lower_cloth[i] = 1;
        pm.category[i] = classify(y, x, false);
      } else {
        pm.background[i] = 1;
        if (face.contains(y, x)) pm.face[i] = 1;
        if (std::any_of(skin.begin(), skin.end(), [&](const Box& b) { return b.contains(y, x); })) pm.skin[i] = 1;
      }
    }
  return pm;
}

// ---------------------------------------------------------------- perceptual

NamedTensors ToyPerceptual::init(std::uint64_t seed, std::size_t dim) {
  Rng rng(derive_seed(seed, "toy-perceptual"));
  NamedTensors p;
  const std::size_t in = 3 * kGrid * kGrid;
  p.add("proj", gaussian(rng, dim, in, 2.0 / std::sqrt(static_cast<double>(in))));
  return p;
}

ToyPerceptual::ToyPerceptual(NamedTensors params) : params_(std::move(params)) {
  if (params_.size() != 1 || params_[0].first != "proj" || params_[0].second.cols != 3 * kGrid * kGrid) {
    throw ConfigError("toy perceptual: parameter tensors do not match the expected layout");
  }
}

ad::Var ToyPerceptual::project(ad::Tape& tape, ad::Var img) const {
  const ad::Var small = ad::resample_area(img, kGrid, kGrid);
  const ad::Var flat = ad::reshape(ad::add_scalar(small, -0.5), {3 * kGrid * kGrid});
  return ad::linear(constant_of(tape, params_[0].second), flat, ad::Var{});
}

ad::Var ToyPerceptual::distance(ad::Tape& tape, ad::Var a, ad::Var b) const {
  if (a.shape() != b.shape()) throw ShapeError("perceptual distance needs equally sized images");
  return ad::mean_squared_diff(project(tape, a), project(tape, b));
}

std::vector<double> ToyPerceptual::features(const Image& img) const {
  ad::Tape tape;
  const ad::Var f = project(tape, image_var(tape, img));
  return {f.value().begin(), f.value().end()};
}

}  // namespace ftex::toy
