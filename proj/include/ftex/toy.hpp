#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ftex/backbones.hpp"

// Deterministic CPU-scale stand-ins for the pretrained backbones. Every toy
// is a pure function of its seed and its input.
namespace ftex::toy {

struct Box {
  std::size_t y0, y1, x0, x1;
  bool contains(std::size_t y, std::size_t x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
  std::size_t height() const { return y1 - y0; }
  std::size_t width() const { return x1 - x0; }
};

// Fixed figure layout, defined on a 64x64 grid and scaled to the image size.
//   face        rows [4,14)  cols [24,40)
//   upper cloth rows [16,36) cols [12,52)
//   lower cloth rows [36,56) cols [16,48)
//   skin        neck, both arms, legs
struct BodyLayout {
  static Box face(std::size_t h, std::size_t w);
  static Box upper_cloth(std::size_t h, std::size_t w);
  static Box lower_cloth(std::size_t h, std::size_t w);
  static std::vector<Box> skin(std::size_t h, std::size_t w);
};

// Tokens with dedicated rows in the toy text table; everything else falls
// into one of kUnknownBuckets hashed rows.
const std::vector<std::string>& text_vocabulary();
inline constexpr std::size_t kUnknownBuckets = 16;
std::vector<std::string> tokenize(std::string_view text);

class ToyGenerator final : public Generator {
 public:
  static constexpr std::size_t kBasesPerLayer = 32;
  static constexpr double kBiasScale = 16.0;
  static constexpr double kLatentGain = 48.0;
  static constexpr double kMediumAmplitude = 1.0;
  static constexpr double kFineAmplitude = 1.0;
  static constexpr double kTextureContrast = 0.15;

  static NamedTensors init(std::uint64_t seed, std::size_t image_size, std::size_t layers, std::size_t dim);
  ToyGenerator(std::size_t image_size, std::size_t layers, std::size_t dim, NamedTensors params);

  std::size_t num_layers() const override { return layers_; }
  std::size_t latent_dim() const override { return dim_; }
  std::size_t image_size() const override { return size_; }
  const NamedTensors& parameters() const override { return params_; }
  ad::Var forward(ad::Tape& tape, ad::Var latent, std::span<const ad::Var> theta) const override;

 private:
  std::size_t size_, layers_, dim_;
  NamedTensors params_;
  std::vector<double> cloth_, squeeze_;  // per-pixel offset and scale of the base color
};

// Optimization-based inversion: Adam on the latent from the stored mean
// latent, minimizing mean squared pixel error against the generator.
class ToyInverter final : public Inverter {
 public:
  static NamedTensors init(std::size_t layers, std::size_t dim);
  ToyInverter(std::shared_ptr<const Generator> generator, NamedTensors params, std::size_t steps, double lr);

  const NamedTensors& parameters() const override { return params_; }
  LatentCode invert(const Image& img, const GroupBounds& bounds) const override;

 private:
  std::shared_ptr<const Generator> generator_;
  NamedTensors params_;
  std::size_t steps_;
  double lr_;
};

// Image side: linear projection of both garment boxes, each area-resampled to
// 4x8 cells. Text side: sum of per-token vectors, which makes text embeddings
// exactly additive.
class ToyJointEmbedder final : public JointEmbedder {
 public:
  static constexpr std::size_t kCellRows = 4;
  static constexpr std::size_t kCellCols = 8;
  static constexpr std::size_t kInputSize = 2 * 3 * kCellRows * kCellCols;
  static NamedTensors init(std::uint64_t seed, std::size_t text_dim, std::size_t image_dim);
  explicit ToyJointEmbedder(NamedTensors params);

  std::size_t text_dim() const override;
  std::size_t image_dim() const override;
  const NamedTensors& parameters() const override { return params_; }
  Embedding embed_text(std::string_view text) const override;
  ad::Var embed_image(ad::Tape& tape, ad::Var img) const override;
  using JointEmbedder::embed_image;

 private:
  NamedTensors params_;
};

// Four stacked conv3x3 + tanh levels at full resolution.
class ToyTextureExtractor final : public TextureExtractor {
 public:
  static constexpr std::array<std::size_t, 4> kChannels{8, 8, 16, 16};
  static NamedTensors init(std::uint64_t seed);
  explicit ToyTextureExtractor(NamedTensors params);

  const NamedTensors& parameters() const override { return params_; }
  std::size_t embedding_dim() const override { return kChannels[3]; }
  std::array<ad::Var, 4> extract(ad::Tape& tape, ad::Var img) const override;
  using TextureExtractor::extract;

 private:
  NamedTensors params_;
};

// Reads only the face box.
class ToyIdentityEmbedder final : public IdentityEmbedder {
 public:
  static constexpr std::size_t kGrid = 8;
  static NamedTensors init(std::uint64_t seed, std::size_t dim);
  explicit ToyIdentityEmbedder(NamedTensors params);

  const NamedTensors& parameters() const override { return params_; }
  ad::Var embed(ad::Tape& tape, ad::Var img) const override;
  using IdentityEmbedder::embed;

 private:
  NamedTensors params_;
};

// Region masks follow BodyLayout exactly; cloth pixels are classified by
// nearest prototype color among the garment categories allowed in that band.
class ToyParser final : public HumanParser {
 public:
  static NamedTensors init(std::uint64_t seed);
  explicit ToyParser(NamedTensors params);

  const NamedTensors& parameters() const override { return params_; }
  ParsingMask parse(const Image& img) const override;

 private:
  NamedTensors params_;
};

// Mean squared difference of a fixed random projection of the 16x16
// area-resampled image.
class ToyPerceptual final : public PerceptualDistance {
 public:
  static constexpr std::size_t kGrid = 16;
  static NamedTensors init(std::uint64_t seed, std::size_t dim);
  explicit ToyPerceptual(NamedTensors params);

  const NamedTensors& parameters() const override { return params_; }
  ad::Var distance(ad::Tape& tape, ad::Var a, ad::Var b) const override;
  std::vector<double> features(const Image& img) const override;
  using PerceptualDistance::distance;

 private:
  ad::Var project(ad::Tape& tape, ad::Var img) const;
  NamedTensors params_;
};

}  // namespace ftex::toy
