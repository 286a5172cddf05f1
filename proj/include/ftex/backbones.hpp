#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ftex/autodiff.hpp"
#include "ftex/image.hpp"
#include "ftex/latent.hpp"
#include "ftex/tensor.hpp"

namespace ftex {

enum class EmbeddingSpace { JointTextImage, Identity, Texture };

struct Embedding {
  std::vector<double> values;
  EmbeddingSpace space = EmbeddingSpace::JointTextImage;

  std::size_t dim() const { return values.size(); }
  double norm() const;
  Embedding operator+(const Embedding& o) const;
  Embedding operator-(const Embedding& o) const;
  bool operator==(const Embedding&) const = default;
};

enum class ClothCategory : std::uint8_t { None = 0, Top, Skirt, Pants, Dress, Rompers };

std::string_view category_name(ClothCategory c);
// Accepts the four evaluation categories (skirt, pants, dress, rompers).
ClothCategory parse_eval_category(std::string_view name);
// First evaluation category named in a prompt: dress/rompers win over
// lower-body words. None when the prompt names none of the four.
ClothCategory category_of_prompt(std::string_view prompt);

enum class Region { UpperCloth, LowerCloth, Skin, Face, Background };

// Per-region binary maps, row-major H x W, values 0/1.
struct ParsingMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> upper_cloth;
  std::vector<std::uint8_t> lower_cloth;
  std::vector<std::uint8_t> skin;
  std::vector<std::uint8_t> face;
  std::vector<std::uint8_t> background;  // non-cloth: complement of the cloth union
  std::vector<ClothCategory> category;   // per-pixel garment class, None off-cloth

  const std::vector<std::uint8_t>& region(Region r) const;
  std::vector<std::uint8_t> cloth() const;
  std::size_t count(Region r) const;
  std::size_t count(ClothCategory c) const;
  // Throws ShapeError/FormatError when a ParsingMask invariant is violated.
  void validate() const;
};

struct FeatureMap {
  std::size_t channels = 0;
  std::size_t positions = 0;
  std::vector<double> values;  // channels x positions
};
using FeaturePyramid = std::array<FeatureMap, 4>;

// Image <-> tape conversion, layout [3 x H x W].
ad::Var image_var(ad::Tape& tape, const Image& img, bool requires_grad = false);
Image var_to_image(ad::Var v);

// Binds a parameter set onto a tape, one Var per tensor, in order.
std::vector<ad::Var> bind_parameters(ad::Tape& tape, const NamedTensors& params, bool trainable);

// Double-precision copies of a parameter set, converted once and shared by
// every tape that binds them as constants.
class FrozenParameters {
 public:
  explicit FrozenParameters(const NamedTensors& params);
  std::vector<ad::Var> bind(ad::Tape& tape) const;

 private:
  std::vector<std::shared_ptr<const std::vector<double>>> values_;
  std::vector<ad::Shape> shapes_;
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::size_t num_layers() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t image_size() const = 0;
  // The shared parameter set theta. Never mutated after construction.
  virtual const NamedTensors& parameters() const = 0;
  // latent: [L x D]; theta follows parameters() order. Returns [3 x H x W].
  virtual ad::Var forward(ad::Tape& tape, ad::Var latent, std::span<const ad::Var> theta) const = 0;

  Image generate(const LatentCode& w) const;
  Image generate(const LatentCode& w, const NamedTensors& theta) const;

  // parameters() bound as constants without a per-call conversion.
  std::vector<ad::Var> bind_frozen(ad::Tape& tape) const;

 private:
  mutable std::once_flag frozen_once_;
  mutable std::unique_ptr<FrozenParameters> frozen_;
};

class Inverter {
 public:
  virtual ~Inverter() = default;
  virtual const NamedTensors& parameters() const = 0;
  virtual LatentCode invert(const Image& img, const GroupBounds& bounds) const = 0;
};

class JointEmbedder {
 public:
  virtual ~JointEmbedder() = default;
  virtual std::size_t text_dim() const = 0;
  virtual std::size_t image_dim() const = 0;
  virtual const NamedTensors& parameters() const = 0;
  virtual Embedding embed_text(std::string_view text) const = 0;
  virtual ad::Var embed_image(ad::Tape& tape, ad::Var img) const = 0;

  Embedding embed_image(const Image& img) const;
};

class TextureExtractor {
 public:
  virtual ~TextureExtractor() = default;
  virtual const NamedTensors& parameters() const = 0;
  // Channel count of the final pyramid level.
  virtual std::size_t embedding_dim() const = 0;
  // Four levels, each [C_i x H_i x W_i].
  virtual std::array<ad::Var, 4> extract(ad::Tape& tape, ad::Var img) const = 0;

  FeaturePyramid extract(const Image& img) const;
};

class IdentityEmbedder {
 public:
  virtual ~IdentityEmbedder() = default;
  virtual const NamedTensors& parameters() const = 0;
  virtual ad::Var embed(ad::Tape& tape, ad::Var img) const = 0;

  Embedding embed(const Image& img) const;
};

class HumanParser {
 public:
  virtual ~HumanParser() = default;
  virtual const NamedTensors& parameters() const = 0;
  virtual ParsingMask parse(const Image& img) const = 0;
};

class PerceptualDistance {
 public:
  virtual ~PerceptualDistance() = default;
  virtual const NamedTensors& parameters() const = 0;
  virtual ad::Var distance(ad::Tape& tape, ad::Var a, ad::Var b) const = 0;
  // Feature vector used for distribution statistics (FID).
  virtual std::vector<double> features(const Image& img) const = 0;

  double distance(const Image& a, const Image& b) const;
};

struct BackboneSet {
  std::shared_ptr<const Generator> generator;
  std::shared_ptr<const Inverter> inverter;
  std::shared_ptr<const JointEmbedder> joint_embedder;
  std::shared_ptr<const TextureExtractor> texture_extractor;
  std::shared_ptr<const IdentityEmbedder> identity_embedder;
  std::shared_ptr<const HumanParser> parser;
  std::shared_ptr<const PerceptualDistance> perceptual;
  std::string config_hash;
};

// "toy" | "toy(<seed>)" | "external(<checkpoint path>)"
struct BackboneSource {
  enum class Kind { Toy, External };
  Kind kind = Kind::Toy;
  std::optional<std::uint64_t> seed;  // falls back to BackboneConfig::seed
  std::string checkpoint;

  static BackboneSource parse(std::string_view text);
  std::string to_string() const;
  bool operator==(const BackboneSource&) const = default;
};

struct BackboneConfig {
  std::uint64_t seed = 7;
  std::size_t image_size = 64;
  std::size_t latent_layers = 8;
  std::size_t latent_dim = 32;
  std::size_t text_dim = 32;
  std::size_t image_dim = 32;
  std::size_t identity_dim = 32;
  std::size_t perceptual_dim = 64;
  std::size_t inverter_steps = 80;
  double inverter_lr = 0.005;

  BackboneSource generator, inverter, joint_embedder, texture_extractor, identity_embedder, parser, perceptual;

  std::string describe() const;
  bool operator==(const BackboneConfig&) const = default;
};

BackboneSet load_backbones(const BackboneConfig& cfg);

// Writes a backbone's parameter set in the tensor container format so it
// can be loaded back as external(<path>).
void save_backbone_parameters(const NamedTensors& params, const std::filesystem::path& path);

}  // namespace ftex
