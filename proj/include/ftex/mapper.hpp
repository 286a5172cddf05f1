#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "ftex/autodiff.hpp"
#include "ftex/backbones.hpp"
#include "ftex/image.hpp"
#include "ftex/latent.hpp"

namespace ftex {

// "<upper phrase>, <lower phrase>", an optional "and" may follow the comma.
std::pair<std::string, std::string> split_text(std::string_view prompt);
std::string build_prompt(std::string_view upper, std::string_view lower);

struct EditCondition {
  std::optional<std::string> text_upper;
  std::optional<std::string> text_lower;
  std::optional<Image> patch_upper;
  std::optional<Image> patch_lower;

  static constexpr std::size_t kMinPatchSide = 16;

  bool empty() const { return !text_upper && !text_lower && !patch_upper && !patch_lower; }
  bool has_text() const { return text_upper || text_lower; }
  bool has_patch() const { return patch_upper || patch_lower; }
  // Throws FormatError for an empty condition, blank text or a bad patch.
  void validate() const;
  // Both text sides from one comma-separated prompt.
  void set_prompt(std::string_view prompt);
};

struct ConditionEmbeddings {
  std::optional<Embedding> text_upper;
  std::optional<Embedding> text_lower;
  std::optional<Embedding> patch_upper;
  std::optional<Embedding> patch_lower;
};

// Channel mean of the extractor's last level.
Embedding texture_embedding(const Image& patch, const TextureExtractor& extractor);
ConditionEmbeddings embed_condition(const EditCondition& c, const BackboneSet& backbones);

enum class Branch { TypeUpper = 0, TypeLower = 1, TextureUpper = 2, TextureLower = 3 };
inline constexpr std::array<Branch, 4> kBranches{Branch::TypeUpper, Branch::TypeLower, Branch::TextureUpper,
                                                 Branch::TextureLower};
std::string_view branch_name(Branch b);

struct MapperShape {
  std::size_t text_dim = 32;
  std::size_t texture_dim = 16;
  std::size_t latent_dim = 32;
  std::size_t blocks = 4;
  double eps = 1e-5;
  double slope = 0.2;

  std::size_t condition_dim(Branch b) const {
    return (b == Branch::TypeUpper || b == Branch::TypeLower) ? text_dim : texture_dim;
  }
  bool operator==(const MapperShape&) const = default;
};

// gamma = gamma_w e + gamma_b, beta = beta_w e + beta_b; gamma_w/beta_w are D x K.
struct ModulationBlock {
  Matrix gamma_w, gamma_b, beta_w, beta_b;
  double eps = 1e-5;
};

// Per layer vector v: beta + gamma * (v - mean(v)) / (std(v) + eps).
Matrix modulate(const Matrix& w_part, const Embedding& e, const ModulationBlock& block);
ad::Var modulate(ad::Var w_part, ad::Var e, std::span<const ad::Var, 4> block, double eps);

class MapperWeights {
 public:
  MapperWeights() = default;
  MapperWeights(MapperShape shape, NamedTensors params);

  // Hidden blocks: Gaussian(0, 0.01) gamma affines, unit gamma bias, zero beta.
  // The last block of every branch starts fully at zero so initial offsets vanish.
  static MapperWeights init(const MapperShape& shape, std::uint64_t seed);

  const MapperShape& shape() const { return shape_; }
  const NamedTensors& params() const { return params_; }
  NamedTensors& params() { return params_; }

  // Index of the block's gamma_w in params(); gamma_b, beta_w, beta_b follow.
  std::size_t block_index(Branch b, std::size_t j) const { return (static_cast<std::size_t>(b) * shape_.blocks + j) * 4; }
  ModulationBlock block(Branch b, std::size_t j) const;

  bool operator==(const MapperWeights&) const = default;

 private:
  MapperShape shape_;
  NamedTensors params_;
};

// Offset produced by one branch stack for a layer group.
ad::Var branch_offset(ad::Var w_part, ad::Var e, std::span<const ad::Var> params, const MapperWeights& weights, Branch b);

struct OffsetVars {
  std::optional<ad::Var> medium;
  std::optional<ad::Var> fine;
};
// params: the mapper's tensors bound on the tape in order.
OffsetVars mapper_forward(std::span<const ad::Var> params, const MapperWeights& weights, ad::Var w_medium,
                          ad::Var w_fine, const ConditionEmbeddings& e);

Matrix type_offsets(const Matrix& w_m, const std::optional<Embedding>& upper, const std::optional<Embedding>& lower,
                    const MapperWeights& weights);
Matrix texture_offsets(const Matrix& w_f, const std::optional<Embedding>& upper, const std::optional<Embedding>& lower,
                       const MapperWeights& weights);

// Adds only the offsets that exist; untouched groups are copied bit-exactly.
LatentCode compose_latent(const LatentCode& w, const std::optional<Matrix>& delta_medium,
                          const std::optional<Matrix>& delta_fine);

struct EditResult {
  LatentCode latent;
  Image image;
  LatentOffset offset;
};

EditResult edit(const LatentCode& w, const ConditionEmbeddings& e, const MapperWeights& weights, const BackboneSet& backbones);
EditResult edit(const LatentCode& w, const EditCondition& c, const MapperWeights& weights, const BackboneSet& backbones);

// Mapper container: the mapper tensors, optional trailing extra tensors,
// and "key: value" metadata lines followed by free-form extra metadata.
void save_mapper(const MapperWeights& weights, const std::filesystem::path& path, std::string_view extra_meta = {},
                 const NamedTensors* extra_tensors = nullptr);
MapperWeights load_mapper(const std::filesystem::path& path, std::string* extra_meta = nullptr,
                          NamedTensors* extra_tensors = nullptr);

}  // namespace ftex
