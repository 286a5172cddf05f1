#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string_view>

#include "ftex/tensor.hpp"

namespace ftex {

enum class Group { Coarse = 0, Medium = 1, Fine = 2 };

std::string_view group_name(Group g);
Group parse_group(std::string_view name);

// Half-open layer-index range.
struct LayerRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const LayerRange&) const = default;
};

// Coarse/medium/fine partition of the W+ layers.
struct GroupBounds {
  std::array<LayerRange, 3> ranges;

  const LayerRange& operator[](Group g) const { return ranges[static_cast<std::size_t>(g)]; }
  LayerRange& operator[](Group g) { return ranges[static_cast<std::size_t>(g)]; }

  // 18-layer layout: [0,4) [4,8) [8,18).
  static GroupBounds standard();
  // standard() scaled to `layers`; equals standard() for 18.
  static GroupBounds scaled(std::size_t layers);

  // Throws ShapeError unless the ranges partition [0, layers) in order.
  void validate(std::size_t layers) const;

  bool operator==(const GroupBounds&) const = default;
};

// W+ latent code: L x D style vectors plus their grouping.
class LatentCode {
 public:
  LatentCode() = default;
  LatentCode(Matrix layers, GroupBounds bounds);

  const Matrix& layers() const { return layers_; }
  const GroupBounds& bounds() const { return bounds_; }
  std::size_t num_layers() const { return layers_.rows; }
  std::size_t dim() const { return layers_.cols; }

  Matrix group(Group g) const;

  bool operator==(const LatentCode&) const = default;

 private:
  Matrix layers_;
  GroupBounds bounds_;
};

// Offsets for the medium and fine groups; the coarse group is never edited.
struct LatentOffset {
  Matrix delta_medium;
  Matrix delta_fine;

  static LatentOffset zeros(const LatentCode& w);
  LatentOffset operator+(const LatentOffset& o) const;
  LatentOffset operator-() const;
};

LatentCode split_latent(Matrix w, const GroupBounds& bounds);
LatentCode apply_offsets(const LatentCode& w, const LatentOffset& off);
LatentCode style_mix(const LatentCode& source, const LatentCode& reference, Group group);

// Binary layout: "FTEXWP01", u32 L, u32 D (little-endian), L*D float32 LE.
void save_latent(const LatentCode& w, const std::filesystem::path& path);
// Bounds default to GroupBounds::scaled(L) when not given.
LatentCode load_latent(const std::filesystem::path& path, std::optional<GroupBounds> bounds = std::nullopt);

}  // namespace ftex
