#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ftex/backbones.hpp"
#include "ftex/mapper.hpp"
#include "ftex/training.hpp"

namespace ftex {

struct EvalConfig {
  std::string dataset;     // empty: use training.dataset
  std::string checkpoint;  // mapper checkpoint; empty: untrained mapper
  std::uint64_t seed = 0;
  // Share of image pixels a category needs to count as present.
  double category_threshold = 0.005;
  std::size_t max_samples = 0;  // 0: whole test split

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

// Unbiased covariance plus a 1e-6 ridge.
inline constexpr double kFidRidge = 1e-6;

// Frechet distance between Gaussian fits of two feature sets.
double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// The four categories scored by type accuracy.
inline constexpr std::array<ClothCategory, 4> kEvalCategories = {ClothCategory::Skirt, ClothCategory::Pants,
                                                                 ClothCategory::Dress, ClothCategory::Rompers};

struct CategoryScore {
  ClothCategory category = ClothCategory::None;
  std::size_t successes = 0;
  std::size_t attempts = 0;
  double accuracy() const { return attempts == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(attempts); }
  bool operator==(const CategoryScore&) const = default;
};

struct TypeEdit {
  Image image;
  ClothCategory target = ClothCategory::None;
};

struct AccuracyResult {
  double overall = 0.0;
  std::size_t successes = 0;
  std::size_t attempts = 0;
  std::array<CategoryScore, 4> per_category;
  std::vector<bool> hits;  // per edit, input order
};

// Whether the parse shows `target` on at least threshold * H * W pixels.
bool category_present(const ParsingMask& parse, ClothCategory target, double threshold);

AccuracyResult type_accuracy(const std::vector<TypeEdit>& edits, const HumanParser& parser, double threshold = 0.005);

double lpips_mean(const std::vector<std::pair<Image, Image>>& pairs, const PerceptualDistance& perceptual);

struct EvalSample {
  std::string path;
  std::string prompt;
  ClothCategory target = ClothCategory::None;
  bool hit = false;
  double lpips = 0.0;
  bool operator==(const EvalSample&) const = default;
};

struct EvalReport {
  double fid = 0.0;
  double accuracy = 0.0;
  double lpips_mean = 0.0;
  std::size_t samples = 0;
  std::size_t scored = 0;  // samples whose target is one of the four categories
  std::size_t successes = 0;
  std::array<CategoryScore, 4> per_category;
  std::array<double, 4> per_category_fid{};  // negative: too few samples
  std::vector<EvalSample> per_sample;

  std::string to_text() const;
  std::string to_csv() const;
  bool operator==(const EvalReport&) const = default;
};

// Edits every test sample with a seeded condition and scores the results.
EvalReport evaluate(const MapperWeights& weights, const Dataset& data, const BackboneSet& backbones, const TrainConfig& train,
                    const EvalConfig& cfg);

}  // namespace ftex
