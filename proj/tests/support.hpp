#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "ftex/backbones.hpp"
#include "ftex/image.hpp"
#include "ftex/rng.hpp"
#include "ftex/training.hpp"

namespace ftex::test {

inline const BackboneSet& toy_backbones() {
  static const BackboneSet bb = load_backbones(BackboneConfig{});
  return bb;
}

inline const GroupBounds& toy_bounds() {
  static const GroupBounds g = GroupBounds::scaled(BackboneConfig{}.latent_layers);
  return g;
}

inline Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (float& v : img.data()) v = static_cast<float>(rng.uniform());
  return img;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (float& v : m.data) v = static_cast<float>(rng.normal(0.0, sd));
  return m;
}

inline LatentCode random_latent(std::uint64_t seed, double sd = 0.02) {
  const BackboneConfig cfg;
  return LatentCode(random_matrix(cfg.latent_layers, cfg.latent_dim, seed, sd), toy_bounds());
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ftex_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Synthetic dataset kept in the build tree across test processes, keyed by
// the backbone hash; inversions are cached next to it.
inline std::filesystem::path cached_synth_dataset(std::size_t n, std::uint64_t seed) {
  const auto& bb = toy_backbones();
  const auto root = std::filesystem::path(FTEX_TEST_CACHE) /
                    ("synth_" + std::to_string(n) + "_" + std::to_string(seed) + "_" + bb.config_hash);
  if (!std::filesystem::exists(root / kManifestName)) {
    const auto tmp = root.string() + ".tmp" + std::to_string(::getpid());
    std::filesystem::remove_all(tmp);
    synth_dataset(tmp, n, seed, bb, AttributeVocabulary{});
    std::error_code ec;
    std::filesystem::rename(tmp, root, ec);
    if (ec) std::filesystem::remove_all(tmp);
  }
  return root;
}

// Small synthetic dataset shared by the tests of one binary.
inline const Dataset& toy_dataset() {
  static const Dataset data =
      ingest_dataset(cached_synth_dataset(12, 11), IngestOptions{}, toy_backbones(), toy_bounds(), AttributeVocabulary{});
  return data;
}

// Larger set whose test split holds two samples, enough for FID.
inline const Dataset& toy_eval_dataset() {
  static const Dataset data =
      ingest_dataset(cached_synth_dataset(24, 5), IngestOptions{}, toy_backbones(), toy_bounds(), AttributeVocabulary{});
  return data;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

}  // namespace ftex::test
