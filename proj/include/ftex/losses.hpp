#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftex/autodiff.hpp"
#include "ftex/backbones.hpp"
#include "ftex/latent.hpp"
#include "ftex/rng.hpp"

namespace ftex {

struct LossWeights {
  double type = 1.0;
  double txr = 0.02;
  double id = 0.1;
  double skin = 1.0;
  double bg = 1.0;
  double norm = 0.8;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossOptions {
  bool normalize_gram = true;
  std::size_t crop_size = 16;
  bool operator==(const LossOptions&) const = default;
};

struct LossTerms {
  double type = 0, txr = 0, id = 0, skin = 0, bg = 0, norm = 0;
  bool operator==(const LossTerms&) const = default;
};

struct LossReport {
  LossTerms raw;
  LossTerms weighted;
  double total = 0;

  static LossReport make(const LossTerms& raw, const LossWeights& w);
  // "step=<n> type=<f> txr=<f> id=<f> skin=<f> bg=<f> norm=<f> total=<f>"
  std::string log_line(std::size_t step) const;
  static LossReport parse_log_line(const std::string& line, std::size_t* step = nullptr);
  bool operator==(const LossReport&) const = default;
};

double cosine_distance(const Embedding& a, const Embedding& b);

// 1 - cos(E_Ie, E_Ii - E_ti + E_t).
double type_loss(const Embedding& e_ie, const Embedding& e_ii, const Embedding& e_ti, const Embedding& e_t);
ad::Var type_loss(ad::Var e_ie, const Embedding& e_ii, const Embedding& e_ti, const Embedding& e_t);

// F is C x N row-major; returns C x C row-major, scaled by 1/(C N) when normalized.
std::vector<double> gram(const std::vector<double>& f, std::size_t channels, std::size_t positions, bool normalized = true);

struct CropWindow {
  std::size_t y0 = 0, x0 = 0, size = 0;
  bool operator==(const CropWindow&) const = default;
};
// Every size x size window lying entirely inside the mask, row-major order.
std::vector<CropWindow> valid_crops(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, std::size_t size);
// Uniform over valid_crops; throws ShapeError when there is none.
CropWindow sample_crop(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, std::size_t size, Rng& rng);

// Sum over pyramid levels of the L1 distance between Gram matrices.
ad::Var gram_distance(const std::array<ad::Var, 4>& a, const std::array<ad::Var, 4>& b, bool normalized);
ad::Var texture_loss(ad::Var i_e, const ParsingMask& parse_e, Region region, const Image& patch,
                     const TextureExtractor& extractor, Rng& rng, const LossOptions& opt);
double texture_loss(const Image& i_e, Region region, const Image& patch, const HumanParser& parser,
                    const TextureExtractor& extractor, Rng& rng, const LossOptions& opt);

ad::Var identity_loss(ad::Var i_e, ad::Var i_i, const IdentityEmbedder& embedder);
double identity_loss(const Image& i_e, const Image& i_i, const IdentityEmbedder& embedder);

// Each image masked by its own non-cloth region; Euclidean norm of the difference.
ad::Var background_loss(ad::Var i_e, const ParsingMask& parse_e, ad::Var i_i, const ParsingMask& parse_i);
double background_loss(const Image& i_e, const Image& i_i, const HumanParser& parser);

// L1 distance between mean LAB colors over each image's skin region.
ad::Var skin_loss(ad::Var i_e, const ParsingMask& parse_e, ad::Var i_i, const ParsingMask& parse_i);
double skin_loss(const Image& i_e, const Image& i_i, const HumanParser& parser);

ad::Var norm_loss(ad::Tape& tape, const std::optional<ad::Var>& delta_medium, const std::optional<ad::Var>& delta_fine);
double norm_loss(const LatentOffset& off);

// Weighted sum of whichever terms are present.
struct LossVars {
  std::optional<ad::Var> type, txr, id, skin, bg, norm;
};
ad::Var total_loss(ad::Tape& tape, const LossVars& terms, const LossWeights& w);
LossTerms values_of(const LossVars& terms);

}  // namespace ftex
