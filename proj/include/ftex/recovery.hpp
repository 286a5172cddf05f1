#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "ftex/autodiff.hpp"
#include "ftex/backbones.hpp"
#include "ftex/latent.hpp"

namespace ftex {

struct RecoveryConfig {
  std::size_t steps = 350;
  double learning_rate = 3e-4;
  std::size_t log_every = 25;
  // Parse of the candidate output is refreshed every parse_every steps.
  std::size_t parse_every = 25;

  void validate() const;
  bool operator==(const RecoveryConfig&) const = default;
};

// Cloth pixels of I_e (by I_e's own parse) over the remaining pixels of I_i.
Image fuse_guided(const Image& i_e, const Image& i_i, const ParsingMask& parse_e);
Image fuse_guided(const Image& i_e, const Image& i_i, const HumanParser& parser);

// perceptual(guided, I_o) + || bg(I_o) * (I_i - I_o) ||_2
ad::Var recovery_objective(ad::Var guided, ad::Var i_o, ad::Var i_i, const ParsingMask& parse_o,
                           const PerceptualDistance& perceptual);
double recovery_objective(const Image& guided, const Image& i_o, const Image& i_i, const HumanParser& parser,
                          const PerceptualDistance& perceptual);

struct RecoveryResult {
  Image image;
  NamedTensors theta;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::vector<double> trace;  // objective before each step
};

using RecoveryLog = std::function<void(std::size_t step, double objective)>;

// Fine-tunes a private copy of the generator parameters; the shared set is
// never touched.
RecoveryResult recover(const LatentCode& w_edit, const Image& i_i, const Image& i_e, const BackboneSet& backbones,
                       const RecoveryConfig& cfg, const RecoveryLog& log = {});

}  // namespace ftex
