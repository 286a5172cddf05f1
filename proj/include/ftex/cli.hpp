#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "ftex/config.hpp"

namespace ftex {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

// Untrained weights (initial mapper) when `checkpoint` is empty.
MapperWeights load_weights(const std::string& checkpoint, const Config& cfg, const BackboneSet& backbones);

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ftex
