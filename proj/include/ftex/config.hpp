#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "ftex/backbones.hpp"
#include "ftex/evaluation.hpp"
#include "ftex/latent.hpp"
#include "ftex/losses.hpp"
#include "ftex/recovery.hpp"
#include "ftex/service.hpp"
#include "ftex/training.hpp"

namespace ftex {

inline constexpr const char* kConfigEnv = "FASHIONTEX_CONFIG";

// Whole-run configuration. Absent keys keep module defaults, unknown keys are
// rejected, and dump() parses back to an equal Config.
struct Config {
  BackboneConfig backbones;
  GroupBounds grouping = GroupBounds::scaled(BackboneConfig{}.latent_layers);
  LossWeights loss_weights;
  TrainConfig training;  // training.weights mirrors loss_weights
  RecoveryConfig recovery;
  ServiceConfig service;
  EvalConfig evaluation;

  void validate() const;
  std::string dump() const;
  ServiceContext service_context() const;

  // `origin` names the source in error messages.
  static Config parse(std::string_view text, std::string_view origin = "config");
  static Config load(const std::filesystem::path& path);

  bool operator==(const Config&) const = default;
};

// Explicit path, else $FASHIONTEX_CONFIG, else none.
std::optional<std::filesystem::path> resolve_config_path(const std::string& flag);

// Config from resolve_config_path, or defaults when there is none.
Config load_config(const std::string& flag);

}  // namespace ftex
