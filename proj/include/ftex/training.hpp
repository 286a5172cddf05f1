#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ftex/backbones.hpp"
#include "ftex/losses.hpp"
#include "ftex/mapper.hpp"
#include "ftex/rng.hpp"

namespace ftex {

struct AttributeVocabulary {
  std::vector<std::string> upper{"sleeveless top",      "tank top",           "short sleeve shirt", "long sleeve shirt",
                                 "polo shirt",          "short sleeve sweater", "long sleeve sweater", "denim jacket",
                                 "camisole dress",      "short rompers"};
  std::vector<std::string> lower{"short skirt", "long skirt",  "pleated skirt", "denim skirt", "short pants",
                                 "long pants",  "jogger pants", "denim pants",  "leggings",    "shorts"};

  bool has_upper(std::string_view a) const;
  bool has_lower(std::string_view a) const;
  void validate() const;
  bool operator==(const AttributeVocabulary&) const = default;
};

inline constexpr const char* kManifestName = "manifest.tsv";
inline constexpr const char* kCacheDirName = ".ftex_cache";

struct DatasetRecord {
  std::string path;  // relative to the dataset root
  std::string upper_tag;
  std::string lower_tag;
  std::string latent_path;  // cached inversion, empty if none

  bool operator==(const DatasetRecord&) const = default;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> test;
  std::vector<std::string> dropped;  // "path: reason"

  bool operator==(const DatasetIndex&) const = default;
};

// Loaded, aligned and inverted record plus values reused every step.
struct Sample {
  DatasetRecord record;
  Image image;           // aligned input
  LatentCode latent;     // inversion of image
  Image reconstruction;  // generator(latent)
  std::shared_ptr<const std::vector<double>> reconstruction_values;  // same, before float rounding
  ParsingMask parse;     // parse of reconstruction
  Embedding e_image;     // joint embedding of reconstruction
  Embedding e_source;    // joint embedding of the source tag prompt
};

struct Dataset {
  DatasetIndex index;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Train share of the split, 11265 of 12401 records.
std::size_t train_split_size(std::size_t n);

struct IngestOptions {
  bool align = true;
  std::uint64_t seed = 0;
  bool use_cache = true;
};

using LogSink = std::function<void(const std::string&)>;

Dataset ingest_dataset(const std::filesystem::path& root, const IngestOptions& opt, const BackboneSet& backbones,
                       const GroupBounds& bounds, const AttributeVocabulary& vocab, const LogSink& log = {});

// Shifts the image horizontally so the cloth centroid lands on the center
// column; returns nullopt when there is no cloth or the shift exceeds W/4.
std::optional<Image> align_image(const Image& img, const HumanParser& parser, int* shift = nullptr);

// Latent scale of synthetic samples.
inline constexpr double kSynthLatentStd = 0.01;

// Adam steps spent fitting each synthetic garment to its tags.
inline constexpr std::size_t kSynthFitSteps = 60;

// Writes n generator samples and a manifest. Tags are drawn uniformly and the
// medium latent rows are fitted so each image's joint embedding matches them.
void synth_dataset(const std::filesystem::path& root, std::size_t n, std::uint64_t seed, const BackboneSet& backbones,
                   const AttributeVocabulary& vocab);

struct SampledCondition {
  std::string upper_attr;
  std::string lower_attr;
  EditCondition condition;
  std::size_t donor_upper = 0;
  std::size_t donor_lower = 0;
  CropWindow window_upper;
  CropWindow window_lower;
};

SampledCondition sample_condition(const std::vector<Sample>& donors, const AttributeVocabulary& vocab, std::size_t crop_size,
                                  Rng& rng, std::size_t retry_budget = 32);

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double learning_rate = 5e-4;
  LossWeights weights;
  LossOptions loss;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 50;
  std::size_t mapper_blocks = 4;
  double mapper_eps = 1e-5;
  double mapper_slope = 0.2;
  std::string dataset;     // dataset root
  std::string output_dir = "runs/toy";
  bool align = true;
  std::size_t retry_budget = 32;
  AttributeVocabulary vocabulary;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

MapperShape mapper_shape(const TrainConfig& cfg, const BackboneSet& backbones);

struct TrainState {
  MapperWeights weights;
  NamedTensors adam_m;
  NamedTensors adam_v;
  std::size_t step = 0;  // completed steps

  bool operator==(const TrainState&) const = default;
};

TrainState init_training(const TrainConfig& cfg, const BackboneSet& backbones);

// One training item: source sample and its sampled condition.
struct TrainItem {
  const Sample* source = nullptr;
  SampledCondition condition;
  ConditionEmbeddings embeddings;
  Embedding e_target;
  std::uint64_t crop_seed = 0;
};

// Batch drawn for a given step; a pure function of (seed, step).
std::vector<TrainItem> draw_batch(const Dataset& data, const TrainConfig& cfg, const BackboneSet& backbones, std::size_t step);

struct BatchResult {
  LossReport report;        // batch mean
  // Gradient of the batch-mean total w.r.t. each mapper tensor, in order.
  std::vector<std::vector<double>> gradients;
};

// Loss and gradients for a batch at the given weights. Backbones stay frozen.
BatchResult evaluate_batch(const std::vector<TrainItem>& batch, const MapperWeights& weights, const BackboneSet& backbones,
                           const TrainConfig& cfg);

// Total loss of a single item at the given weights.
double item_loss(const TrainItem& item, const MapperWeights& weights, const BackboneSet& backbones, const TrainConfig& cfg);

LossReport train_step(TrainState& state, const Dataset& data, const BackboneSet& backbones, const TrainConfig& cfg);

using StepSink = std::function<void(std::size_t step, const LossReport& report)>;

// Runs until state.step == until_step.
void train(TrainState& state, const Dataset& data, const BackboneSet& backbones, const TrainConfig& cfg,
           std::size_t until_step, const StepSink& on_step = {});

void save_checkpoint(const TrainState& state, const std::string& config_text, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path, std::string* config_text = nullptr);

}  // namespace ftex
