#include "ftex/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ftex/error.hpp"

namespace ftex {

namespace {

// One mapping of the document; remembers which keys were read.
class Section {
 public:
  Section(YAML::Node node, std::string path, std::string origin)
      : node_(std::move(node)), path_(std::move(path)), origin_(std::move(origin)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail("", "expected a mapping");
  }

  template <class T>
  void get(const char* key, T& out) {
    const YAML::Node v = take(key);
    if (!v) return;
    if (!v.IsScalar()) fail(key, "expected a scalar");
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      fail(key, "cannot read '" + v.Scalar() + "'");
    }
  }

  void get(const char* key, std::vector<std::string>& out) {
    const YAML::Node v = take(key);
    if (!v) return;
    if (!v.IsSequence()) fail(key, "expected a list of strings");
    out.clear();
    for (const auto& item : v) {
      if (!item.IsScalar()) fail(key, "expected a list of strings");
      out.push_back(item.Scalar());
    }
  }

  void get(const char* key, LayerRange& out) {
    const YAML::Node v = take(key);
    if (!v) return;
    if (!v.IsSequence() || v.size() != 2) fail(key, "expected [begin, end]");
    try {
      out.begin = v[0].as<std::size_t>();
      out.end = v[1].as<std::size_t>();
    } catch (const YAML::Exception&) {
      fail(key, "expected [begin, end] of non-negative integers");
    }
  }

  void get(const char* key, BackboneSource& out) {
    std::string text;
    const bool present = has(key);
    get(key, text);
    if (!present) return;
    try {
      out = BackboneSource::parse(text);
    } catch (const Error& e) {
      fail(key, e.what());
    }
  }

  bool has(const char* key) const {
    const YAML::Node& n = node_;
    return n && n.IsMap() && n[key] && !n[key].IsNull();
  }

  Section child(const char* key) { return Section(take(key), path_ + key + ".", origin_); }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const std::string k = kv.first.as<std::string>();
      if (!seen_.count(k)) throw ConfigError(origin_ + ": unknown key '" + path_ + k + "'");
    }
  }

 private:
  YAML::Node take(const char* key) {
    seen_.insert(key);
    if (!node_ || !node_.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
    const YAML::Node& n = node_;
    const YAML::Node v = n[key];
    if (!v || v.IsNull()) return YAML::Node(YAML::NodeType::Undefined);
    return v;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(origin_ + ": " + path_ + key + ": " + msg);
  }

  YAML::Node node_;
  std::string path_;
  std::string origin_;
  std::set<std::string> seen_;
};

void emit_range(YAML::Emitter& e, const char* key, const LayerRange& r) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq << r.begin << r.end << YAML::EndSeq;
}

void emit_list(YAML::Emitter& e, const char* key, const std::vector<std::string>& xs) {
  e << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& x : xs) e << YAML::DoubleQuoted << x;
  e << YAML::EndSeq;
}

template <class T>
void kv(YAML::Emitter& e, const char* key, const T& v) {
  e << YAML::Key << key << YAML::Value << v;
}

// Shortest text that reads back to the same double.
void kv(YAML::Emitter& e, const char* key, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  e << YAML::Key << key << YAML::Value << std::string(buf, res.ptr);
}

void kv(YAML::Emitter& e, const char* key, const std::string& v) {
  e << YAML::Key << key << YAML::Value << YAML::DoubleQuoted << v;
}

}  // namespace

Config Config::parse(std::string_view text, std::string_view origin_view) {
  const std::string origin(origin_view);
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  Config c;
  Section top(root, "", origin);

  Section b = top.child("backbones");
  auto& bc = c.backbones;
  b.get("seed", bc.seed);
  b.get("image_size", bc.image_size);
  b.get("latent_layers", bc.latent_layers);
  b.get("latent_dim", bc.latent_dim);
  b.get("text_dim", bc.text_dim);
  b.get("image_dim", bc.image_dim);
  b.get("identity_dim", bc.identity_dim);
  b.get("perceptual_dim", bc.perceptual_dim);
  b.get("inverter_steps", bc.inverter_steps);
  b.get("inverter_lr", bc.inverter_lr);
  b.get("generator", bc.generator);
  b.get("inverter", bc.inverter);
  b.get("joint_embedder", bc.joint_embedder);
  b.get("texture_extractor", bc.texture_extractor);
  b.get("identity_embedder", bc.identity_embedder);
  b.get("parser", bc.parser);
  b.get("perceptual", bc.perceptual);
  b.finish();

  c.grouping = GroupBounds::scaled(bc.latent_layers);
  if (top.has("grouping")) {
    Section g = top.child("grouping");
    g.get("coarse", c.grouping[Group::Coarse]);
    g.get("medium", c.grouping[Group::Medium]);
    g.get("fine", c.grouping[Group::Fine]);
    g.finish();
  } else {
    top.child("grouping");
  }

  Section lw = top.child("loss_weights");
  lw.get("type", c.loss_weights.type);
  lw.get("txr", c.loss_weights.txr);
  lw.get("id", c.loss_weights.id);
  lw.get("skin", c.loss_weights.skin);
  lw.get("bg", c.loss_weights.bg);
  lw.get("norm", c.loss_weights.norm);
  lw.finish();

  Section t = top.child("training");
  auto& tc = c.training;
  t.get("steps", tc.steps);
  t.get("batch_size", tc.batch_size);
  t.get("learning_rate", tc.learning_rate);
  t.get("seed", tc.seed);
  t.get("checkpoint_every", tc.checkpoint_every);
  t.get("mapper_blocks", tc.mapper_blocks);
  t.get("mapper_eps", tc.mapper_eps);
  t.get("mapper_slope", tc.mapper_slope);
  t.get("dataset", tc.dataset);
  t.get("output_dir", tc.output_dir);
  t.get("align", tc.align);
  t.get("retry_budget", tc.retry_budget);
  t.get("crop_size", tc.loss.crop_size);
  t.get("normalize_gram", tc.loss.normalize_gram);
  Section v = t.child("vocabulary");
  v.get("upper", tc.vocabulary.upper);
  v.get("lower", tc.vocabulary.lower);
  v.finish();
  t.finish();
  tc.weights = c.loss_weights;

  Section r = top.child("recovery");
  r.get("steps", c.recovery.steps);
  r.get("learning_rate", c.recovery.learning_rate);
  r.get("log_every", c.recovery.log_every);
  r.get("parse_every", c.recovery.parse_every);
  r.finish();

  Section s = top.child("service");
  s.get("listen", c.service.listen);
  s.get("max_upload_bytes", c.service.max_upload_bytes);
  s.get("recovery_parallelism", c.service.recovery_parallelism);
  s.get("session_dir", c.service.session_dir);
  s.get("checkpoint", c.service.checkpoint);
  s.get("threads", c.service.threads);
  s.finish();

  Section ev = top.child("evaluation");
  ev.get("dataset", c.evaluation.dataset);
  ev.get("checkpoint", c.evaluation.checkpoint);
  ev.get("seed", c.evaluation.seed);
  ev.get("category_threshold", c.evaluation.category_threshold);
  ev.get("max_samples", c.evaluation.max_samples);
  ev.finish();

  top.finish();
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

void Config::validate() const {
  if (backbones.image_size < 16) throw ConfigError("backbones image_size must be at least 16");
  if (backbones.latent_layers < 3) throw ConfigError("backbones latent_layers must be at least 3");
  if (backbones.latent_dim == 0) throw ConfigError("backbones latent_dim must be positive");
  grouping.validate(backbones.latent_layers);
  if (grouping[Group::Medium].size() == 0 || grouping[Group::Fine].size() == 0) {
    throw ConfigError("grouping medium and fine ranges must be non-empty");
  }
  loss_weights.validate();
  if (!(training.weights == loss_weights)) throw ConfigError("training weights differ from loss_weights");
  training.validate();
  recovery.validate();
  service.validate();
  evaluation.validate();
}

std::string Config::dump() const {
  YAML::Emitter e;
  e << YAML::BeginMap;

  e << YAML::Key << "backbones" << YAML::Value << YAML::BeginMap;
  kv(e, "seed", backbones.seed);
  kv(e, "image_size", backbones.image_size);
  kv(e, "latent_layers", backbones.latent_layers);
  kv(e, "latent_dim", backbones.latent_dim);
  kv(e, "text_dim", backbones.text_dim);
  kv(e, "image_dim", backbones.image_dim);
  kv(e, "identity_dim", backbones.identity_dim);
  kv(e, "perceptual_dim", backbones.perceptual_dim);
  kv(e, "inverter_steps", backbones.inverter_steps);
  kv(e, "inverter_lr", backbones.inverter_lr);
  kv(e, "generator", backbones.generator.to_string());
  kv(e, "inverter", backbones.inverter.to_string());
  kv(e, "joint_embedder", backbones.joint_embedder.to_string());
  kv(e, "texture_extractor", backbones.texture_extractor.to_string());
  kv(e, "identity_embedder", backbones.identity_embedder.to_string());
  kv(e, "parser", backbones.parser.to_string());
  kv(e, "perceptual", backbones.perceptual.to_string());
  e << YAML::EndMap;

  e << YAML::Key << "grouping" << YAML::Value << YAML::BeginMap;
  emit_range(e, "coarse", grouping[Group::Coarse]);
  emit_range(e, "medium", grouping[Group::Medium]);
  emit_range(e, "fine", grouping[Group::Fine]);
  e << YAML::EndMap;

  e << YAML::Key << "loss_weights" << YAML::Value << YAML::BeginMap;
  kv(e, "type", loss_weights.type);
  kv(e, "txr", loss_weights.txr);
  kv(e, "id", loss_weights.id);
  kv(e, "skin", loss_weights.skin);
  kv(e, "bg", loss_weights.bg);
  kv(e, "norm", loss_weights.norm);
  e << YAML::EndMap;

  e << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
  kv(e, "steps", training.steps);
  kv(e, "batch_size", training.batch_size);
  kv(e, "learning_rate", training.learning_rate);
  kv(e, "seed", training.seed);
  kv(e, "checkpoint_every", training.checkpoint_every);
  kv(e, "mapper_blocks", training.mapper_blocks);
  kv(e, "mapper_eps", training.mapper_eps);
  kv(e, "mapper_slope", training.mapper_slope);
  kv(e, "dataset", training.dataset);
  kv(e, "output_dir", training.output_dir);
  kv(e, "align", training.align);
  kv(e, "retry_budget", training.retry_budget);
  kv(e, "crop_size", training.loss.crop_size);
  kv(e, "normalize_gram", training.loss.normalize_gram);
  e << YAML::Key << "vocabulary" << YAML::Value << YAML::BeginMap;
  emit_list(e, "upper", training.vocabulary.upper);
  emit_list(e, "lower", training.vocabulary.lower);
  e << YAML::EndMap << YAML::EndMap;

  e << YAML::Key << "recovery" << YAML::Value << YAML::BeginMap;
  kv(e, "steps", recovery.steps);
  kv(e, "learning_rate", recovery.learning_rate);
  kv(e, "log_every", recovery.log_every);
  kv(e, "parse_every", recovery.parse_every);
  e << YAML::EndMap;

  e << YAML::Key << "service" << YAML::Value << YAML::BeginMap;
  kv(e, "listen", service.listen);
  kv(e, "max_upload_bytes", service.max_upload_bytes);
  kv(e, "recovery_parallelism", service.recovery_parallelism);
  kv(e, "session_dir", service.session_dir);
  kv(e, "checkpoint", service.checkpoint);
  kv(e, "threads", service.threads);
  e << YAML::EndMap;

  e << YAML::Key << "evaluation" << YAML::Value << YAML::BeginMap;
  kv(e, "dataset", evaluation.dataset);
  kv(e, "checkpoint", evaluation.checkpoint);
  kv(e, "seed", evaluation.seed);
  kv(e, "category_threshold", evaluation.category_threshold);
  kv(e, "max_samples", evaluation.max_samples);
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

ServiceContext Config::service_context() const { return ServiceContext{service, recovery, training.vocabulary, grouping}; }

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::filesystem::path> resolve_config_path(const std::string& flag) {
  if (!flag.empty()) return std::filesystem::path(flag);
  if (const char* env = std::getenv(kConfigEnv); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

Config load_config(const std::string& flag) {
  const auto path = resolve_config_path(flag);
  return path ? Config::load(*path) : Config{};
}

}  // namespace ftex
