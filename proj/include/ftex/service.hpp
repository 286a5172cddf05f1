#pragma once

#include <cstddef>
#include <memory>
#include <string>

#include "ftex/backbones.hpp"
#include "ftex/latent.hpp"
#include "ftex/mapper.hpp"
#include "ftex/recovery.hpp"
#include "ftex/training.hpp"

namespace ftex {

struct ServiceConfig {
  std::string listen = "127.0.0.1:8080";  // host:port, port 0 picks a free one
  std::size_t max_upload_bytes = 4u << 20;
  std::size_t recovery_parallelism = 2;  // concurrent recoveries across sessions
  std::string session_dir;               // empty: sessions live in memory only
  std::string checkpoint;                // mapper checkpoint; empty: untrained mapper
  std::size_t threads = 8;

  void validate() const;
  bool operator==(const ServiceConfig&) const = default;
};

// Splits "host:port"; throws ConfigError on a malformed address.
std::pair<std::string, int> parse_listen(const std::string& listen);

struct ServiceContext {
  ServiceConfig service;
  RecoveryConfig recovery;
  AttributeVocabulary vocabulary;
  GroupBounds bounds;
};

// Session HTTP API. Backbones may arrive after the server starts; until then
// /healthz reports ready=false and session endpoints answer 503.
class Service {
 public:
  explicit Service(ServiceContext ctx);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void set_backbones(BackboneSet backbones, MapperWeights weights);

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

  std::size_t session_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ftex
