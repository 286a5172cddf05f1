#include "ftex/service.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "ftex/error.hpp"
#include "ftex/image.hpp"

namespace ftex {

using json = nlohmann::json;
namespace fs = std::filesystem;

void ServiceConfig::validate() const {
  parse_listen(listen);
  if (max_upload_bytes == 0) throw ConfigError("service max_upload_bytes must be positive");
  if (recovery_parallelism == 0) throw ConfigError("service recovery_parallelism must be positive");
  if (threads == 0) throw ConfigError("service threads must be positive");
}

std::pair<std::string, int> parse_listen(const std::string& listen) {
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == listen.size()) {
    throw ConfigError("service listen must read host:port, got '" + listen + "'");
  }
  const std::string port_text = listen.substr(colon + 1);
  int port = 0;
  for (char c : port_text) {
    if (c < '0' || c > '9') throw ConfigError("service listen port is not a number: '" + listen + "'");
    port = port * 10 + (c - '0');
    if (port > 65535) throw ConfigError("service listen port out of range: '" + listen + "'");
  }
  return {listen.substr(0, colon), port};
}

namespace {

enum class RecoveryStatus { None, Queued, Running, Done, Failed };

const char* status_name(RecoveryStatus s) {
  switch (s) {
    case RecoveryStatus::None: return "none";
    case RecoveryStatus::Queued: return "queued";
    case RecoveryStatus::Running: return "running";
    case RecoveryStatus::Done: return "done";
    case RecoveryStatus::Failed: return "failed";
  }
  return "none";
}

struct Entry {
  EditCondition condition;
  std::optional<std::size_t> base;
  LatentCode latent;
  Image image;
  RecoveryStatus status = RecoveryStatus::None;
  std::size_t step = 0;
  Image recovered;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::string error;
};

struct Session {
  std::string id;
  std::string created_at;
  Image original;
  LatentCode latent;
  Image preview;
  std::vector<std::shared_ptr<Entry>> history;
  std::mutex mu;
  std::mutex recover_mu;  // one active recovery per session
};

// Thrown by handlers; carries the HTTP status.
struct HttpError : Error {
  int status;
  HttpError(int s, const std::string& m) : Error(m), status(s) {}
};

class Semaphore {
 public:
  explicit Semaphore(std::size_t n) : n_(n) {}
  void acquire() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return n_ > 0; });
    --n_;
  }
  void release() {
    {
      std::lock_guard lk(mu_);
      ++n_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t n_;
};

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string png64(const Image& img) { return base64_encode(encode_png(img)); }

Image image_from_b64(const std::string& text, const char* field) {
  try {
    return decode_png(base64_decode(text));
  } catch (const Error& e) {
    throw HttpError(422, std::string(field) + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary);
    o << text;
    if (!o) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, p);
}

json condition_json(const EditCondition& c) {
  json j = json::object();
  if (c.text_upper) j["text_upper"] = *c.text_upper;
  if (c.text_lower) j["text_lower"] = *c.text_lower;
  j["has_patch_upper"] = c.patch_upper.has_value();
  j["has_patch_lower"] = c.patch_lower.has_value();
  return j;
}

}  // namespace

struct Service::Impl {
  ServiceContext ctx;
  httplib::Server server;
  std::thread thread;

  mutable std::mutex mu;  // sessions map and backbones
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::shared_ptr<const BackboneSet> backbones;
  std::shared_ptr<const MapperWeights> weights;
  Semaphore recover_slots;
  std::mt19937_64 id_rng{std::random_device{}()};

  explicit Impl(ServiceContext c) : ctx(std::move(c)), recover_slots(ctx.service.recovery_parallelism) {}

  std::pair<std::shared_ptr<const BackboneSet>, std::shared_ptr<const MapperWeights>> loaded() const {
    std::lock_guard lk(mu);
    if (!backbones) throw HttpError(503, "backbones are not loaded yet");
    return {backbones, weights};
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lk(mu);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw HttpError(404, "unknown session '" + id + "'");
    return it->second;
  }

  std::string new_id() {
    std::lock_guard lk(mu);
    for (;;) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id_rng()));
      if (!sessions.count(buf) && (ctx.service.session_dir.empty() || !fs::exists(fs::path(ctx.service.session_dir) / buf))) {
        return buf;
      }
    }
  }

  fs::path session_path(const Session& s) const { return fs::path(ctx.service.session_dir) / s.id; }

  // Caller holds s.mu.
  void persist(const Session& s, std::optional<std::size_t> entry) const {
    if (ctx.service.session_dir.empty()) return;
    const fs::path dir = session_path(s);
    fs::create_directories(dir);
    if (!entry) {
      write_png(s.original, dir / "original.png");
      save_latent(s.latent, dir / "latent.ftw");
    } else {
      const Entry& e = *s.history[*entry];
      const std::string k = std::to_string(*entry);
      save_latent(e.latent, dir / ("edit_" + k + ".ftw"));
      if (e.condition.patch_upper) write_png(*e.condition.patch_upper, dir / ("patch_upper_" + k + ".png"));
      if (e.condition.patch_lower) write_png(*e.condition.patch_lower, dir / ("patch_lower_" + k + ".png"));
      if (e.status == RecoveryStatus::Done) write_png(e.recovered, dir / ("recovered_" + k + ".png"));
    }
    json meta;
    meta["created_at"] = s.created_at;
    meta["history"] = json::array();
    for (const auto& e : s.history) {
      json h = condition_json(e->condition);
      h["base"] = e->base ? json(*e->base) : json(nullptr);
      h["recovered"] = e->status == RecoveryStatus::Done;
      h["initial_objective"] = e->initial_objective;
      h["final_objective"] = e->final_objective;
      meta["history"].push_back(h);
    }
    write_text(dir / "session.json", meta.dump(2));
  }

  // Reloads persisted sessions; images are regenerated from the stored latents.
  void restore(const BackboneSet& bb) {
    if (ctx.service.session_dir.empty()) return;
    const fs::path root = ctx.service.session_dir;
    if (!fs::exists(root)) return;
    for (const auto& d : fs::directory_iterator(root)) {
      if (!d.is_directory() || !fs::exists(d.path() / "session.json")) continue;
      auto s = std::make_shared<Session>();
      s->id = d.path().filename().string();
      std::ifstream in(d.path() / "session.json");
      const json meta = json::parse(in);
      s->created_at = meta.at("created_at").get<std::string>();
      s->original = read_png(d.path() / "original.png");
      s->latent = load_latent(d.path() / "latent.ftw", ctx.bounds);
      s->preview = bb.generator->generate(s->latent);
      std::size_t k = 0;
      for (const auto& h : meta.at("history")) {
        auto e = std::make_shared<Entry>();
        const std::string ks = std::to_string(k);
        if (h.contains("text_upper")) e->condition.text_upper = h["text_upper"].get<std::string>();
        if (h.contains("text_lower")) e->condition.text_lower = h["text_lower"].get<std::string>();
        if (h.at("has_patch_upper").get<bool>()) e->condition.patch_upper = read_png(d.path() / ("patch_upper_" + ks + ".png"));
        if (h.at("has_patch_lower").get<bool>()) e->condition.patch_lower = read_png(d.path() / ("patch_lower_" + ks + ".png"));
        if (!h.at("base").is_null()) e->base = h["base"].get<std::size_t>();
        e->latent = load_latent(d.path() / ("edit_" + ks + ".ftw"), ctx.bounds);
        e->image = bb.generator->generate(e->latent);
        if (h.at("recovered").get<bool>()) {
          e->status = RecoveryStatus::Done;
          e->step = ctx.recovery.steps;
          e->recovered = read_png(d.path() / ("recovered_" + ks + ".png"));
          e->initial_objective = h.at("initial_objective").get<double>();
          e->final_objective = h.at("final_objective").get<double>();
        }
        s->history.push_back(std::move(e));
        ++k;
      }
      sessions[s->id] = std::move(s);
    }
  }

  json create(const httplib::Request& req) {
    auto [bb, w] = loaded();
    if (!req.is_multipart_form_data() || !req.has_file("image")) {
      throw HttpError(400, "expected a multipart upload with an 'image' field");
    }
    const std::string& bytes = req.get_file_value("image").content;
    if (bytes.empty()) throw HttpError(400, "uploaded image is empty");
    if (bytes.size() > ctx.service.max_upload_bytes) {
      throw HttpError(413, "upload exceeds " + std::to_string(ctx.service.max_upload_bytes) + " bytes");
    }
    Image img;
    try {
      img = decode_png(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
    } catch (const Error& e) {
      throw HttpError(400, std::string("cannot decode image: ") + e.what());
    }
    const std::size_t n = bb->generator->image_size();
    if (img.height() != n || img.width() != n) img = resize_area(img, n, n);

    auto s = std::make_shared<Session>();
    s->id = new_id();
    s->created_at = now_utc();
    s->original = img;
    s->latent = bb->inverter->invert(img, ctx.bounds);
    s->preview = bb->generator->generate(s->latent);
    {
      std::lock_guard lk(s->mu);
      persist(*s, std::nullopt);
    }
    {
      std::lock_guard lk(mu);
      sessions[s->id] = s;
    }
    return {{"session_id", s->id}, {"preview", png64(s->preview)}};
  }

  static EditCondition parse_condition(const std::string& body, std::optional<std::size_t>& base) {
    json j;
    try {
      j = json::parse(body.empty() ? "{}" : body);
    } catch (const json::parse_error& e) {
      throw HttpError(400, std::string("body is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw HttpError(422, "body must be a JSON object");
    EditCondition c;
    auto str = [&](const char* key) -> std::optional<std::string> {
      if (!j.contains(key) || j[key].is_null()) return std::nullopt;
      if (!j[key].is_string()) throw HttpError(422, std::string(key) + " must be a string");
      return j[key].get<std::string>();
    };
    for (const auto& [key, v] : j.items()) {
      if (key != "text" && key != "text_upper" && key != "text_lower" && key != "patch_upper" && key != "patch_lower" &&
          key != "base") {
        throw HttpError(422, "unknown field '" + key + "'");
      }
    }
    if (auto t = str("text")) {
      if (j.contains("text_upper") || j.contains("text_lower")) {
        throw HttpError(422, "give either text or text_upper/text_lower, not both");
      }
      try {
        c.set_prompt(*t);
      } catch (const FormatError& e) {
        throw HttpError(422, e.what());
      }
    }
    if (auto t = str("text_upper")) c.text_upper = *t;
    if (auto t = str("text_lower")) c.text_lower = *t;
    if (auto p = str("patch_upper")) c.patch_upper = image_from_b64(*p, "patch_upper");
    if (auto p = str("patch_lower")) c.patch_lower = image_from_b64(*p, "patch_lower");
    if (j.contains("base") && !j["base"].is_null()) {
      if (!j["base"].is_number_unsigned()) throw HttpError(422, "base must be a non-negative edit index");
      base = j["base"].get<std::size_t>();
    }
    if (c.empty()) throw HttpError(422, "at least one condition required");
    try {
      c.validate();
    } catch (const FormatError& e) {
      throw HttpError(422, e.what());
    }
    return c;
  }

  json edit_session(const std::string& id, const std::string& body) {
    auto [bb, w] = loaded();
    auto s = find(id);
    std::optional<std::size_t> base;
    EditCondition c = parse_condition(body, base);
    LatentCode start;
    {
      std::lock_guard lk(s->mu);
      if (base) {
        if (*base >= s->history.size()) throw HttpError(422, "base " + std::to_string(*base) + " is not a history entry");
        start = s->history[*base]->latent;
      } else {
        start = s->latent;
      }
    }
    EditResult r;
    try {
      r = edit(start, c, *w, *bb);
    } catch (const FormatError& e) {
      throw HttpError(422, e.what());
    }
    auto e = std::make_shared<Entry>();
    e->condition = std::move(c);
    e->base = base;
    e->latent = std::move(r.latent);
    e->image = std::move(r.image);
    std::lock_guard lk(s->mu);
    s->history.push_back(e);
    const std::size_t k = s->history.size() - 1;
    persist(*s, k);
    return {{"edit_index", k}, {"image", png64(e->image)}};
  }

  std::shared_ptr<Entry> entry_of(Session& s, const std::string& k_text) {
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(k_text, &used);
      if (used != k_text.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw HttpError(404, "no history entry '" + k_text + "'");
    }
    std::lock_guard lk(s.mu);
    if (k >= s.history.size()) throw HttpError(404, "no history entry " + k_text);
    return s.history[k];
  }

  json recover_entry(const std::string& id, const std::string& k_text) {
    auto [bb, w] = loaded();
    auto s = find(id);
    auto e = entry_of(*s, k_text);
    {
      std::lock_guard lk(s->mu);
      if (e->status == RecoveryStatus::Done) return {{"image", png64(e->recovered)}, {"cached", true}};
      if (e->status == RecoveryStatus::Queued || e->status == RecoveryStatus::Running) {
        throw HttpError(409, "recovery already running for entry " + k_text);
      }
      e->status = RecoveryStatus::Queued;
      e->step = 0;
      e->error.clear();
    }
    std::lock_guard session_queue(s->recover_mu);
    recover_slots.acquire();
    struct Release {
      Semaphore& s;
      ~Release() { s.release(); }
    } release{recover_slots};
    {
      std::lock_guard lk(s->mu);
      e->status = RecoveryStatus::Running;
    }
    try {
      RecoveryResult r = recover(e->latent, s->original, e->image, *bb, ctx.recovery, [&](std::size_t step, double) {
        std::lock_guard lk(s->mu);
        e->step = step;
      });
      std::lock_guard lk(s->mu);
      e->recovered = std::move(r.image);
      e->initial_objective = r.initial_objective;
      e->final_objective = r.final_objective;
      e->step = ctx.recovery.steps;
      e->status = RecoveryStatus::Done;
      for (std::size_t k = 0; k < s->history.size(); ++k)
        if (s->history[k] == e) persist(*s, k);
      return {{"image", png64(e->recovered)}, {"cached", false}};
    } catch (const std::exception& ex) {
      std::lock_guard lk(s->mu);
      e->status = RecoveryStatus::Failed;
      e->error = ex.what();
      throw;
    }
  }

  json summary(const std::string& id) {
    auto s = find(id);
    std::lock_guard lk(s->mu);
    json h = json::array();
    for (std::size_t k = 0; k < s->history.size(); ++k) {
      const Entry& e = *s->history[k];
      json j = condition_json(e.condition);
      j["edit_index"] = k;
      j["base"] = e.base ? json(*e.base) : json(nullptr);
      json rec = {{"status", status_name(e.status)}, {"step", e.step}, {"steps", ctx.recovery.steps}};
      if (e.status == RecoveryStatus::Done) {
        rec["initial_objective"] = e.initial_objective;
        rec["final_objective"] = e.final_objective;
      }
      if (e.status == RecoveryStatus::Failed) rec["error"] = e.error;
      j["recovery"] = rec;
      h.push_back(j);
    }
    return {{"session_id", s->id}, {"created_at", s->created_at}, {"history", h}};
  }

  json entry_images(const std::string& id, const std::string& k_text) {
    auto s = find(id);
    auto e = entry_of(*s, k_text);
    std::lock_guard lk(s->mu);
    json j = {{"edit_index", std::stoul(k_text)}, {"image", png64(e->image)}};
    if (e->status == RecoveryStatus::Done) j["recovered"] = png64(e->recovered);
    return j;
  }

  json original_images(const std::string& id) {
    auto s = find(id);
    std::lock_guard lk(s->mu);
    return {{"image", png64(s->original)}, {"preview", png64(s->preview)}};
  }

  template <class F>
  auto wrap(int ok_status, F f) {
    return [this, ok_status, f](const httplib::Request& req, httplib::Response& res) {
      int status = ok_status;
      json body;
      try {
        body = f(req);
      } catch (const HttpError& e) {
        status = e.status;
        body = {{"error", e.what()}};
      } catch (const FormatError& e) {
        status = 422;
        body = {{"error", e.what()}};
      } catch (const std::exception& e) {
        status = 500;
        body = {{"error", e.what()}};
      }
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
  }

  void routes() {
    server.new_task_queue = [n = ctx.service.threads] { return new httplib::ThreadPool(n); };
    // Edit bodies carry base64 patches; the image size limit is enforced per upload.
    server.set_payload_max_length(2 * ctx.service.max_upload_bytes + (1u << 16));
    server.Get("/healthz", wrap(200, [this](const httplib::Request&) {
      std::lock_guard lk(mu);
      json j = {{"ready", backbones != nullptr}};
      if (backbones) j["backbone_config_hash"] = backbones->config_hash;
      return j;
    }));
    server.Get("/vocabulary", wrap(200, [this](const httplib::Request&) {
      return json{{"upper", ctx.vocabulary.upper}, {"lower", ctx.vocabulary.lower}, {"separator", ", "}};
    }));
    server.Post("/sessions", wrap(201, [this](const httplib::Request& r) { return create(r); }));
    server.Get(R"(/sessions/([^/]+))", wrap(200, [this](const httplib::Request& r) { return summary(r.matches[1]); }));
    server.Get(R"(/sessions/([^/]+)/original)",
               wrap(200, [this](const httplib::Request& r) { return original_images(r.matches[1]); }));
    server.Post(R"(/sessions/([^/]+)/edits)",
                wrap(201, [this](const httplib::Request& r) { return edit_session(r.matches[1], r.body); }));
    server.Get(R"(/sessions/([^/]+)/edits/([^/]+))",
               wrap(200, [this](const httplib::Request& r) { return entry_images(r.matches[1], r.matches[2]); }));
    server.Post(R"(/sessions/([^/]+)/edits/([^/]+)/recover)",
                wrap(200, [this](const httplib::Request& r) { return recover_entry(r.matches[1], r.matches[2]); }));
  }
};

Service::Service(ServiceContext ctx) : impl_(std::make_unique<Impl>(std::move(ctx))) {
  impl_->ctx.service.validate();
  impl_->routes();
}

Service::~Service() { stop(); }

void Service::set_backbones(BackboneSet backbones, MapperWeights weights) {
  auto bb = std::make_shared<const BackboneSet>(std::move(backbones));
  auto w = std::make_shared<const MapperWeights>(std::move(weights));
  std::lock_guard lk(impl_->mu);
  impl_->restore(*bb);
  impl_->backbones = std::move(bb);
  impl_->weights = std::move(w);
}

int Service::start() {
  const auto [host, port] = parse_listen(impl_->ctx.service.listen);
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot bind " + impl_->ctx.service.listen);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::run() {
  const auto [host, port] = parse_listen(impl_->ctx.service.listen);
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + impl_->ctx.service.listen);
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::size_t Service::session_count() const {
  std::lock_guard lk(impl_->mu);
  return impl_->sessions.size();
}

}  // namespace ftex
