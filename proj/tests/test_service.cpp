#include <doctest.h>

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <future>
#include <thread>

#include "ftex/service.hpp"
#include "support.hpp"

using namespace ftex;
using json = nlohmann::json;

namespace {

ServiceContext small_context(std::size_t recovery_steps = 4) {
  ServiceContext ctx;
  ctx.service.listen = "127.0.0.1:0";
  ctx.service.threads = 4;
  ctx.recovery.steps = recovery_steps;
  ctx.bounds = test::toy_bounds();
  return ctx;
}

MapperWeights test_mapper() {
  MapperWeights w = MapperWeights::init(mapper_shape(TrainConfig{}, test::toy_backbones()), 6);
  Rng rng(6);
  for (std::size_t k = 0; k < w.params().size(); ++k)
    for (float& v : w.params()[k].second.data) v += static_cast<float>(rng.normal(0.0, 0.05));
  return w;
}

std::string portrait_png(std::uint64_t seed) {
  const auto bytes = encode_png(test::toy_backbones().generator->generate(test::random_latent(seed, 0.03)));
  return {bytes.begin(), bytes.end()};
}

std::string patch_b64(std::uint64_t seed) { return base64_encode(encode_png(test::random_image(16, 16, seed))); }

Image image_of(const json& j, const char* key) {
  return decode_png(base64_decode(j.at(key).get<std::string>()));
}

// Running service plus a client bound to it.
struct Server {
  Service service;
  int port;
  httplib::Client client;

  explicit Server(ServiceContext ctx, bool load = true)
      : service(std::move(ctx)), port(service.start()), client("127.0.0.1", port) {
    client.set_read_timeout(120, 0);
    if (load) service.set_backbones(test::toy_backbones(), test_mapper());
  }

  httplib::Result upload(const std::string& bytes) {
    const httplib::MultipartFormDataItems items{{"image", bytes, "portrait.png", "image/png"}};
    return client.Post("/sessions", items);
  }
  std::string create(std::uint64_t seed) {
    auto r = upload(portrait_png(seed));
    REQUIRE(r);
    REQUIRE(r->status == 201);
    return json::parse(r->body).at("session_id").get<std::string>();
  }
  httplib::Result post(const std::string& path, const json& body) {
    return client.Post(path, body.dump(), "application/json");
  }
  json edit(const std::string& id, const json& body) {
    auto r = post("/sessions/" + id + "/edits", body);
    REQUIRE(r);
    REQUIRE(r->status == 201);
    return json::parse(r->body);
  }
  json recover(const std::string& id, std::size_t k) {
    auto r = client.Post("/sessions/" + id + "/edits/" + std::to_string(k) + "/recover");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    return json::parse(r->body);
  }
  json get(const std::string& path, int want = 200) {
    auto r = client.Get(path);
    REQUIRE(r);
    CHECK(r->status == want);
    return json::parse(r->body);
  }
};

json full_condition() {
  return {{"text", "sleeveless top, short skirt"}, {"patch_upper", patch_b64(1)}, {"patch_lower", patch_b64(2)}};
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("health and vocabulary before and after the backbones load") {
    Server s(small_context(), false);
    json h = s.get("/healthz");
    CHECK(h.at("ready") == false);
    CHECK(!h.contains("backbone_config_hash"));
    auto r = s.upload(portrait_png(1));
    REQUIRE(r);
    CHECK(r->status == 503);
    CHECK(json::parse(r->body).contains("error"));

    const json v = s.get("/vocabulary");
    CHECK(v.at("upper") == AttributeVocabulary{}.upper);
    CHECK(v.at("lower") == AttributeVocabulary{}.lower);
    CHECK(v.at("separator") == ", ");

    s.service.set_backbones(test::toy_backbones(), test_mapper());
    h = s.get("/healthz");
    CHECK(h.at("ready") == true);
    CHECK(h.at("backbone_config_hash") == test::toy_backbones().config_hash);
  }

  TEST_CASE("session lifecycle and history") {
    Server s(small_context());
    const std::string id = s.create(3);
    CHECK(s.service.session_count() == 1);
    const json orig = s.get("/sessions/" + id + "/original");
    const std::string png = portrait_png(3);
    CHECK(image_of(orig, "image") == decode_png(std::vector<std::uint8_t>(png.begin(), png.end())));

    const json e0 = s.edit(id, full_condition());
    CHECK(e0.at("edit_index") == 0);
    const json e1 = s.edit(id, {{"text_lower", "long pants"}, {"base", 0}});
    CHECK(e1.at("edit_index") == 1);

    const json sum = s.get("/sessions/" + id);
    REQUIRE(sum.at("history").size() == 2);
    CHECK(sum["history"][0].at("text_upper") == "sleeveless top");
    CHECK(sum["history"][0].at("recovery").at("status") == "none");
    CHECK(sum["history"][1].at("base") == 0);
    const json g = s.get("/sessions/" + id + "/edits/1");
    CHECK(g.at("image") == e1.at("image"));
    CHECK(!g.contains("recovered"));
  }

  TEST_CASE("edits are stateless and match the library result") {
    Server s(small_context());
    const std::string id = s.create(4);
    const json a = s.edit(id, full_condition());
    s.edit(id, {{"text", "polo shirt, leggings"}});
    const json b = s.edit(id, full_condition());
    CHECK(a.at("image") == b.at("image"));

    const auto& bb = test::toy_backbones();
    const std::string png = portrait_png(4);
    const Image original = decode_png(std::vector<std::uint8_t>(png.begin(), png.end()));
    EditCondition c;
    c.set_prompt("sleeveless top, short skirt");
    c.patch_upper = decode_png(base64_decode(patch_b64(1)));
    c.patch_lower = decode_png(base64_decode(patch_b64(2)));
    const EditResult ref = edit(bb.inverter->invert(original, test::toy_bounds()), c, test_mapper(), bb);
    CHECK(a.at("image") == base64_encode(encode_png(ref.image)));
  }

  TEST_CASE("request errors map to status codes") {
    ServiceContext ctx = small_context();
    ctx.service.max_upload_bytes = 20000;
    Server s(ctx);
    const std::string id = s.create(5);

    auto status = [&](const httplib::Result& r) { return r ? r->status : -1; };
    CHECK(status(s.upload(std::string(30000, 'x'))) == 413);
    CHECK(status(s.upload("")) == 400);
    CHECK(status(s.upload("not a png")) == 400);
    CHECK(status(s.client.Post("/sessions", "{}", "application/json")) == 400);

    const std::string edits = "/sessions/" + id + "/edits";
    CHECK(status(s.post("/sessions/nope/edits", full_condition())) == 404);
    CHECK(status(s.client.Get("/sessions/nope")) == 404);
    CHECK(status(s.post(edits, json::object())) == 422);
    CHECK(json::parse(s.post(edits, json::object())->body).at("error") == "at least one condition required");
    CHECK(status(s.post(edits, {{"text", "no comma here"}})) == 422);
    CHECK(status(s.post(edits, {{"colour", "red"}})) == 422);
    CHECK(status(s.post(edits, {{"text", "tank top, shorts"}, {"text_upper", "polo shirt"}})) == 422);
    CHECK(status(s.post(edits, {{"patch_upper", "@@@"}})) == 422);
    CHECK(status(s.post(edits, {{"patch_upper", base64_encode(encode_png(Image(8, 8)))}})) == 422);
    CHECK(status(s.post(edits, {{"text_upper", "tank top"}, {"base", 3}})) == 422);
    CHECK(status(s.client.Post(edits, "{oops", "application/json")) == 400);

    CHECK(status(s.client.Get("/sessions/" + id + "/edits/0")) == 404);
    CHECK(status(s.client.Post("/sessions/" + id + "/edits/0/recover")) == 404);
    CHECK(status(s.client.Post("/sessions/" + id + "/edits/x/recover")) == 404);
  }

  TEST_CASE("recovery is cached after the first run") {
    Server s(small_context());
    const std::string id = s.create(6);
    s.edit(id, full_condition());
    const json first = s.recover(id, 0);
    CHECK(first.at("cached") == false);
    const json second = s.recover(id, 0);
    CHECK(second.at("cached") == true);
    CHECK(second.at("image") == first.at("image"));
    const json sum = s.get("/sessions/" + id);
    CHECK(sum["history"][0]["recovery"]["status"] == "done");
    CHECK(sum["history"][0]["recovery"]["step"] == 4);
    CHECK(s.get("/sessions/" + id + "/edits/0").at("recovered") == first.at("image"));
  }

  TEST_CASE("a second recovery request while one runs is a conflict") {
    Server s(small_context(200));
    const std::string id = s.create(7);
    s.edit(id, full_condition());
    auto running = std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", s.port);
      c.set_read_timeout(120, 0);
      auto r = c.Post("/sessions/" + id + "/edits/0/recover");
      return r ? r->status : -1;
    });
    for (int i = 0; i < 2000; ++i) {
      const json sum = s.get("/sessions/" + id);
      const std::string st = sum["history"][0]["recovery"]["status"];
      if (st == "queued" || st == "running") break;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    auto r = s.client.Post("/sessions/" + id + "/edits/0/recover");
    REQUIRE(r);
    CHECK(r->status == 409);
    CHECK(running.get() == 200);
  }

  TEST_CASE("concurrent recoveries match serial execution") {
    const std::array<std::uint64_t, 3> seeds{11, 12, 13};
    std::vector<std::string> serial;
    {
      Server s(small_context(6));
      for (auto seed : seeds) {
        const std::string id = s.create(seed);
        s.edit(id, full_condition());
        serial.push_back(s.recover(id, 0).at("image"));
      }
    }
    ServiceContext ctx = small_context(6);
    ctx.service.recovery_parallelism = 3;
    Server s(ctx);
    std::vector<std::string> ids;
    for (auto seed : seeds) {
      ids.push_back(s.create(seed));
      s.edit(ids.back(), full_condition());
    }
    std::vector<std::future<std::string>> runs;
    for (const auto& id : ids) {
      runs.push_back(std::async(std::launch::async, [&, id] {
        httplib::Client c("127.0.0.1", s.port);
        c.set_read_timeout(120, 0);
        auto r = c.Post("/sessions/" + id + "/edits/0/recover");
        return r && r->status == 200 ? json::parse(r->body).at("image").get<std::string>() : std::string();
      }));
    }
    for (std::size_t i = 0; i < runs.size(); ++i) CHECK(runs[i].get() == serial[i]);
    CHECK(serial[0] != serial[1]);
  }

  TEST_CASE("sessions persist and restore from the session directory") {
    test::TempDir dir("sessions");
    ServiceContext ctx = small_context();
    ctx.service.session_dir = dir.path().string();
    std::string id;
    json edit0, rec0, sum;
    {
      Server s(ctx);
      id = s.create(8);
      edit0 = s.edit(id, full_condition());
      s.edit(id, {{"text_upper", "polo shirt"}});
      rec0 = s.recover(id, 0);
      sum = s.get("/sessions/" + id);
    }
    CHECK(std::filesystem::exists(dir / id / "session.json"));
    CHECK(std::filesystem::exists(dir / id / "recovered_0.png"));
    Server s(ctx);
    CHECK(s.service.session_count() == 1);
    CHECK(s.get("/sessions/" + id) == sum);
    const json g = s.get("/sessions/" + id + "/edits/0");
    CHECK(g.at("image") == edit0.at("image"));
    CHECK(g.at("recovered") == rec0.at("image"));
    CHECK(s.recover(id, 0).at("cached") == true);
    CHECK(s.edit(id, full_condition()).at("edit_index") == 2);
  }

  TEST_CASE("listen addresses are validated") {
    CHECK(parse_listen("127.0.0.1:80") == std::pair<std::string, int>{"127.0.0.1", 80});
    CHECK_THROWS_AS(parse_listen("localhost"), ConfigError);
    CHECK_THROWS_AS(parse_listen("h:99999"), ConfigError);
    CHECK_THROWS_AS(parse_listen(":80"), ConfigError);
    ServiceConfig c;
    c.recovery_parallelism = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}
