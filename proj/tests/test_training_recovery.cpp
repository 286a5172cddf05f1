#include <doctest.h>

#include <cmath>

#include "ftex/recovery.hpp"
#include "ftex/training.hpp"
#include "support.hpp"

using namespace ftex;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.seed = 4;
  return cfg;
}

MapperWeights perturbed(const TrainConfig& cfg, std::uint64_t seed) {
  MapperWeights w = MapperWeights::init(mapper_shape(cfg, test::toy_backbones()), seed);
  Rng rng(seed);
  for (std::size_t k = 0; k < w.params().size(); ++k)
    for (float& v : w.params()[k].second.data) v += static_cast<float>(rng.normal(0.0, 0.05));
  return w;
}

// Input portrait whose background differs from the edited reconstruction.
struct RecoveryCase {
  LatentCode w_edit;
  Image input;
  Image edited;
};

RecoveryCase recovery_case() {
  const auto& bb = test::toy_backbones();
  RecoveryCase c;
  c.w_edit = test::random_latent(61, 0.02);
  c.edited = bb.generator->generate(c.w_edit);
  c.input = bb.generator->generate(test::random_latent(62, 0.02));
  Rng rng(63);
  for (float& v : c.input.data()) v = std::clamp(v + static_cast<float>(rng.normal(0.0, 0.03)), 0.0f, 1.0f);
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("split sizes follow the train share") {
    CHECK(train_split_size(12401) == 11265);
    CHECK(train_split_size(100) == 91);
    CHECK(train_split_size(24) == 22);
    CHECK(train_split_size(16) == 15);
    CHECK(train_split_size(1) == 1);
  }

  TEST_CASE("ingest splits and prepares samples") {
    const Dataset& d = test::toy_dataset();
    CHECK(d.train.size() + d.test.size() + d.index.dropped.size() == 12);
    CHECK(d.train.size() == train_split_size(d.train.size() + d.test.size()));
    for (const Sample& s : d.train) {
      CHECK(s.reconstruction == test::toy_backbones().generator->generate(s.latent));
      CHECK(!s.record.latent_path.empty());
    }
  }

  TEST_CASE("config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.loss.crop_size = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.learning_rate = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("batches are a pure function of seed and step") {
    const auto& bb = test::toy_backbones();
    const TrainConfig cfg = small_config();
    const auto a = draw_batch(test::toy_dataset(), cfg, bb, 7);
    const auto b = draw_batch(test::toy_dataset(), cfg, bb, 7);
    const auto c = draw_batch(test::toy_dataset(), cfg, bb, 8);
    REQUIRE(a.size() == 2);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].source == b[i].source);
      CHECK(a[i].condition.upper_attr == b[i].condition.upper_attr);
      CHECK(a[i].condition.window_lower == b[i].condition.window_lower);
      CHECK(*a[i].condition.condition.patch_upper == *b[i].condition.condition.patch_upper);
      CHECK(a[i].crop_seed == b[i].crop_seed);
      differs = differs || a[i].crop_seed != c[i].crop_seed;
    }
    CHECK(differs);
  }

  TEST_CASE("initial mapper has zero identity background skin and norm terms") {
    const auto& bb = test::toy_backbones();
    const TrainConfig cfg = small_config();
    const TrainState st = init_training(cfg, bb);
    const BatchResult r = evaluate_batch(draw_batch(test::toy_dataset(), cfg, bb, 0), st.weights, bb, cfg);
    CHECK(r.report.raw.id == 0.0);
    CHECK(r.report.raw.bg == 0.0);
    CHECK(r.report.raw.skin == 0.0);
    CHECK(r.report.raw.norm == 0.0);
    CHECK(r.report.raw.type > 0.0);
    CHECK(r.report.raw.txr > 0.0);
  }

  TEST_CASE("analytic gradients match central differences") {
    const auto& bb = test::toy_backbones();
    const TrainConfig cfg = small_config();
    const auto batch = draw_batch(test::toy_dataset(), cfg, bb, 3);
    const MapperWeights w0 = perturbed(cfg, 17);
    const BatchResult base = evaluate_batch(batch, w0, bb, cfg);

    Rng rng(99);
    int checked = 0;
    while (checked < 10) {
      const std::size_t k = rng.index(w0.params().size());
      const std::size_t j = rng.index(w0.params()[k].second.size());
      const double g = base.gradients[k][j];
      const float p0 = w0.params()[k].second.data[j];
      const float hi = static_cast<float>(p0 + 1e-4), lo = static_cast<float>(p0 - 1e-4);
      MapperWeights w = w0;
      w.params()[k].second.data[j] = hi;
      const double fp = evaluate_batch(batch, w, bb, cfg).report.total;
      w.params()[k].second.data[j] = lo;
      const double fm = evaluate_batch(batch, w, bb, cfg).report.total;
      const double fd = (fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo));
      CAPTURE(w0.params()[k].first);
      CAPTURE(j);
      CAPTURE(g);
      CAPTURE(fd);
      CHECK(std::abs(fd - g) <= 1e-3 * std::max(std::abs(fd), std::abs(g)) + 1e-7);
      ++checked;
    }
  }

  TEST_CASE("checkpoints round-trip and resume reproduces the loss sequence") {
    const auto& bb = test::toy_backbones();
    const TrainConfig cfg = small_config();
    test::TempDir dir("resume");

    TrainState full = init_training(cfg, bb);
    std::vector<LossReport> seq_full;
    train(full, test::toy_dataset(), bb, cfg, 4, [&](std::size_t, const LossReport& r) { seq_full.push_back(r); });

    TrainState part = init_training(cfg, bb);
    std::vector<LossReport> seq_part;
    train(part, test::toy_dataset(), bb, cfg, 2, [&](std::size_t, const LossReport& r) { seq_part.push_back(r); });
    save_checkpoint(part, "training: {}\n", dir / "ck.ftm");
    std::string text;
    TrainState resumed = load_checkpoint(dir / "ck.ftm", &text);
    CHECK(resumed == part);
    CHECK(text == "training: {}\n");
    train(resumed, test::toy_dataset(), bb, cfg, 4, [&](std::size_t, const LossReport& r) { seq_part.push_back(r); });

    CHECK(seq_part == seq_full);
    CHECK(resumed == full);
    CHECK(load_mapper(dir / "ck.ftm") == part.weights);
  }

  TEST_CASE("plain mapper files are not training checkpoints") {
    test::TempDir dir("plain");
    save_mapper(MapperWeights::init(mapper_shape(TrainConfig{}, test::toy_backbones()), 0), dir / "m.ftm");
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ftm"), FormatError);
  }
}

TEST_SUITE("recovery") {
  TEST_CASE("guided fusion selects pixels by the cloth mask") {
    const auto& bb = test::toy_backbones();
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Image i_e = bb.generator->generate(test::random_latent(10 + s, 0.05));
      const Image i_i = test::random_image(i_e.height(), i_e.width(), 20 + s);
      const ParsingMask p = bb.parser->parse(i_e);
      const Image g = fuse_guided(i_e, i_i, *bb.parser);
      const std::size_t hw = i_e.pixels();
      std::size_t cloth = 0;
      for (std::size_t px = 0; px < hw; ++px) {
        const bool from_edit = p.upper_cloth[px] || p.lower_cloth[px];
        cloth += from_edit;
        for (std::size_t c = 0; c < 3; ++c) {
          const float want = from_edit ? i_e.data()[c * hw + px] : i_i.data()[c * hw + px];
          if (g.data()[c * hw + px] != want) FAIL("pixel " << px << " channel " << c);
        }
      }
      CHECK(cloth > 0);
      CHECK(cloth < hw);
    }
    CHECK_THROWS_AS(fuse_guided(Image(4, 4), Image(4, 5), *bb.parser), ShapeError);
  }

  TEST_CASE("recovery reduces its objective and leaves the shared generator untouched") {
    const auto& bb = test::toy_backbones();
    const RecoveryCase c = recovery_case();
    const LatentCode unrelated = test::random_latent(77);
    const Image before = bb.generator->generate(unrelated);
    const NamedTensors theta_before = bb.generator->parameters();

    RecoveryConfig cfg;
    cfg.steps = 100;
    std::vector<std::size_t> logged;
    const RecoveryResult r = recover(c.w_edit, c.input, c.edited, bb, cfg, [&](std::size_t s, double) { logged.push_back(s); });
    MESSAGE("recovery objective " << r.initial_objective << " -> " << r.final_objective);
    CHECK(r.final_objective <= 0.7 * r.initial_objective);
    CHECK(r.trace.size() == 100);
    CHECK(logged == std::vector<std::size_t>{0, 25, 50, 75});
    CHECK(!(r.theta == bb.generator->parameters()));
    CHECK(r.image == bb.generator->generate(c.w_edit, r.theta));

    CHECK(bb.generator->parameters() == theta_before);
    CHECK(bb.generator->generate(unrelated) == before);
  }

  TEST_CASE("zero-step recovery is the plain generator output") {
    const auto& bb = test::toy_backbones();
    const RecoveryCase c = recovery_case();
    RecoveryConfig cfg;
    cfg.steps = 0;
    const RecoveryResult r = recover(c.w_edit, c.input, c.edited, bb, cfg);
    CHECK(r.image == c.edited);
    CHECK(r.theta == bb.generator->parameters());
    CHECK(r.initial_objective == r.final_objective);
    CHECK(r.trace.empty());
  }

  TEST_CASE("recovery config is validated") {
    RecoveryConfig cfg;
    cfg.learning_rate = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = RecoveryConfig{};
    cfg.parse_every = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
