#include <doctest.h>

#include <omp.h>

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "ftex/config.hpp"
#include "ftex/evaluation.hpp"
#include "support.hpp"

using namespace ftex;

namespace {

// Marks every pixel with the category encoded in the red value of pixel 0.
class StubParser : public HumanParser {
 public:
  const NamedTensors& parameters() const override { return params_; }
  ParsingMask parse(const Image& img) const override {
    const std::size_t n = img.pixels();
    ParsingMask p;
    p.height = img.height();
    p.width = img.width();
    const auto c = static_cast<ClothCategory>(std::lround(img.at(0, 0, 0) * 10.0f));
    const std::uint8_t cloth = c != ClothCategory::None;
    p.upper_cloth.assign(n, 0);
    p.lower_cloth.assign(n, cloth);
    p.skin.assign(n, 0);
    p.face.assign(n, 0);
    p.background.assign(n, !cloth);
    p.category.assign(n, c);
    return p;
  }

 private:
  NamedTensors params_;
};

// Absolute difference of the first pixel.
class StubPerceptual : public PerceptualDistance {
 public:
  const NamedTensors& parameters() const override { return params_; }
  ad::Var distance(ad::Tape& tape, ad::Var a, ad::Var b) const override {
    return tape.constant({std::abs(a.value()[0] - b.value()[0])}, {1});
  }
  std::vector<double> features(const Image& img) const override { return {img.data()[0]}; }

 private:
  NamedTensors params_;
};

Image category_image(ClothCategory c) {
  Image img(4, 4);
  img.at(0, 0, 0) = static_cast<float>(static_cast<int>(c)) / 10.0f;
  return img;
}

std::vector<std::vector<double>> gaussian_set(std::size_t n, std::size_t k, double mean, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(n, std::vector<double>(k));
  for (auto& row : out)
    for (double& x : row) x = rng.normal(mean, sd);
  return out;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (value) {
      ::setenv(kConfigEnv, value, 1);
    } else {
      ::unsetenv(kConfigEnv);
    }
  }
  ~EnvGuard() { ::unsetenv(kConfigEnv); }
};

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("fid of a set with itself vanishes and fid is symmetric") {
    const auto a = gaussian_set(200, 5, 0.0, 1.0, 1);
    const auto b = gaussian_set(300, 5, 0.3, 2.0, 2);
    CHECK(fid(a, a) <= 1e-6);
    CHECK(std::abs(fid(a, b) - fid(b, a)) <= 1e-6);
    CHECK(fid(a, b) > 1.0);
  }

  TEST_CASE("fid of two shifted unit gaussians is one") {
    const auto a = gaussian_set(10000, 1, 0.0, 1.0, 3);
    const auto b = gaussian_set(10000, 1, 1.0, 1.0, 4);
    const double d = fid(a, b);
    MESSAGE("fid estimate " << d);
    CHECK(std::abs(d - 1.0) < 0.1);
  }

  TEST_CASE("fid against a degenerate set reduces to mean shift plus variance") {
    const auto a = gaussian_set(5000, 2, 0.0, 1.0, 5);
    const std::vector<std::vector<double>> b(50, std::vector<double>{2.0, -1.0});
    double want = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0.0, v = 0.0;
      for (const auto& r : a) m += r[j];
      m /= static_cast<double>(a.size());
      for (const auto& r : a) v += (r[j] - m) * (r[j] - m);
      v /= static_cast<double>(a.size() - 1);
      want += (m - b[0][j]) * (m - b[0][j]) + v;
    }
    CHECK(std::abs(fid(a, b) - want) < 1e-2);
  }

  TEST_CASE("fid rejects tiny or mismatched sets") {
    const auto a = gaussian_set(5, 2, 0.0, 1.0, 6);
    CHECK_THROWS(fid(a, {{1.0, 2.0}}));
    CHECK_THROWS(fid({}, a));
    CHECK_THROWS_AS(fid(a, gaussian_set(5, 3, 0.0, 1.0, 7)), ShapeError);
  }

  TEST_CASE("type accuracy counts parses showing the target") {
    const StubParser parser;
    std::vector<TypeEdit> all;
    for (ClothCategory c : kEvalCategories) all.push_back({category_image(c), c});
    const AccuracyResult full = type_accuracy(all, parser);
    CHECK(full.overall == 1.0);
    CHECK(full.hits == std::vector<bool>(4, true));

    all[2].image = category_image(ClothCategory::Skirt);
    const AccuracyResult part = type_accuracy(all, parser);
    CHECK(part.overall == 0.75);
    CHECK(part.successes == 3);
    CHECK(part.per_category[2].attempts == 1);
    CHECK(part.per_category[2].successes == 0);
    CHECK(part.per_category[0].accuracy() == 1.0);

    CHECK_THROWS(type_accuracy({}, parser));
    CHECK_THROWS_AS(type_accuracy({{category_image(ClothCategory::Top), ClothCategory::Top}}, parser), FormatError);
  }

  TEST_CASE("category presence honours the pixel threshold") {
    const StubParser parser;
    const ParsingMask p = parser.parse(category_image(ClothCategory::Dress));
    CHECK(category_present(p, ClothCategory::Dress, 1.0));
    CHECK(!category_present(p, ClothCategory::Pants, 0.0));
  }

  TEST_CASE("lpips mean averages the pair distances") {
    const StubPerceptual perceptual;
    Image a(2, 2), b(2, 2), c(2, 2);
    b.at(0, 0, 0) = 0.2f;
    c.at(0, 0, 0) = 0.4f;
    CHECK(lpips_mean({{a, b}, {a, c}}, perceptual) == doctest::Approx(0.3).epsilon(1e-6));
    CHECK_THROWS(lpips_mean({}, perceptual));
    CHECK_THROWS_AS(lpips_mean({{a, Image(3, 3)}}, perceptual), ShapeError);
  }

  TEST_CASE("evaluation is deterministic and its totals follow the per-sample rows") {
    const auto& bb = test::toy_backbones();
    const Dataset& data = test::toy_eval_dataset();
    REQUIRE(data.test.size() >= 2);
    TrainConfig tc;
    MapperWeights w = MapperWeights::init(mapper_shape(tc, bb), 1);
    Rng rng(2);
    for (std::size_t k = 0; k < w.params().size(); ++k)
      for (float& v : w.params()[k].second.data) v += static_cast<float>(rng.normal(0.0, 0.05));
    EvalConfig ec;
    ec.seed = 8;

    const int threads = omp_get_max_threads();
    omp_set_num_threads(1);
    const EvalReport serial = evaluate(w, data, bb, tc, ec);
    omp_set_num_threads(3);
    const EvalReport parallel = evaluate(w, data, bb, tc, ec);
    omp_set_num_threads(threads);
    CHECK(serial == parallel);

    CHECK(serial.samples == data.test.size());
    REQUIRE(serial.per_sample.size() == serial.samples);
    double lp = 0.0;
    std::size_t scored = 0, hits = 0;
    for (const auto& s : serial.per_sample) {
      lp += s.lpips;
      CHECK(s.target == category_of_prompt(s.prompt));
      if (s.target == ClothCategory::None) continue;
      ++scored;
      hits += s.hit;
    }
    CHECK(serial.lpips_mean == doctest::Approx(lp / static_cast<double>(serial.samples)));
    CHECK(serial.scored == scored);
    CHECK(serial.successes == hits);
    if (scored > 0) CHECK(serial.accuracy == static_cast<double>(hits) / static_cast<double>(scored));
    CHECK(serial.fid >= 0.0);

    const std::string text = serial.to_text();
    CHECK(text.find("fid: ") == 0);
    CHECK(text.find("reference_accuracy: 0.8275") != std::string::npos);
    const std::string csv = serial.to_csv();
    CHECK(csv.rfind("path,prompt,target,hit,lpips\n", 0) == 0);
    CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == serial.samples + 1);

    ec.seed = 9;
    CHECK(!(evaluate(w, data, bb, tc, ec).per_sample == serial.per_sample));
  }

  TEST_CASE("evaluation needs two edited samples for fid") {
    const auto& bb = test::toy_backbones();
    const TrainConfig tc;
    const MapperWeights w = MapperWeights::init(mapper_shape(tc, bb), 1);
    EvalConfig ec;
    ec.max_samples = 1;
    CHECK_THROWS_WITH_AS(evaluate(w, test::toy_eval_dataset(), bb, tc, ec),
                         "fid needs at least two evaluated test samples, got 1", Error);
    Dataset empty;
    CHECK_THROWS(evaluate(w, empty, bb, tc, EvalConfig{}));
    EvalConfig bad;
    bad.category_threshold = 2.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_SUITE("config") {
  TEST_CASE("defaults validate and dump parses back to the same config") {
    const Config d;
    CHECK_NOTHROW(d.validate());
    CHECK(Config::parse(d.dump()) == d);
    CHECK(Config::parse("") == d);
  }

  TEST_CASE("edited values survive a round-trip") {
    Config c;
    c.backbones.seed = 77;
    c.loss_weights.txr = 0.5;
    c.training.weights = c.loss_weights;
    c.training.steps = 12;
    c.training.learning_rate = 1.25e-4;
    c.training.vocabulary.upper = {"tank top", "polo shirt"};
    c.training.output_dir = "out dir/with: colon";
    c.recovery.steps = 3;
    c.service.listen = "0.0.0.0:9000";
    c.service.session_dir = "/tmp/s";
    c.evaluation.max_samples = 5;
    c.grouping = GroupBounds{{LayerRange{0, 2}, LayerRange{2, 5}, LayerRange{5, c.backbones.latent_layers}}};
    CHECK_NOTHROW(c.validate());
    const Config back = Config::parse(c.dump());
    CHECK(back == c);
    CHECK(back.dump() == c.dump());
  }

  TEST_CASE("partial files keep defaults and mirror loss weights into training") {
    const Config c = Config::parse("loss_weights:\n  norm: 0.3\ntraining:\n  steps: 5\n");
    CHECK(c.loss_weights.norm == 0.3);
    CHECK(c.training.weights.norm == 0.3);
    CHECK(c.training.steps == 5);
    CHECK(c.recovery == RecoveryConfig{});
  }

  TEST_CASE("unknown keys and bad values are rejected with their location") {
    CHECK_THROWS_WITH_AS(Config::parse("training:\n  stepz: 3\n", "x.yaml"), "x.yaml: unknown key 'training.stepz'",
                         ConfigError);
    CHECK_THROWS_AS(Config::parse("bogus: 1\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("training:\n  steps: many\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("training:\n  steps: -3\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("loss_weights:\n  id: -1\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("training: [1, 2\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("grouping:\n  coarse: [0, 3]\n"), ConfigError);
    CHECK_THROWS_AS(Config::parse("service:\n  listen: nohost\n"), ConfigError);
  }

  TEST_CASE("config path resolution prefers the flag over the environment") {
    test::TempDir dir("cfg");
    {
      std::ofstream(dir / "a.yaml") << "training:\n  steps: 7\n";
      std::ofstream(dir / "b.yaml") << "training:\n  steps: 9\n";
    }
    const std::string a = (dir / "a.yaml").string(), b = (dir / "b.yaml").string();
    {
      EnvGuard env(nullptr);
      CHECK(!resolve_config_path(""));
      CHECK(load_config("") == Config{});
      CHECK(load_config(a).training.steps == 7);
    }
    {
      EnvGuard env(b.c_str());
      CHECK(resolve_config_path("") == std::filesystem::path(b));
      CHECK(load_config("").training.steps == 9);
      CHECK(load_config(a).training.steps == 7);
    }
    EnvGuard env(nullptr);
    CHECK_THROWS_AS(load_config((dir / "missing.yaml").string()), ConfigError);
  }
}
