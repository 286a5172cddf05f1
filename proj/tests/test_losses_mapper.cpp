#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ftex/losses.hpp"
#include "ftex/mapper.hpp"
#include "ftex/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ftex;

namespace {

std::vector<double> normals(std::size_t n, Rng& rng, double sd = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

MapperWeights perturbed_mapper(std::uint64_t seed) {
  const auto& bb = test::toy_backbones();
  MapperWeights w = MapperWeights::init(mapper_shape(TrainConfig{}, bb), seed);
  Rng rng(derive_seed(seed, "perturb"));
  for (std::size_t i = 0; i < w.params().size(); ++i)
    for (float& v : w.params()[i].second.data) v += static_cast<float>(rng.normal(0.0, 0.05));
  return w;
}

Image image_with_color(std::size_t h, std::size_t w, int r, int g, int b) {
  Image img(h, w);
  const int rgb[3] = {r, g, b};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) img.at(c, y, x) = static_cast<float>(rgb[c] / 255.0);
  return img;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("loss weights reject negatives and all-zero") {
    CHECK_NOTHROW(LossWeights{}.validate());
    LossWeights w;
    w.id = -0.1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
    CHECK_THROWS_AS((LossWeights{0, 0, 0, 0, 0, 0}.validate()), ConfigError);
    w.id = std::nan("");
    CHECK_THROWS_AS(w.validate(), ConfigError);
  }

  TEST_CASE("loss report weights terms and round-trips through the log format") {
    const LossTerms raw{0.5, 2.0, 0.25, 1.0, 4.0, 0.125};
    const LossWeights w;
    const LossReport r = LossReport::make(raw, w);
    CHECK(r.weighted.txr == doctest::Approx(0.04));
    CHECK(r.total == doctest::Approx(0.5 + 0.04 + 0.025 + 1.0 + 4.0 + 0.1));
    const std::string line = r.log_line(17);
    CHECK(line.rfind("step=17 type=0.5 txr=2 id=0.25 skin=1 bg=4 norm=0.125 total=", 0) == 0);
    std::size_t step = 0;
    const LossReport back = LossReport::parse_log_line(line, &step);
    CHECK(step == 17);
    CHECK(back.raw == raw);
    CHECK(back.total == doctest::Approx(r.total).epsilon(1e-8));
    CHECK_THROWS_AS(LossReport::parse_log_line("step=1 type=x"), FormatError);
    CHECK_THROWS_AS(LossReport::parse_log_line("type=1"), FormatError);
  }

  TEST_CASE("unnormalized gram of a 2x2 feature map") {
    const auto g = gram({1, 2, 3, 4}, 2, 2, false);
    CHECK(g == std::vector<double>{5, 11, 11, 25});
    const auto gn = gram({1, 2, 3, 4}, 2, 2, true);
    CHECK(gn[1] == doctest::Approx(11.0 / 4.0));
    CHECK_THROWS_AS(gram({1, 2, 3}, 2, 2), ShapeError);
  }

  TEST_CASE("gram matrices are symmetric positive semi-definite") {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
      const std::size_t c = 1 + rng.index(8), n = 1 + rng.index(30);
      const auto f = normals(c * n, rng);
      const auto g = gram(f, c, n, t % 2 == 0);
      Eigen::MatrixXd m(c, c);
      for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = 0; b < c; ++b) {
          CHECK(g[a * c + b] == g[b * c + a]);
          m(a, b) = g[a * c + b];
        }
      const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
      CHECK(es.eigenvalues().minCoeff() >= -1e-6);
    }
  }

  TEST_CASE("type loss target calibration") {
    const auto& je = *test::toy_backbones().joint_embedder;
    const Embedding e_ii = je.embed_image(test::random_image(64, 64, 3));
    const Embedding e_ti = je.embed_text("tank top, long pants");
    const Embedding e_t = je.embed_text("camisole dress, long skirt");
    const Embedding e_ie = e_ii - e_ti + e_t;
    CHECK(type_loss(e_ie, e_ii, e_ti, e_t) < 1e-6);
    CHECK(type_loss(e_ii, e_ii, e_ti, e_t) > 1e-3);

    // With identical source and target the loss is the plain cosine distance.
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
      const Embedding e{normals(e_ii.dim(), rng)};
      CHECK(type_loss(e, e_ii, e_ti, e_ti) == cosine_distance(e, e_ii));
    }
    CHECK_THROWS_AS(type_loss(Embedding{{1.0}}, e_ii, e_ti, e_t), ShapeError);
  }

  TEST_CASE("crop windows lie inside the mask") {
    const std::size_t h = 6, w = 7;
    std::vector<std::uint8_t> mask(h * w, 0);
    for (std::size_t y = 1; y < 5; ++y)
      for (std::size_t x = 2; x < 6; ++x) mask[y * w + x] = 1;
    const auto all = valid_crops(mask, h, w, 3);
    CHECK(all == std::vector<CropWindow>{{1, 2, 3}, {1, 3, 3}, {2, 2, 3}, {2, 3, 3}});
    CHECK(valid_crops(mask, h, w, 4).size() == 1);
    CHECK(valid_crops(mask, h, w, 5).empty());
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
      const CropWindow c = sample_crop(mask, h, w, 3, rng);
      CHECK(std::find(all.begin(), all.end(), c) != all.end());
    }
    CHECK_THROWS_AS(sample_crop(mask, h, w, 5, rng), ShapeError);
    CHECK_THROWS_AS(valid_crops(mask, h, w + 1, 3), ShapeError);
  }

  TEST_CASE("texture loss matches a loop gram and L1 over the extractor features") {
    const auto& bb = test::toy_backbones();
    const LossOptions opt{true, 8};
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Image i_e = bb.generator->generate(test::random_latent(40 + seed));
      const Image patch = test::random_image(8, 8, 50 + seed);
      const ParsingMask parse = bb.parser->parse(i_e);
      const Region region = seed % 2 ? Region::LowerCloth : Region::UpperCloth;

      Rng r1(seed), r2(seed);
      const double got = texture_loss(i_e, region, patch, *bb.parser, *bb.texture_extractor, r1, opt);

      const CropWindow win = sample_crop(parse.region(region), parse.height, parse.width, 8, r2);
      const FeaturePyramid fa = bb.texture_extractor->extract(i_e.crop(win.y0, win.x0, 8, 8));
      const FeaturePyramid fb = bb.texture_extractor->extract(patch);
      double want = 0.0;
      for (std::size_t l = 0; l < 4; ++l) {
        const double s = 1.0 / static_cast<double>(fa[l].channels * fa[l].positions);
        want += oracle::l1(oracle::gram(fa[l].values, fa[l].channels, fa[l].positions, s),
                           oracle::gram(fb[l].values, fb[l].channels, fb[l].positions, s));
      }
      CHECK(test::rel_err(got, want) < 1e-9);
      CHECK(got > 0.0);
    }
  }

  TEST_CASE("identity background and skin losses vanish on identical images") {
    const auto& bb = test::toy_backbones();
    const Image img = bb.generator->generate(test::random_latent(7));
    CHECK(identity_loss(img, img, *bb.identity_embedder) == 0.0);
    CHECK(background_loss(img, img, *bb.parser) == 0.0);
    CHECK(skin_loss(img, img, *bb.parser) == 0.0);
    const Image other = bb.generator->generate(test::random_latent(8, 0.3));
    CHECK(background_loss(img, other, *bb.parser) > 0.0);
    CHECK_THROWS_AS(identity_loss(img, Image(img.height(), img.width() / 2), *bb.identity_embedder), ShapeError);
  }

  TEST_CASE("norm loss of zero offsets is zero") {
    const LatentCode w = test::random_latent(3);
    CHECK(norm_loss(LatentOffset::zeros(w)) == 0.0);
    ad::Tape tape;
    CHECK(norm_loss(tape, std::nullopt, std::nullopt).scalar() == 0.0);
    const ad::Var z = tape.constant(std::vector<double>(12, 0.0), {3, 4});
    CHECK(norm_loss(tape, z, z).scalar() == 0.0);
    LatentOffset off = LatentOffset::zeros(w);
    off.delta_medium.data[0] = 3.0f;
    off.delta_fine.data[1] = 4.0f;
    CHECK(norm_loss(off) == 5.0);
  }

  TEST_CASE("LAB conversion of named colors") {
    for (const auto& c : oracle::kNamedColors) {
      const std::string name = c.name;
      CAPTURE(name);
      const Image img = image_with_color(1, 1, c.r, c.g, c.b);
      ad::Tape tape;
      const auto lab = ad::rgb_to_lab(image_var(tape, img)).value();
      CHECK(std::abs(lab[0] - c.l) < 1e-3);
      CHECK(std::abs(lab[1] - c.a) < 1e-3);
      CHECK(std::abs(lab[2] - c.bb) < 1e-3);
    }
  }

  TEST_CASE("total loss skips absent terms") {
    ad::Tape tape;
    LossVars v;
    v.type = tape.constant({0.5}, {1});
    v.norm = tape.constant({2.0}, {1});
    const LossWeights w;
    CHECK(total_loss(tape, v, w).scalar() == doctest::Approx(0.5 + 0.8 * 2.0));
    const LossTerms t = values_of(v);
    CHECK(t.type == 0.5);
    CHECK(t.txr == 0.0);
  }
}

TEST_SUITE("mapper") {
  TEST_CASE("modulation matches the loop oracle") {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
      const std::size_t rows = 1 + rng.index(5), d = 2 + rng.index(10), k = 1 + rng.index(6);
      const double eps = t % 3 == 0 ? 0.0 : 1e-5;
      const auto w = normals(rows * d, rng);
      const auto e = normals(k, rng);
      const auto gw = normals(d * k, rng, 0.3), gb = normals(d, rng), bw = normals(d * k, rng, 0.3), bb = normals(d, rng);
      ad::Tape tape;
      const std::array<ad::Var, 4> p{tape.constant(gw, {d, k}), tape.constant(gb, {d}), tape.constant(bw, {d, k}),
                                     tape.constant(bb, {d})};
      const auto got = modulate(tape.constant(w, {rows, d}), tape.constant(e, {k}), p, eps).value();
      const auto want = oracle::modulate(w, rows, d, e, gw, gb, bw, bb, eps);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(test::rel_err(got[i], want[i]) < 1e-6);
    }
  }

  TEST_CASE("modulation by hand") {
    const ModulationBlock blk{Matrix(2, 1, 0.0f), Matrix(2, 1, 2.0f), Matrix(2, 1, 0.0f), Matrix(2, 1, 0.0f), 0.0};
    const Matrix out = modulate(Matrix(1, 2, std::vector<float>{1.0f, 3.0f}), Embedding{{0.7}}, blk);
    CHECK(out.data == std::vector<float>{-2.0f, 2.0f});
    ModulationBlock neg = blk;
    neg.eps = -1.0;
    CHECK_THROWS_AS(modulate(Matrix(1, 2, 1.0f), Embedding{{0.0}}, neg), ConfigError);
  }

  TEST_CASE("prompt grammar test vectors") {
    std::ifstream in(std::string(FTEX_TEST_DATA) + "/prompt_vectors.tsv");
    REQUIRE(in);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto f = split_tabs(line);
      CAPTURE(line);
      ++rows;
      if (f[0] == "build") {
        REQUIRE(f.size() == 4);
        CHECK(build_prompt(f[1], f[2]) == f[3]);
        CHECK(split_text(f[3]) == std::pair{f[1], f[2]});
      } else if (f[0] == "split") {
        REQUIRE(f.size() == 4);
        CHECK(split_text(f[1]) == std::pair{f[2], f[3]});
      } else if (f[0] == "reject") {
        REQUIRE(f.size() == 2);
        CHECK_THROWS_AS(split_text(f[1]), FormatError);
      } else if (f[0] == "reject_build") {
        REQUIRE(f.size() == 3);
        CHECK_THROWS_AS(build_prompt(f[1], f[2]), FormatError);
      } else {
        FAIL("unknown row kind " << f[0]);
      }
    }
    CHECK(rows >= 15);
  }

  TEST_CASE("every vocabulary pair survives build and split") {
    const AttributeVocabulary v;
    for (const auto& u : v.upper)
      for (const auto& l : v.lower) CHECK(split_text(build_prompt(u, l)) == std::pair{u, l});
  }

  TEST_CASE("edit conditions are validated") {
    EditCondition c;
    CHECK_THROWS_WITH_AS(c.validate(), "at least one condition required", FormatError);
    c.text_upper = "  ";
    CHECK_THROWS_AS(c.validate(), FormatError);
    c.text_upper = "tank top";
    CHECK_NOTHROW(c.validate());
    c.patch_lower = Image(16, 20);
    CHECK_THROWS_AS(c.validate(), FormatError);
    c.patch_lower = Image(8, 8);
    CHECK_THROWS_AS(c.validate(), FormatError);
    c.patch_lower = Image(16, 16);
    CHECK_NOTHROW(c.validate());
    EditCondition p;
    p.set_prompt("polo shirt, and shorts");
    CHECK(p.text_upper == "polo shirt");
    CHECK(p.text_lower == "shorts");
  }

  TEST_CASE("initial mapper produces zero offsets") {
    const auto& bb = test::toy_backbones();
    const MapperWeights m = MapperWeights::init(mapper_shape(TrainConfig{}, bb), 3);
    const LatentCode w = test::random_latent(2);
    EditCondition c;
    c.set_prompt("tank top, long pants");
    const EditResult r = edit(w, c, m, bb);
    CHECK(r.latent == w);
    CHECK(norm_loss(r.offset) == 0.0);
  }

  TEST_CASE("text edits touch only the medium group and patch edits only the fine group") {
    const auto& bb = test::toy_backbones();
    const AttributeVocabulary vocab;
    for (std::uint64_t s = 0; s < 50; ++s) {
      CAPTURE(s);
      const MapperWeights m = perturbed_mapper(100 + s);
      const LatentCode w = test::random_latent(200 + s);
      Rng rng(s);

      EditCondition text;
      if (s % 3 != 1) text.text_upper = vocab.upper[rng.index(vocab.upper.size())];
      if (s % 3 != 0) text.text_lower = vocab.lower[rng.index(vocab.lower.size())];
      const EditResult rt = edit(w, text, m, bb);
      CHECK(rt.latent.group(Group::Coarse) == w.group(Group::Coarse));
      CHECK(rt.latent.group(Group::Fine) == w.group(Group::Fine));
      CHECK(rt.latent.group(Group::Medium) != w.group(Group::Medium));

      EditCondition patch;
      if (s % 3 != 1) patch.patch_upper = test::random_image(16, 16, 300 + s);
      if (s % 3 != 0) patch.patch_lower = test::random_image(16, 16, 400 + s);
      const EditResult rp = edit(w, patch, m, bb);
      CHECK(rp.latent.group(Group::Coarse) == w.group(Group::Coarse));
      CHECK(rp.latent.group(Group::Medium) == w.group(Group::Medium));
      CHECK(rp.latent.group(Group::Fine) != w.group(Group::Fine));
    }
  }

  TEST_CASE("mapper checkpoint round-trips bit-exactly") {
    test::TempDir dir("mapper");
    const MapperWeights m = perturbed_mapper(9);
    NamedTensors extra;
    extra.add("extra", test::random_matrix(2, 2, 4));
    save_mapper(m, dir / "m.ftm", "note: hi\n", &extra);
    std::string meta;
    NamedTensors extra_back;
    const MapperWeights back = load_mapper(dir / "m.ftm", &meta, &extra_back);
    CHECK(back == m);
    CHECK(extra_back == extra);
    CHECK(meta.find("note: hi") != std::string::npos);
    CHECK(load_mapper(dir / "m.ftm") == m);
    std::filesystem::resize_file(dir / "m.ftm", 40);
    CHECK_THROWS_AS(load_mapper(dir / "m.ftm"), FormatError);
  }

  TEST_CASE("mapper weights check their layout") {
    const auto& bb = test::toy_backbones();
    MapperWeights m = MapperWeights::init(mapper_shape(TrainConfig{}, bb), 1);
    NamedTensors p = m.params();
    NamedTensors short_p;
    short_p.add("x", Matrix(1, 1));
    CHECK_THROWS_AS(MapperWeights(m.shape(), short_p), ShapeError);
    MapperShape zero = m.shape();
    zero.blocks = 0;
    CHECK_THROWS_AS(MapperWeights(zero, p), ConfigError);
  }
}
