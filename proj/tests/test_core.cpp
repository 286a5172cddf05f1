#include <doctest.h>

#include <cmath>
#include <functional>

#include "ftex/autodiff.hpp"
#include "ftex/image.hpp"
#include "ftex/kernels.hpp"
#include "ftex/tensor_file.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ftex;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

// Central differences of f at x against the tape gradient.
double max_grad_error(const std::function<ad::Var(ad::Var)>& f, std::vector<double> x, const ad::Shape& shape,
                      double h = 1e-6) {
  ad::Tape tape;
  const ad::Var v = tape.variable(x, shape);
  const ad::Var out = f(v);
  tape.backward(out);
  const std::vector<double> g(tape.grad(v).begin(), tape.grad(v).end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    auto eval = [&](double xi) {
      x[i] = xi;
      ad::Tape t;
      return f(t.constant(x, shape)).scalar();
    };
    const double fd = (eval(keep + h) - eval(keep - h)) / (2 * h);
    x[i] = keep;
    worst = std::max(worst, std::abs(fd - g[i]) / std::max(1e-4, std::abs(fd) + std::abs(g[i])));
  }
  return worst;
}

}  // namespace

TEST_SUITE("core") {
  TEST_CASE("rng streams are reproducible and independent") {
    Rng a(5), b(5), c(derive_seed(5, "other"));
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    CHECK(Rng(5).next() != c.next());
    CHECK(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
    Rng r(9);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double z = r.normal();
      s += z;
      s2 += z * z;
    }
    CHECK(std::abs(s / n) < 0.03);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
  }

  TEST_CASE("matrix payload must match its shape") {
    CHECK_THROWS_AS(Matrix(2, 3, std::vector<float>(5)), ShapeError);
    Matrix m(2, 3, 1.5f);
    CHECK(m(1, 2) == 1.5f);
    CHECK(m.shape_string() == "2x3");
  }

  TEST_CASE("named tensors keep insertion order and reject duplicates") {
    NamedTensors t;
    t.add("b", Matrix(1, 1));
    t.add("a", Matrix(2, 2));
    CHECK(t[0].first == "b");
    CHECK(t.total_elements() == 5);
    CHECK_THROWS(t.add("a", Matrix(1, 1)));
    CHECK_THROWS(t.at("zz"));
  }

  TEST_CASE("tensor container round-trips bit-exactly") {
    test::TempDir dir("container");
    NamedTensors t;
    t.add("w", test::random_matrix(3, 4, 1));
    t.add("b", Matrix(1, 4, std::vector<float>{-0.0f, 1e-38f, 3.4e38f, 0.1f}));
    save_container(dir / "x.ftm", t, "key: value\n");
    const TensorContainer back = load_container(dir / "x.ftm");
    CHECK(back.tensors == t);
    CHECK(back.meta == "key: value\n");
  }

  TEST_CASE("truncated container is a format error") {
    test::TempDir dir("container_bad");
    NamedTensors t;
    t.add("w", test::random_matrix(3, 4, 1));
    save_container(dir / "x.ftm", t);
    std::filesystem::resize_file(dir / "x.ftm", 20);
    CHECK_THROWS_AS(load_container(dir / "x.ftm"), FormatError);
  }

  TEST_CASE("png and base64 round-trip") {
    Image img(5, 7);
    for (std::size_t i = 0; i < img.data().size(); ++i) img.data()[i] = static_cast<float>(i % 256) / 255.0f;
    const Image back = decode_png(encode_png(img));
    CHECK(back == img);
    const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255, 13};
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
    CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a'}) == "TWE=");
    CHECK_THROWS_AS(decode_png(std::vector<std::uint8_t>{1, 2, 3}), FormatError);
  }

  TEST_CASE("area resize averages covered pixels") {
    Image img(2, 2);
    img.at(0, 0, 0) = 0.0f;
    img.at(0, 0, 1) = 1.0f;
    img.at(0, 1, 0) = 0.5f;
    img.at(0, 1, 1) = 0.5f;
    const Image r = resize_area(img, 1, 1);
    CHECK(r.at(0, 0, 0) == doctest::Approx(0.5));
  }

  TEST_CASE("serial and parallel kernels agree bit-exactly") {
    const std::size_t c = 6, n = 50;
    const auto f = normals(c * n, 1);
    std::vector<double> g1(c * c), g2(c * c);
    kernels::serial::gram(f, c, n, 0.5, g1);
    kernels::parallel::gram(f, c, n, 0.5, g2);
    CHECK(g1 == g2);

    const kernels::ConvShape s{3, 4, 9, 11};
    const auto in = normals(3 * 9 * 11, 2);
    const auto w = normals(4 * 3 * 9, 3);
    const auto b = normals(4, 4);
    std::vector<double> o1(4 * 9 * 11), o2(o1.size());
    kernels::serial::conv3x3(s, in, w, b, o1);
    kernels::parallel::conv3x3(s, in, w, b, o2);
    CHECK(o1 == o2);

    const auto go = normals(o1.size(), 5);
    std::vector<double> gi1(in.size(), 0.0), gi2(in.size(), 0.0), gw1(w.size(), 0.0), gw2(w.size(), 0.0), gb1(4, 0.0),
        gb2(4, 0.0);
    kernels::serial::conv3x3_grad_input(s, w, go, gi1);
    kernels::parallel::conv3x3_grad_input(s, w, go, gi2);
    kernels::serial::conv3x3_grad_weight(s, in, go, gw1, gb1);
    kernels::parallel::conv3x3_grad_weight(s, in, go, gw2, gb2);
    CHECK(gi1 == gi2);
    CHECK(gw1 == gw2);
    CHECK(gb1 == gb2);

    const auto a = normals(7 * 13, 6);
    const auto x = normals(13, 7);
    std::vector<double> y1(7), y2(7);
    kernels::serial::matvec(a, 7, 13, x, y1);
    kernels::parallel::matvec(a, 7, 13, x, y2);
    CHECK(y1 == y2);

    const auto coef = normals(5, 8);
    const auto basis = normals(5 * 40, 9);
    const auto bias = normals(40, 10);
    std::vector<double> s1(40), s2(40);
    kernels::serial::synth(coef, basis, bias, s1);
    kernels::parallel::synth(coef, basis, bias, s2);
    CHECK(s1 == s2);
  }

  TEST_CASE("gram kernel matches the loop oracle") {
    const auto f = normals(4 * 9, 11);
    std::vector<double> g(16);
    kernels::gram(f, 4, 9, 1.0 / 36.0, g);
    const auto ref = oracle::gram(f, 4, 9, 1.0 / 36.0);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }

  TEST_CASE("autodiff gradients match central differences") {
    const double tol = 1e-5;
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::tanh(x)); }, normals(6, 1), {6}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::sigmoid(ad::scale(x, 3.0))); }, normals(6, 2), {6}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::l2_norm(x); }, normals(6, 3), {6}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::l1_norm(x); }, normals(6, 4), {6}) < tol);
    CHECK(max_grad_error(
              [](ad::Var x) {
                ad::Tape& t = x.tape();
                return ad::cosine_distance(x, t.constant(normals(6, 50), {6}));
              },
              normals(6, 5), {6}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::mul(ad::standardize_rows(x, 1e-5), ad::standardize_rows(x, 1e-5))); },
                         normals(12, 6), {3, 4}) < 1e-4);
    CHECK(max_grad_error(
              [](ad::Var x) {
                ad::Tape& t = x.tape();
                return ad::sum(ad::mul(ad::center_rows(x), t.constant(normals(12, 60), {3, 4})));
              },
              normals(12, 7), {3, 4}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::gram(x, 0.25)); }, normals(12, 8), {3, 4}) < tol);
    CHECK(max_grad_error(
              [](ad::Var x) {
                ad::Tape& t = x.tape();
                const ad::Var w = t.constant(normals(2 * 3 * 9, 70, 0.3), {2, 3, 3, 3});
                const ad::Var b = t.constant(normals(2, 71), {2});
                return ad::sum(ad::tanh(ad::conv3x3(x, w, b)));
              },
              normals(3 * 5 * 6, 9), {3, 5, 6}) < tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::rgb_to_lab(ad::sigmoid(x))); }, normals(3 * 2 * 2, 10), {3, 2, 2}) <
          1e-4);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::resample_area(x, 2, 3)); }, normals(3 * 5 * 7, 11), {3, 5, 7}) <
          tol);
    CHECK(max_grad_error([](ad::Var x) { return ad::sum(ad::mul(ad::avg_pool2(x), ad::avg_pool2(x))); }, normals(3 * 4 * 4, 12),
                         {3, 4, 4}) < tol);
  }

  TEST_CASE("tape rejects shape mismatches") {
    ad::Tape t;
    const ad::Var a = t.constant(std::vector<double>(3, 1.0), {3});
    const ad::Var b = t.constant(std::vector<double>(4, 1.0), {4});
    CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  }
}
