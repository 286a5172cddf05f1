#include <benchmark/benchmark.h>

#include <vector>

#include "ftex/kernels.hpp"
#include "ftex/rng.hpp"

namespace k = ftex::kernels;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed) {
  ftex::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Features of a 16-channel level over a 64x64 crop.
template <bool Parallel>
void BM_Gram(benchmark::State& st) {
  const std::size_t c = static_cast<std::size_t>(st.range(0)), n = 4096;
  const auto f = normals(c * n, 1);
  std::vector<double> g(c * c);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::gram(f, c, n, 1.0, g);
    } else {
      k::serial::gram(f, c, n, 1.0, g);
    }
    benchmark::DoNotOptimize(g.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * c * c * n));
}

template <bool Parallel>
void BM_Conv3x3(benchmark::State& st) {
  const std::size_t side = static_cast<std::size_t>(st.range(0));
  const k::ConvShape s{8, 16, side, side};
  const auto in = normals(8 * side * side, 2);
  const auto w = normals(16 * 8 * 9, 3);
  const auto b = normals(16, 4);
  std::vector<double> out(16 * side * side);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::conv3x3(s, in, w, b, out);
    } else {
      k::serial::conv3x3(s, in, w, b, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * out.size() * 8 * 9));
}

template <bool Parallel>
void BM_Conv3x3GradWeight(benchmark::State& st) {
  const std::size_t side = static_cast<std::size_t>(st.range(0));
  const k::ConvShape s{8, 16, side, side};
  const auto in = normals(8 * side * side, 5);
  const auto go = normals(16 * side * side, 6);
  std::vector<double> gw(16 * 8 * 9), gb(16);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::conv3x3_grad_weight(s, in, go, gw, gb);
    } else {
      k::serial::conv3x3_grad_weight(s, in, go, gw, gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

// Generator layer synthesis: 32 bases over a 3x64x64 image.
template <bool Parallel>
void BM_Synth(benchmark::State& st) {
  const std::size_t kb = 32, p = 3 * 64 * 64;
  const auto coef = normals(kb, 7);
  const auto basis = normals(kb * p, 8);
  const auto bias = normals(p, 9);
  std::vector<double> out(p);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::synth(coef, basis, bias, out);
    } else {
      k::serial::synth(coef, basis, bias, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Matvec(benchmark::State& st) {
  const std::size_t m = static_cast<std::size_t>(st.range(0)), n = 512;
  const auto a = normals(m * n, 10);
  const auto x = normals(n, 11);
  std::vector<double> y(m);
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::matvec(a, m, n, x, y);
    } else {
      k::serial::matvec(a, m, n, x, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gram<false>)->Name("gram/serial")->Arg(8)->Arg(16);
BENCHMARK(BM_Gram<true>)->Name("gram/parallel")->Arg(8)->Arg(16);
BENCHMARK(BM_Conv3x3<false>)->Name("conv3x3/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_Conv3x3<true>)->Name("conv3x3/parallel")->Arg(32)->Arg(64);
BENCHMARK(BM_Conv3x3GradWeight<false>)->Name("conv3x3_grad_weight/serial")->Arg(64);
BENCHMARK(BM_Conv3x3GradWeight<true>)->Name("conv3x3_grad_weight/parallel")->Arg(64);
BENCHMARK(BM_Synth<false>)->Name("synth/serial");
BENCHMARK(BM_Synth<true>)->Name("synth/parallel");
BENCHMARK(BM_Matvec<false>)->Name("matvec/serial")->Arg(512)->Arg(4096);
BENCHMARK(BM_Matvec<true>)->Name("matvec/parallel")->Arg(512)->Arg(4096);

BENCHMARK_MAIN();
