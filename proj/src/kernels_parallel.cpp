#include <algorithm>
#include <atomic>

#include "ftex/kernels.hpp"

namespace ftex::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::Parallel};

inline std::size_t clampi(std::ptrdiff_t v, std::size_t hi) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(hi) - 1));
}

// Skip thread start-up for tiny problems.
constexpr std::size_t kMinParallelWork = 1u << 14;
}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) { g_backend.store(b, std::memory_order_relaxed); }

namespace parallel {

void synth(std::span<const double> coef, std::span<const double> basis, std::span<const double> bias,
           std::span<double> out) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(out.size());
  const std::size_t k_count = coef.size();
#pragma omp parallel for schedule(static) if (out.size() * k_count > kMinParallelWork)
  for (std::ptrdiff_t i = 0; i < p; ++i) {
    double acc = bias[i];
    for (std::size_t k = 0; k < k_count; ++k) acc += coef[k] * basis[k * out.size() + i];
    out[i] = acc;
  }
}

void synth_grad_coef(std::span<const double> basis, std::span<const double> grad_out, std::span<double> grad_coef) {
  const std::size_t p = grad_out.size();
  const std::ptrdiff_t k_count = static_cast<std::ptrdiff_t>(grad_coef.size());
#pragma omp parallel for schedule(static) if (p * grad_coef.size() > kMinParallelWork)
  for (std::ptrdiff_t k = 0; k < k_count; ++k) {
    const double* b = basis.data() + k * p;
    double acc = 0.0;
    for (std::size_t i = 0; i < p; ++i) acc += b[i] * grad_out[i];
    grad_coef[k] += acc;
  }
}

void matvec(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> x, std::span<double> y) {
#pragma omp parallel for schedule(static) if (m * n > kMinParallelWork)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += a[i * n + j] * x[j];
    y[i] = acc;
  }
}

void matvec_t(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> grad_y,
              std::span<double> grad_x) {
#pragma omp parallel for schedule(static) if (m * n > kMinParallelWork)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(n); ++j) {
    double acc = grad_x[j];
    for (std::size_t i = 0; i < m; ++i) acc += a[i * n + j] * grad_y[i];
    grad_x[j] = acc;
  }
}

void conv3x3(const ConvShape& s, std::span<const double> in, std::span<const double> weight,
             std::span<const double> bias, std::span<double> out) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(s.out_channels * h);
#pragma omp parallel for schedule(static) if (s.out_channels * hw * s.in_channels * 9 > kMinParallelWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::size_t co = static_cast<std::size_t>(r) / h;
    const std::size_t y = static_cast<std::size_t>(r) % h;
    for (std::size_t x = 0; x < w; ++x) {
      double acc = bias[co];
      for (std::size_t ci = 0; ci < s.in_channels; ++ci)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t yy = clampi(static_cast<std::ptrdiff_t>(y) + dy, h);
            const std::size_t xx = clampi(static_cast<std::ptrdiff_t>(x) + dx, w);
            acc += weight[((co * s.in_channels + ci) * 3 + (dy + 1)) * 3 + (dx + 1)] * in[ci * hw + yy * w + xx];
          }
      out[co * hw + y * w + x] = acc;
    }
  }
}

void conv3x3_grad_input(const ConvShape& s, std::span<const double> weight, std::span<const double> grad_out,
                        std::span<double> grad_in) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
#pragma omp parallel for schedule(static) if (s.out_channels * hw * s.in_channels * 9 > kMinParallelWork)
  for (std::ptrdiff_t cis = 0; cis < static_cast<std::ptrdiff_t>(s.in_channels); ++cis) {
    const std::size_t ci = static_cast<std::size_t>(cis);
    for (std::size_t co = 0; co < s.out_channels; ++co)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double g = grad_out[co * hw + y * w + x];
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const std::size_t yy = clampi(static_cast<std::ptrdiff_t>(y) + dy, h);
              const std::size_t xx = clampi(static_cast<std::ptrdiff_t>(x) + dx, w);
              grad_in[ci * hw + yy * w + xx] += weight[((co * s.in_channels + ci) * 3 + (dy + 1)) * 3 + (dx + 1)] * g;
            }
        }
  }
}

void conv3x3_grad_weight(const ConvShape& s, std::span<const double> in, std::span<const double> grad_out,
                         std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
#pragma omp parallel for schedule(static) if (s.out_channels * hw * s.in_channels * 9 > kMinParallelWork)
  for (std::ptrdiff_t cos = 0; cos < static_cast<std::ptrdiff_t>(s.out_channels); ++cos) {
    const std::size_t co = static_cast<std::size_t>(cos);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = grad_out[co * hw + y * w + x];
        grad_bias[co] += g;
        for (std::size_t ci = 0; ci < s.in_channels; ++ci)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const std::size_t yy = clampi(static_cast<std::ptrdiff_t>(y) + dy, h);
              const std::size_t xx = clampi(static_cast<std::ptrdiff_t>(x) + dx, w);
              grad_weight[((co * s.in_channels + ci) * 3 + (dy + 1)) * 3 + (dx + 1)] += g * in[ci * hw + yy * w + xx];
            }
      }
  }
}

void gram(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<double> g) {
#pragma omp parallel for schedule(static) if (c * c * n > kMinParallelWork)
  for (std::ptrdiff_t is = 0; is < static_cast<std::ptrdiff_t>(c); ++is) {
    const std::size_t i = static_cast<std::size_t>(is);
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += f[i * n + k] * f[j * n + k];
      g[i * c + j] = scale * acc;
    }
  }
}

void gram_grad(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<const double> grad_g,
               std::span<double> grad_f) {
#pragma omp parallel for schedule(static) if (c * c * n > kMinParallelWork)
  for (std::ptrdiff_t is = 0; is < static_cast<std::ptrdiff_t>(c); ++is) {
    const std::size_t i = static_cast<std::size_t>(is);
    for (std::size_t j = 0; j < c; ++j) {
      const double s = scale * (grad_g[i * c + j] + grad_g[j * c + i]);
      for (std::size_t k = 0; k < n; ++k) grad_f[i * n + k] += s * f[j * n + k];
    }
  }
}

}  // namespace parallel

#define FTEX_DISPATCH(name, ...) \
  (backend() == Backend::Parallel ? parallel::name(__VA_ARGS__) : serial::name(__VA_ARGS__))

void synth(std::span<const double> coef, std::span<const double> basis, std::span<const double> bias,
           std::span<double> out) {
  FTEX_DISPATCH(synth, coef, basis, bias, out);
}
void synth_grad_coef(std::span<const double> basis, std::span<const double> grad_out, std::span<double> grad_coef) {
  FTEX_DISPATCH(synth_grad_coef, basis, grad_out, grad_coef);
}
void matvec(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> x, std::span<double> y) {
  FTEX_DISPATCH(matvec, a, m, n, x, y);
}
void matvec_t(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> grad_y,
              std::span<double> grad_x) {
  FTEX_DISPATCH(matvec_t, a, m, n, grad_y, grad_x);
}
void conv3x3(const ConvShape& s, std::span<const double> in, std::span<const double> weight,
             std::span<const double> bias, std::span<double> out) {
  FTEX_DISPATCH(conv3x3, s, in, weight, bias, out);
}
void conv3x3_grad_input(const ConvShape& s, std::span<const double> weight, std::span<const double> grad_out,
                        std::span<double> grad_in) {
  FTEX_DISPATCH(conv3x3_grad_input, s, weight, grad_out, grad_in);
}
void conv3x3_grad_weight(const ConvShape& s, std::span<const double> in, std::span<const double> grad_out,
                         std::span<double> grad_weight, std::span<double> grad_bias) {
  FTEX_DISPATCH(conv3x3_grad_weight, s, in, grad_out, grad_weight, grad_bias);
}
void gram(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<double> g) {
  FTEX_DISPATCH(gram, f, c, n, scale, g);
}
void gram_grad(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<const double> grad_g,
               std::span<double> grad_f) {
  FTEX_DISPATCH(gram_grad, f, c, n, scale, grad_g, grad_f);
}

#undef FTEX_DISPATCH

}  // namespace ftex::kernels
