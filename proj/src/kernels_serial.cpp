#include <algorithm>

#include "ftex/kernels.hpp"

namespace ftex::kernels::serial {

void synth(std::span<const double> coef, std::span<const double> basis, std::span<const double> bias,
           std::span<double> out) {
  const std::size_t p = out.size();
  for (std::size_t i = 0; i < p; ++i) out[i] = bias[i];
  for (std::size_t k = 0; k < coef.size(); ++k) {
    const double c = coef[k];
    const double* b = basis.data() + k * p;
    for (std::size_t i = 0; i < p; ++i) out[i] += c * b[i];
  }
}

void synth_grad_coef(std::span<const double> basis, std::span<const double> grad_out, std::span<double> grad_coef) {
  const std::size_t p = grad_out.size();
  for (std::size_t k = 0; k < grad_coef.size(); ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p; ++i) acc += basis[k * p + i] * grad_out[i];
    grad_coef[k] += acc;
  }
}

void matvec(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += a[i * n + j] * x[j];
    y[i] = acc;
  }
}

void matvec_t(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> grad_y,
              std::span<double> grad_x) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) grad_x[j] += a[i * n + j] * grad_y[i];
}

namespace {
inline std::size_t clampi(std::ptrdiff_t v, std::size_t hi) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(hi) - 1));
}
}  // namespace

void conv3x3(const ConvShape& s, std::span<const double> in, std::span<const double> weight,
             std::span<const double> bias, std::span<double> out) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
  for (std::size_t co = 0; co < s.out_channels; ++co)
    for (std::size_t y = 0; y < h; ++y)
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

void conv3x3_grad_input(const ConvShape& s, std::span<const double> weight, std::span<const double> grad_out,
                        std::span<double> grad_in) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
  for (std::size_t co = 0; co < s.out_channels; ++co)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = grad_out[co * hw + y * w + x];
        for (std::size_t ci = 0; ci < s.in_channels; ++ci)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const std::size_t yy = clampi(static_cast<std::ptrdiff_t>(y) + dy, h);
              const std::size_t xx = clampi(static_cast<std::ptrdiff_t>(x) + dx, w);
              grad_in[ci * hw + yy * w + xx] += weight[((co * s.in_channels + ci) * 3 + (dy + 1)) * 3 + (dx + 1)] * g;
            }
      }
}

void conv3x3_grad_weight(const ConvShape& s, std::span<const double> in, std::span<const double> grad_out,
                         std::span<double> grad_weight, std::span<double> grad_bias) {
  const std::size_t h = s.height, w = s.width, hw = h * w;
  for (std::size_t co = 0; co < s.out_channels; ++co)
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

void gram(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<double> g) {
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += f[i * n + k] * f[j * n + k];
      g[i * c + j] = scale * acc;
    }
}

void gram_grad(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<const double> grad_g,
               std::span<double> grad_f) {
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double s = scale * (grad_g[i * c + j] + grad_g[j * c + i]);
      for (std::size_t k = 0; k < n; ++k) grad_f[i * n + k] += s * f[j * n + k];
    }
}

}  // namespace ftex::kernels::serial
