#pragma once

// Reference implementations written as plain loops, independent of the
// library kernels and the autodiff tape.

#include <array>
#include <cmath>
#include <vector>

namespace ftex::oracle {

// Per row v of W (rows x d): beta + gamma * (v - mean) / (std + eps), with
// gamma = gw e + gb and beta = bw e + bb; gw, bw are d x k row-major.
inline std::vector<double> modulate(const std::vector<double>& w, std::size_t rows, std::size_t d,
                                    const std::vector<double>& e, const std::vector<double>& gw,
                                    const std::vector<double>& gb, const std::vector<double>& bw,
                                    const std::vector<double>& bb, double eps) {
  const std::size_t k = e.size();
  std::vector<double> gamma(d), beta(d);
  for (std::size_t i = 0; i < d; ++i) {
    double g = gb[i], b = bb[i];
    for (std::size_t j = 0; j < k; ++j) {
      g += gw[i * k + j] * e[j];
      b += bw[i * k + j] * e[j];
    }
    gamma[i] = g;
    beta[i] = b;
  }
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += w[r * d + i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (w[r * d + i] - mean) * (w[r * d + i] - mean);
    const double sd = std::sqrt(var / static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = beta[i] + gamma[i] * (w[r * d + i] - mean) / (sd + eps);
  }
  return out;
}

// G[a][b] = scale * sum_p F[a][p] F[b][p]
inline std::vector<double> gram(const std::vector<double>& f, std::size_t c, std::size_t n, double scale) {
  std::vector<double> g(c * c, 0.0);
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = 0; b < c; ++b) {
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) s += f[a * n + p] * f[b * n + p];
      g[a * c + b] = scale * s;
    }
  return g;
}

inline double l1(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

struct NamedLab {
  const char* name;
  int r, g, b;
  double l, a, bb;
};

// sRGB (D65, 2 degree observer) to CIELAB, computed with an external
// colorimetry package and frozen.
inline constexpr std::array<NamedLab, 10> kNamedColors{{
    {"black", 0, 0, 0, 0.000000, 0.000000, 0.000000},
    {"white", 255, 255, 255, 100.000000, -0.002455, 0.004653},
    {"red", 255, 0, 0, 53.240588, 80.092308, 67.202751},
    {"green", 0, 128, 0, 46.227658, -51.698683, 49.897076},
    {"blue", 0, 0, 255, 32.295673, 79.185591, -107.857300},
    {"yellow", 255, 255, 0, 97.139507, -21.554681, 94.478122},
    {"cyan", 0, 255, 255, 91.113301, -48.090596, -14.126330},
    {"magenta", 255, 0, 255, 60.323507, 98.233054, -60.821015},
    {"gray", 128, 128, 128, 53.585013, -0.001473, 0.002791},
    {"skin", 224, 172, 105, 73.788508, 11.276711, 41.533713},
}};

}  // namespace ftex::oracle
