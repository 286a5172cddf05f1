#pragma once

#include <cstddef>
#include <span>

// Dense inner loops shared by the toy backbones and the autodiff tape.
// Every kernel has a serial reference and an OpenMP version. The OpenMP
// versions parallelize over output elements only, so each output is still
// reduced by a single thread and results do not depend on thread count.
namespace ftex::kernels {

enum class Backend { Serial, Parallel };

Backend backend();
void set_backend(Backend b);

struct ConvShape {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t height;
  std::size_t width;
};

#define FTEX_KERNEL_DECLS                                                                                     \
  /* out[p] = bias[p] + sum_k coef[k] * basis[k*P + p] */                                                    \
  void synth(std::span<const double> coef, std::span<const double> basis, std::span<const double> bias,      \
             std::span<double> out);                                                                          \
  /* grad_coef[k] += sum_p basis[k*P + p] * grad_out[p] */                                                   \
  void synth_grad_coef(std::span<const double> basis, std::span<const double> grad_out,                       \
                       std::span<double> grad_coef);                                                          \
  /* y = A x, A is m x n row-major */                                                                        \
  void matvec(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> x,            \
              std::span<double> y);                                                                           \
  /* grad_x += A^T grad_y */                                                                                 \
  void matvec_t(std::span<const double> a, std::size_t m, std::size_t n, std::span<const double> grad_y,     \
                std::span<double> grad_x);                                                                    \
  /* 3x3 convolution, stride 1, replicate padding */                                                         \
  void conv3x3(const ConvShape& s, std::span<const double> in, std::span<const double> weight,               \
               std::span<const double> bias, std::span<double> out);                                         \
  void conv3x3_grad_input(const ConvShape& s, std::span<const double> weight, std::span<const double> grad_out, \
                          std::span<double> grad_in);                                                         \
  void conv3x3_grad_weight(const ConvShape& s, std::span<const double> in, std::span<const double> grad_out,  \
                           std::span<double> grad_weight, std::span<double> grad_bias);                       \
  /* G = scale * F F^T, F is c x n */                                                                        \
  void gram(std::span<const double> f, std::size_t c, std::size_t n, double scale, std::span<double> g);     \
  /* grad_f += scale * (grad_g + grad_g^T) F */                                                              \
  void gram_grad(std::span<const double> f, std::size_t c, std::size_t n, double scale,                      \
                 std::span<const double> grad_g, std::span<double> grad_f);

namespace serial {
FTEX_KERNEL_DECLS
}
namespace parallel {
FTEX_KERNEL_DECLS
}
// Dispatch to backend().
FTEX_KERNEL_DECLS

#undef FTEX_KERNEL_DECLS

}  // namespace ftex::kernels
