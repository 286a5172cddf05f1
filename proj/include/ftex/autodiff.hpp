#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ftex/tensor.hpp"

// Tensor-level reverse-mode differentiation in double precision.
//
// A Tape records values in creation order; backward() walks it in reverse.
// Nodes that do not depend on any variable carry no gradient buffer and are
// skipped. A Tape is single-threaded; use one per thread.
namespace ftex::ad {

using Shape = std::vector<std::size_t>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  std::span<const double> value() const;
  const Shape& shape() const;
  std::size_t size() const { return value().size(); }
  double scalar() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(std::vector<double> values, Shape shape);
  Var variable(std::vector<double> values, Shape shape);
  Var constant(const Matrix& m);
  Var variable(const Matrix& m);
  // Shares the buffer instead of copying it.
  Var constant(std::shared_ptr<const std::vector<double>> values, Shape shape);

  // Records an op result. `back` runs only when `requires_grad` is true.
  Var record(std::vector<double> values, Shape shape, bool requires_grad, Backward back);

  // Seeds d(out)/d(out) = 1 for a scalar and propagates to every variable.
  void backward(Var out);

  std::span<const double> value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.shared ? std::span<const double>(*n.shared) : std::span<const double>(n.value);
  }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Empty for nodes without a gradient buffer.
  std::span<double> grad(std::size_t id) { return nodes_[id].grad; }
  std::span<const double> grad(Var v) const { return nodes_[v.id()].grad; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<double> value;
    std::shared_ptr<const std::vector<double>> shared;
    std::vector<double> grad;
    Shape shape;
    bool requires_grad = false;
    Backward back;
  };
  std::vector<Node> nodes_;
};

std::size_t numel(const Shape& s);

// Elementwise.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var leaky_relu(Var a, double slope);
Var reshape(Var a, Shape s);

// Reductions.
Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);
Var l1_norm(Var a);
// Euclidean norm; the subgradient at 0 is taken as 0.
Var l2_norm(Var a);
Var mean_squared_diff(Var a, Var b);
// 1 - cos(a, b). Throws NumericError on a zero-norm input.
Var cosine_distance(Var a, Var b);

// Linear algebra.
// y = W x + b with W [m x n], x [n], b [m] (b may be invalid Var for no bias).
Var linear(Var w, Var x, Var b);
// Per-row standardization of X [r x c]: (x - mean) / (std + eps), population std.
Var standardize_rows(Var x, double eps);
// Subtracts each row's mean from X [r x c].
Var center_rows(Var x);
// out[r, :] = beta + gamma * x[r, :] for x [r x c], gamma/beta [c].
Var affine_rows(Var x, Var gamma, Var beta);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
// Concatenates along the first axis; trailing dims must agree.
Var concat_rows(std::span<const Var> parts);
// out[l*K + k] = sum_d A[(l*K + k), d] * x[l, d] * s for A [L*K x D], x [L x D].
Var blockwise_project(Var a, Var x, std::size_t per_layer, double s);
// out = bias + sum_k coef[k] * basis[k, :] with basis [K x P], bias [P].
Var synthesize(Var coef, Var basis, Var bias);

// Images and feature maps, layout [C x H x W].
Var conv3x3(Var x, Var weight, Var bias);
Var avg_pool2(Var x);
// Box resample to [C x out_h x out_w].
Var resample_area(Var x, std::size_t out_h, std::size_t out_w);
Var crop(Var x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);
// Multiplies every channel by a fixed H x W mask.
Var mask(Var x, std::span<const std::uint8_t> m);
// Per-channel mean over pixels where m is set; throws if the mask is empty.
Var masked_channel_mean(Var x, std::span<const std::uint8_t> m);
// Gram matrix of F [C x N] scaled by `scale`.
Var gram(Var f, double scale);
// sRGB [3 x H x W] in [0,1] to CIE L*a*b* (D65).
Var rgb_to_lab(Var x);

}  // namespace ftex::ad
