#include "ftex/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "ftex/error.hpp"
#include "ftex/kernels.hpp"

namespace ftex::ad {

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::span<const double> Var::value() const { return tape_->value(id_); }
const Shape& Var::shape() const { return tape_->shape(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::scalar() const {
  if (size() != 1) throw ShapeError("expected a scalar, got " + std::to_string(size()) + " elements");
  return value()[0];
}

Var Tape::constant(std::vector<double> values, Shape shape) { return record(std::move(values), std::move(shape), false, {}); }

Var Tape::variable(std::vector<double> values, Shape shape) { return record(std::move(values), std::move(shape), true, {}); }

Var Tape::constant(const Matrix& m) { return constant({m.data.begin(), m.data.end()}, {m.rows, m.cols}); }
Var Tape::variable(const Matrix& m) { return variable({m.data.begin(), m.data.end()}, {m.rows, m.cols}); }

Var Tape::constant(std::shared_ptr<const std::vector<double>> values, Shape shape) {
  if (!values || numel(shape) != values->size()) throw ShapeError("tape value does not match its shape");
  Node n;
  n.shape = std::move(shape);
  n.shared = std::move(values);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::vector<double> values, Shape shape, bool requires_grad, Backward back) {
  if (numel(shape) != values.size()) throw ShapeError("tape value does not match its shape");
  Node n;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  if (requires_grad) {
    n.grad.assign(values.size(), 0.0);
    n.back = std::move(back);
  }
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var out) {
  if (&out.tape() != this) throw Error("variable belongs to a different tape");
  if (out.size() != 1) throw ShapeError("backward() needs a scalar output");
  if (!nodes_[out.id()].requires_grad) return;
  nodes_[out.id()].grad[0] += 1.0;
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.back) continue;
    if (std::all_of(n.grad.begin(), n.grad.end(), [](double g) { return g == 0.0; })) continue;
    n.back(*this, i);
  }
}

namespace {

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("variables belong to different tapes");
}

void require_same_size(Var a, Var b, const char* op) {
  require_same_tape(a, b);
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": size mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

std::vector<double> copy_of(Var v) { return {v.value().begin(), v.value().end()}; }

// Accumulates into the gradient of `id` if it has one.
template <class F>
void accumulate(Tape& t, std::size_t id, F&& f) {
  auto g = t.grad(id);
  if (!g.empty()) f(g);
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  auto av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), a.shape(), a.requires_grad(), [ia, deriv](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    auto x = t.value(ia);
    auto y = t.value(self);
    accumulate(t, ia, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * deriv(x[i], y[i]);
    });
  });
}

std::size_t channels_of(const Shape& s) {
  if (s.size() != 3) throw ShapeError("expected a [C x H x W] tensor");
  return s[0];
}

}  // namespace

Var add(Var a, Var b) {
  require_same_size(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.shape(), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::size_t self) {
                           auto go = t.grad(self);
                           accumulate(t, ia, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
                           });
                           accumulate(t, ib, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
                           });
                         });
}

Var sub(Var a, Var b) {
  require_same_size(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.shape(), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::size_t self) {
                           auto go = t.grad(self);
                           accumulate(t, ia, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
                           });
                           accumulate(t, ib, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
                           });
                         });
}

Var mul(Var a, Var b) {
  require_same_size(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), a.shape(), a.requires_grad() || b.requires_grad(),
                         [ia, ib](Tape& t, std::size_t self) {
                           auto go = t.grad(self);
                           auto av = t.value(ia);
                           auto bv = t.value(ib);
                           accumulate(t, ia, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i];
                           });
                           accumulate(t, ib, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
                           });
                         });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(Var a, double slope) {
  return unary(a, [slope](double x) { return x >= 0.0 ? x : slope * x; },
               [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

Var reshape(Var a, Shape s) {
  if (numel(s) != a.size()) throw ShapeError("reshape changes element count");
  const std::size_t ia = a.id();
  return a.tape().record(copy_of(a), std::move(s), a.requires_grad(), [ia](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ia, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    });
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record({s}, {1}, a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const double go = t.grad(self)[0];
    accumulate(t, ia, [&](std::span<double> g) {
      for (double& x : g) x += go;
    });
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var dot(Var a, Var b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value()[i] * b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record({s}, {1}, a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
    const double go = t.grad(self)[0];
    auto av = t.value(ia);
    auto bv = t.value(ib);
    accumulate(t, ia, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * bv[i];
    });
    accumulate(t, ib, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * av[i];
    });
  });
}

Var l1_norm(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += std::abs(v);
  const std::size_t ia = a.id();
  return a.tape().record({s}, {1}, a.requires_grad(), [ia](Tape& t, std::size_t self) {
    const double go = t.grad(self)[0];
    auto av = t.value(ia);
    accumulate(t, ia, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0));
    });
  });
}

Var l2_norm(Var a) {
  double s = 0.0;
  for (double v : a.value()) s += v * v;
  const double n = std::sqrt(s);
  const std::size_t ia = a.id();
  return a.tape().record({n}, {1}, a.requires_grad(), [ia, n](Tape& t, std::size_t self) {
    if (n == 0.0) return;
    const double go = t.grad(self)[0] / n;
    auto av = t.value(ia);
    accumulate(t, ia, [&](std::span<double> g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * av[i];
    });
  });
}

Var mean_squared_diff(Var a, Var b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

Var cosine_distance(Var a, Var b) {
  require_same_size(a, b, "cosine_distance");
  auto av = a.value();
  auto bv = b.value();
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ab += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  if (aa == 0.0 || bb == 0.0) throw NumericError("cosine distance of a zero-norm vector");
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double cos = ab / std::sqrt(aa * bb);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record({1.0 - cos}, {1}, a.requires_grad() || b.requires_grad(),
                         [ia, ib, na, nb, cos](Tape& t, std::size_t self) {
                           const double go = t.grad(self)[0];
                           auto av = t.value(ia);
                           auto bv = t.value(ib);
                           // d cos / da = b/(|a||b|) - cos a/|a|^2
                           accumulate(t, ia, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] -= go * (bv[i] / (na * nb) - cos * av[i] / (na * na));
                           });
                           accumulate(t, ib, [&](std::span<double> g) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] -= go * (av[i] / (na * nb) - cos * bv[i] / (nb * nb));
                           });
                         });
}

Var linear(Var w, Var x, Var b) {
  require_same_tape(w, x);
  const Shape& ws = w.shape();
  if (ws.size() != 2 || ws[1] != x.size()) throw ShapeError("linear: weight/input shape mismatch");
  const std::size_t m = ws[0], n = ws[1];
  std::vector<double> out(m);
  kernels::matvec(w.value(), m, n, x.value(), out);
  const bool has_bias = b.valid();
  if (has_bias) {
    if (b.size() != m) throw ShapeError("linear: bias shape mismatch");
    for (std::size_t i = 0; i < m; ++i) out[i] += b.value()[i];
  }
  const std::size_t iw = w.id(), ix = x.id(), ib = has_bias ? b.id() : 0;
  const bool rg = w.requires_grad() || x.requires_grad() || (has_bias && b.requires_grad());
  return w.tape().record(std::move(out), {m}, rg, [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    auto wv = t.value(iw);
    auto xv = t.value(ix);
    accumulate(t, iw, [&](std::span<double> g) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[i] * xv[j];
    });
    accumulate(t, ix, [&](std::span<double> g) { kernels::matvec_t(wv, m, n, go, g); });
    if (has_bias) {
      accumulate(t, ib, [&](std::span<double> g) {
        for (std::size_t i = 0; i < m; ++i) g[i] += go[i];
      });
    }
  });
}

Var center_rows(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("center_rows expects a matrix");
  const std::size_t r = s[0], c = s[1];
  auto xv = x.value();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] - mu;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), s, x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t i = 0; i < r; ++i) {
        double mean_go = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean_go += go[i * c + j];
        mean_go /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += go[i * c + j] - mean_go;
      }
    });
  });
}

Var standardize_rows(Var x, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("standardize_rows expects a matrix");
  const std::size_t r = s[0], c = s[1];
  auto xv = x.value();
  std::vector<double> out(r * c);
  std::vector<double> stds(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<double>(c);
    stds[i] = std::sqrt(var);
    const double denom = stds[i] + eps;
    for (std::size_t j = 0; j < c; ++j) {
      const double centered = xv[i * c + j] - mu;
      out[i * c + j] = centered == 0.0 ? 0.0 : centered / denom;
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), s, x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    auto y = t.value(self);
    auto xv = t.value(ix);
    accumulate(t, ix, [&](std::span<double> g) {
      const double n = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        const double sd = stds[i];
        const double denom = sd + eps;
        if (denom == 0.0) continue;
        double mean_go = 0.0, go_dot_centered = 0.0, mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
        mu /= n;
        for (std::size_t j = 0; j < c; ++j) {
          mean_go += go[i * c + j];
          go_dot_centered += go[i * c + j] * (xv[i * c + j] - mu);
        }
        mean_go /= n;
        // y = (x - mu) / (sd + eps); d sd / d x_j = (x_j - mu) / (n sd)
        const double dsd_coeff = sd > 0.0 ? go_dot_centered / (denom * denom * n * sd) : 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          g[i * c + j] += (go[i * c + j] - mean_go) / denom - dsd_coeff * (xv[i * c + j] - mu);
        }
        (void)y;
      }
    });
  });
}

Var affine_rows(Var x, Var gamma, Var beta) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Shape& s = x.shape();
  if (s.size() != 2 || gamma.size() != s[1] || beta.size() != s[1]) throw ShapeError("affine_rows: shape mismatch");
  const std::size_t r = s[0], c = s[1];
  std::vector<double> out(r * c);
  auto xv = x.value();
  auto gv = gamma.value();
  auto bv = beta.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = bv[j] + gv[j] * xv[i * c + j];
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape().record(std::move(out), s, rg, [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    auto xv = t.value(ix);
    auto gv = t.value(ig);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += go[i * c + j] * gv[j];
    });
    accumulate(t, ig, [&](std::span<double> g) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += go[i * c + j] * xv[i * c + j];
    });
    accumulate(t, ib, [&](std::span<double> g) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += go[i * c + j];
    });
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (s.empty() || begin > end || end > s[0]) throw ShapeError("slice_rows: bad range");
  const std::size_t row = x.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  std::vector<double> out(x.value().begin() + static_cast<std::ptrdiff_t>(begin * row),
                          x.value().begin() + static_cast<std::ptrdiff_t>(end * row));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), std::move(out_shape), x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t i = 0; i < go.size(); ++i) g[begin * row + i] += go[i];
    });
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Tape& tape = parts[0].tape();
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> ids, offsets;
  bool rg = false;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const Shape& ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) {
      throw ShapeError("concat_rows: trailing dimensions differ");
    }
    offsets.push_back(out.size());
    ids.push_back(p.id());
    out.insert(out.end(), p.value().begin(), p.value().end());
    rows += ps[0];
    rg = rg || p.requires_grad();
  }
  s[0] = rows;
  return tape.record(std::move(out), std::move(s), rg, [ids, offsets](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      accumulate(t, ids[k], [&](std::span<double> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[offsets[k] + i];
      });
    }
  });
}

Var blockwise_project(Var a, Var x, std::size_t per_layer, double s) {
  require_same_tape(a, x);
  const Shape& xs = x.shape();
  const Shape& as = a.shape();
  if (xs.size() != 2 || as.size() != 2 || as[1] != xs[1] || as[0] != xs[0] * per_layer) {
    throw ShapeError("blockwise_project: shape mismatch");
  }
  const std::size_t layers = xs[0], d = xs[1];
  std::vector<double> out(layers * per_layer);
  auto av = a.value();
  auto xv = x.value();
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t k = 0; k < per_layer; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += av[(l * per_layer + k) * d + j] * xv[l * d + j];
      out[l * per_layer + k] = s * acc;
    }
  const std::size_t ia = a.id(), ix = x.id();
  return a.tape().record(std::move(out), {layers * per_layer}, a.requires_grad() || x.requires_grad(),
                         [=](Tape& t, std::size_t self) {
                           auto go = t.grad(self);
                           auto av = t.value(ia);
                           auto xv = t.value(ix);
                           accumulate(t, ia, [&](std::span<double> g) {
                             for (std::size_t l = 0; l < layers; ++l)
                               for (std::size_t k = 0; k < per_layer; ++k)
                                 for (std::size_t j = 0; j < d; ++j)
                                   g[(l * per_layer + k) * d + j] += s * go[l * per_layer + k] * xv[l * d + j];
                           });
                           accumulate(t, ix, [&](std::span<double> g) {
                             for (std::size_t l = 0; l < layers; ++l)
                               for (std::size_t k = 0; k < per_layer; ++k)
                                 for (std::size_t j = 0; j < d; ++j)
                                   g[l * d + j] += s * go[l * per_layer + k] * av[(l * per_layer + k) * d + j];
                           });
                         });
}

Var synthesize(Var coef, Var basis, Var bias) {
  require_same_tape(coef, bias);
  require_same_tape(coef, basis);
  const std::size_t k = coef.size();
  const std::size_t p = bias.size();
  if (basis.size() != k * p) throw ShapeError("synthesize: basis does not match coefficients");
  std::vector<double> out(p);
  kernels::synth(coef.value(), basis.value(), bias.value(), out);
  const std::size_t ic = coef.id(), ibs = basis.id(), ib = bias.id();
  const bool rg = coef.requires_grad() || basis.requires_grad() || bias.requires_grad();
  return coef.tape().record(std::move(out), bias.shape(), rg, [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ic, [&](std::span<double> g) { kernels::synth_grad_coef(t.value(ibs), go, g); });
    accumulate(t, ibs, [&](std::span<double> g) {
      auto cv = t.value(ic);
      for (std::size_t kk = 0; kk < k; ++kk) {
        if (cv[kk] == 0.0) continue;
        for (std::size_t i = 0; i < p; ++i) g[kk * p + i] += cv[kk] * go[i];
      }
    });
    accumulate(t, ib, [&](std::span<double> g) {
      for (std::size_t i = 0; i < p; ++i) g[i] += go[i];
    });
  });
}

Var conv3x3(Var x, Var weight, Var bias) {
  require_same_tape(x, weight);
  const Shape& s = x.shape();
  const std::size_t cin = channels_of(s);
  const std::size_t cout = bias.size();
  if (weight.size() != cout * cin * 9) throw ShapeError("conv3x3: weight shape mismatch");
  const kernels::ConvShape cs{cin, cout, s[1], s[2]};
  std::vector<double> out(cout * s[1] * s[2]);
  kernels::conv3x3(cs, x.value(), weight.value(), bias.value(), out);
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  const bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  return x.tape().record(std::move(out), {cout, s[1], s[2]}, rg, [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) { kernels::conv3x3_grad_input(cs, t.value(iw), go, g); });
    auto gw = t.grad(iw);
    auto gb = t.grad(ib);
    if (!gw.empty() || !gb.empty()) {
      std::vector<double> tw(cs.out_channels * cs.in_channels * 9, 0.0), tb(cs.out_channels, 0.0);
      kernels::conv3x3_grad_weight(cs, t.value(ix), go, tw, tb);
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += tw[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += tb[i];
    }
  });
}

Var avg_pool2(Var x) {
  const Shape& s = x.shape();
  const std::size_t c = channels_of(s), h = s[1], w = s[2];
  if (h < 2 || w < 2) throw ShapeError("avg_pool2: input too small");
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(c * oh * ow);
  auto xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t b = ch * h * w + 2 * y * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
      }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {c, oh, ow}, x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double v = 0.25 * go[(ch * oh + y) * ow + xx];
            const std::size_t b = ch * h * w + 2 * y * w + 2 * xx;
            g[b] += v;
            g[b + 1] += v;
            g[b + w] += v;
            g[b + w + 1] += v;
          }
    });
  });
}

Var resample_area(Var x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  const std::size_t c = channels_of(s), h = s[1], w = s[2];
  if (out_h == 0 || out_w == 0) throw ShapeError("resample_area: empty output");
  auto bounds = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    const std::size_t lo = i * n_in / n_out;
    return std::pair{lo, std::max(lo + 1, (i + 1) * n_in / n_out)};
  };
  std::vector<double> out(c * out_h * out_w);
  auto xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto [y0, y1] = bounds(y, h, out_h);
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto [x0, x1] = bounds(xx, w, out_w);
        double acc = 0.0;
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xi = x0; xi < x1; ++xi) acc += xv[(ch * h + yy) * w + xi];
        out[(ch * out_h + y) * out_w + xx] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {c, out_h, out_w}, x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < out_h; ++y) {
          const auto [y0, y1] = bounds(y, h, out_h);
          for (std::size_t xx = 0; xx < out_w; ++xx) {
            const auto [x0, x1] = bounds(xx, w, out_w);
            const double v = go[(ch * out_h + y) * out_w + xx] / static_cast<double>((y1 - y0) * (x1 - x0));
            for (std::size_t yy = y0; yy < y1; ++yy)
              for (std::size_t xi = x0; xi < x1; ++xi) g[(ch * h + yy) * w + xi] += v;
          }
        }
    });
  });
}

Var crop(Var x, std::size_t y0, std::size_t x0, std::size_t ch_h, std::size_t ch_w) {
  const Shape& s = x.shape();
  const std::size_t c = channels_of(s), h = s[1], w = s[2];
  if (y0 + ch_h > h || x0 + ch_w > w || ch_h == 0 || ch_w == 0) throw ShapeError("crop: window outside tensor");
  std::vector<double> out(c * ch_h * ch_w);
  auto xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ch_h; ++y)
      for (std::size_t xx = 0; xx < ch_w; ++xx) out[(ch * ch_h + y) * ch_w + xx] = xv[(ch * h + y0 + y) * w + x0 + xx];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {c, ch_h, ch_w}, x.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ch_h; ++y)
          for (std::size_t xx = 0; xx < ch_w; ++xx)
            g[(ch * h + y0 + y) * w + x0 + xx] += go[(ch * ch_h + y) * ch_w + xx];
    });
  });
}

Var mask(Var x, std::span<const std::uint8_t> m) {
  const Shape& s = x.shape();
  const std::size_t c = channels_of(s), hw = s[1] * s[2];
  if (m.size() != hw) throw ShapeError("mask: mask size does not match tensor");
  std::vector<double> out(x.size());
  auto xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = m[i] ? xv[ch * hw + i] : 0.0;
  std::vector<std::uint8_t> mk(m.begin(), m.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), s, x.requires_grad(), [=, mk = std::move(mk)](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i)
          if (mk[i]) g[ch * hw + i] += go[ch * hw + i];
    });
  });
}

Var masked_channel_mean(Var x, std::span<const std::uint8_t> m) {
  const Shape& s = x.shape();
  const std::size_t c = channels_of(s), hw = s[1] * s[2];
  if (m.size() != hw) throw ShapeError("masked_channel_mean: mask size does not match tensor");
  std::size_t count = 0;
  for (auto v : m) count += v ? 1 : 0;
  if (count == 0) throw NumericError("masked mean over an empty region");
  std::vector<double> out(c, 0.0);
  auto xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i)
      if (m[i]) out[ch] += xv[ch * hw + i];
    out[ch] /= static_cast<double>(count);
  }
  std::vector<std::uint8_t> mk(m.begin(), m.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {c}, x.requires_grad(), [=, mk = std::move(mk)](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = go[ch] / static_cast<double>(count);
        for (std::size_t i = 0; i < hw; ++i)
          if (mk[i]) g[ch * hw + i] += v;
      }
    });
  });
}

Var gram(Var f, double scale) {
  const Shape& s = f.shape();
  if (s.size() < 2) throw ShapeError("gram expects [C x N] or [C x H x W]");
  const std::size_t c = s[0], n = f.size() / c;
  std::vector<double> out(c * c);
  kernels::gram(f.value(), c, n, scale, out);
  const std::size_t iff = f.id();
  return f.tape().record(std::move(out), {c, c}, f.requires_grad(), [=](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, iff, [&](std::span<double> g) { kernels::gram_grad(t.value(iff), c, n, scale, go, g); });
  });
}

namespace {

constexpr double kWhiteX = 0.95047, kWhiteY = 1.0, kWhiteZ = 1.08883;
constexpr double kRgbToXyz[3][3] = {{0.412453, 0.357580, 0.180423},
                                    {0.212671, 0.715160, 0.072169},
                                    {0.019334, 0.119193, 0.950227}};

inline void srgb_linearize(double c, double& lin, double& dlin) {
  if (c <= 0.04045) {
    lin = c / 12.92;
    dlin = 1.0 / 12.92;
  } else {
    const double base = (c + 0.055) / 1.055;
    lin = std::pow(base, 2.4);
    dlin = 2.4 * std::pow(base, 1.4) / 1.055;
  }
}

inline void lab_f(double t, double& f, double& df) {
  constexpr double delta = 6.0 / 29.0;
  if (t > delta * delta * delta) {
    f = std::cbrt(t);
    df = t > 0.0 ? 1.0 / (3.0 * f * f) : 0.0;
  } else {
    f = t / (3.0 * delta * delta) + 4.0 / 29.0;
    df = 1.0 / (3.0 * delta * delta);
  }
}

// Returns L*a*b* and the 3x3 Jacobian d(lab)/d(rgb).
inline void pixel_lab(const double rgb[3], double lab[3], double jac[3][3]) {
  double lin[3], dlin[3];
  for (int i = 0; i < 3; ++i) srgb_linearize(rgb[i], lin[i], dlin[i]);
  const double white[3] = {kWhiteX, kWhiteY, kWhiteZ};
  double f[3], df[3];
  double dt[3][3];  // d(xyz_i / white_i) / d(rgb_j)
  for (int i = 0; i < 3; ++i) {
    double t = 0.0;
    for (int j = 0; j < 3; ++j) {
      t += kRgbToXyz[i][j] * lin[j];
      dt[i][j] = kRgbToXyz[i][j] * dlin[j] / white[i];
    }
    lab_f(t / white[i], f[i], df[i]);
  }
  lab[0] = 116.0 * f[1] - 16.0;
  lab[1] = 500.0 * (f[0] - f[1]);
  lab[2] = 200.0 * (f[1] - f[2]);
  for (int j = 0; j < 3; ++j) {
    const double fx = df[0] * dt[0][j], fy = df[1] * dt[1][j], fz = df[2] * dt[2][j];
    jac[0][j] = 116.0 * fy;
    jac[1][j] = 500.0 * (fx - fy);
    jac[2][j] = 200.0 * (fy - fz);
  }
}

}  // namespace

Var rgb_to_lab(Var x) {
  const Shape& s = x.shape();
  if (channels_of(s) != 3) throw ShapeError("rgb_to_lab expects 3 channels");
  const std::size_t hw = s[1] * s[2];
  auto xv = x.value();
  std::vector<double> out(3 * hw);
  std::vector<double> jac(9 * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    const double rgb[3] = {xv[p], xv[hw + p], xv[2 * hw + p]};
    double lab[3], j[3][3];
    pixel_lab(rgb, lab, j);
    for (int c = 0; c < 3; ++c) {
      out[c * hw + p] = lab[c];
      for (int k = 0; k < 3; ++k) jac[p * 9 + c * 3 + k] = j[c][k];
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), s, x.requires_grad(), [=, jac = std::move(jac)](Tape& t, std::size_t self) {
    auto go = t.grad(self);
    accumulate(t, ix, [&](std::span<double> g) {
      for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
          for (int k = 0; k < 3; ++k) g[k * hw + p] += go[c * hw + p] * jac[p * 9 + c * 3 + k];
    });
  });
}

}  // namespace ftex::ad
