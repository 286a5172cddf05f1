#include "ftex/recovery.hpp"

#include <cmath>

#include "ftex/error.hpp"

namespace ftex {

void RecoveryConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("recovery learning_rate must be positive");
  if (log_every == 0) throw ConfigError("recovery log_every must be positive");
  if (parse_every == 0) throw ConfigError("recovery parse_every must be positive");
}

Image fuse_guided(const Image& i_e, const Image& i_i, const ParsingMask& parse_e) {
  if (!i_e.same_size(i_i)) throw ShapeError("fuse_guided needs equally sized images");
  if (parse_e.height != i_e.height() || parse_e.width != i_e.width()) throw ShapeError("parse does not match the image");
  Image out = i_i;
  const std::size_t hw = i_e.pixels();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < hw; ++p)
      if (parse_e.upper_cloth[p] || parse_e.lower_cloth[p]) out.data()[c * hw + p] = i_e.data()[c * hw + p];
  return out;
}

Image fuse_guided(const Image& i_e, const Image& i_i, const HumanParser& parser) {
  return fuse_guided(i_e, i_i, parser.parse(i_e));
}

ad::Var recovery_objective(ad::Var guided, ad::Var i_o, ad::Var i_i, const ParsingMask& parse_o,
                           const PerceptualDistance& perceptual) {
  if (guided.shape() != i_o.shape() || i_i.shape() != i_o.shape()) throw ShapeError("recovery objective needs equally sized images");
  ad::Tape& tape = i_o.tape();
  const ad::Var lp = perceptual.distance(tape, guided, i_o);
  const ad::Var bg = ad::l2_norm(ad::mask(ad::sub(i_i, i_o), parse_o.background));
  return ad::add(lp, bg);
}

double recovery_objective(const Image& guided, const Image& i_o, const Image& i_i, const HumanParser& parser,
                          const PerceptualDistance& perceptual) {
  ad::Tape tape;
  return recovery_objective(image_var(tape, guided), image_var(tape, i_o), image_var(tape, i_i), parser.parse(i_o), perceptual)
      .scalar();
}

RecoveryResult recover(const LatentCode& w_edit, const Image& i_i, const Image& i_e, const BackboneSet& backbones,
                       const RecoveryConfig& cfg, const RecoveryLog& log) {
  cfg.validate();
  const Generator& gen = *backbones.generator;
  if (!i_i.same_size(i_e)) throw ShapeError("recover needs equally sized input and edited images");
  const std::size_t n = gen.image_size();
  const Image input = i_i.height() == n && i_i.width() == n ? i_i : resize_area(i_i, n, n);
  const Image edited = i_e.height() == n && i_e.width() == n ? i_e : resize_area(i_e, n, n);
  const Image guided = fuse_guided(edited, input, *backbones.parser);

  RecoveryResult r;
  r.theta = gen.parameters();
  std::vector<std::vector<float>> m, v;
  for (const auto& [name, t] : r.theta) {
    m.emplace_back(t.size(), 0.0f);
    v.emplace_back(t.size(), 0.0f);
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParsingMask parse_o;
  for (std::size_t step = 0;; ++step) {
    ad::Tape tape;
    const bool train = step < cfg.steps;
    const auto theta = bind_parameters(tape, r.theta, train);
    const ad::Var out = gen.forward(tape, tape.constant(w_edit.layers()), theta);
    if (step % cfg.parse_every == 0 || !train) parse_o = backbones.parser->parse(var_to_image(out));
    const ad::Var obj = recovery_objective(image_var(tape, guided), out, image_var(tape, input), parse_o, *backbones.perceptual);
    const double value = obj.scalar();
    if (!std::isfinite(value)) throw NumericError("recovery objective became non-finite at step " + std::to_string(step));
    if (step == 0) r.initial_objective = value;
    if (!train) {
      r.final_objective = value;
      r.image = var_to_image(out);
      break;
    }
    r.trace.push_back(value);
    if (log && step % cfg.log_every == 0) log(step, value);
    tape.backward(obj);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const auto g = tape.grad(theta[k]);
      auto& p = r.theta[k].second.data;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[k][i] = static_cast<float>(b1 * m[k][i] + (1.0 - b1) * g[i]);
        v[k][i] = static_cast<float>(b2 * v[k][i] + (1.0 - b2) * g[i] * g[i]);
        p[i] = static_cast<float>(p[i] - cfg.learning_rate * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps));
      }
    }
  }
  return r;
}

}  // namespace ftex
