#include "ftex/evaluation.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ftex/error.hpp"
#include "ftex/rng.hpp"

namespace ftex {

void EvalConfig::validate() const {
  if (!(category_threshold >= 0.0 && category_threshold <= 1.0)) {
    throw ConfigError("evaluation category_threshold must lie in [0, 1]");
  }
}

namespace {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Gaussian fit(const std::vector<std::vector<double>>& xs, std::size_t k) {
  const std::size_t n = xs.size();
  if (n < 2) throw Error("fid needs at least two samples per set");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < n; ++i) {
    if (xs[i].size() != k) throw ShapeError("fid: feature dimensions differ");
    for (std::size_t j = 0; j < k; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = xs[i][j];
  }
  Gaussian g;
  g.mean = m.colwise().mean().transpose();
  const Eigen::MatrixXd c = m.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(n - 1);
  g.cov.diagonal().array() += kFidRidge;
  return g;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw Error("fid needs at least two samples per set");
  const std::size_t k = a.front().size();
  if (b.front().size() != k) throw ShapeError("fid: feature dimensions differ");
  const Gaussian ga = fit(a, k), gb = fit(b, k);
  // tr sqrt(Sa Sb) through the symmetric form sqrt(Sa) Sb sqrt(Sa).
  const Eigen::MatrixXd sa = sqrt_psd(ga.cov);
  Eigen::MatrixXd mid = sa * gb.cov * sa;
  mid = 0.5 * (mid + mid.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mid, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

bool category_present(const ParsingMask& parse, ClothCategory target, double threshold) {
  const double need = threshold * static_cast<double>(parse.height * parse.width);
  const std::size_t n = parse.count(target);
  return n > 0 && static_cast<double>(n) >= need;
}

namespace {

std::size_t category_slot(ClothCategory c) {
  for (std::size_t i = 0; i < kEvalCategories.size(); ++i)
    if (kEvalCategories[i] == c) return i;
  throw FormatError("unknown evaluation category '" + std::string(category_name(c)) +
                    "' (expected skirt, pants, dress or rompers)");
}

std::array<CategoryScore, 4> empty_scores() {
  std::array<CategoryScore, 4> s;
  for (std::size_t i = 0; i < s.size(); ++i) s[i].category = kEvalCategories[i];
  return s;
}

}  // namespace

AccuracyResult type_accuracy(const std::vector<TypeEdit>& edits, const HumanParser& parser, double threshold) {
  if (edits.empty()) throw Error("type accuracy needs at least one edit");
  AccuracyResult r;
  r.per_category = empty_scores();
  for (const auto& e : edits) {
    const std::size_t slot = category_slot(e.target);
    const bool hit = category_present(parser.parse(e.image), e.target, threshold);
    r.hits.push_back(hit);
    ++r.per_category[slot].attempts;
    ++r.attempts;
    if (hit) {
      ++r.per_category[slot].successes;
      ++r.successes;
    }
  }
  r.overall = static_cast<double>(r.successes) / static_cast<double>(r.attempts);
  return r;
}

double lpips_mean(const std::vector<std::pair<Image, Image>>& pairs, const PerceptualDistance& perceptual) {
  if (pairs.empty()) throw Error("lpips mean needs at least one pair");
  double s = 0.0;
  for (const auto& [a, b] : pairs) {
    if (a.height() != b.height() || a.width() != b.width()) {
      throw ShapeError("lpips pair images differ in size");
    }
    s += perceptual.distance(a, b);
  }
  return s / static_cast<double>(pairs.size());
}

EvalReport evaluate(const MapperWeights& weights, const Dataset& data, const BackboneSet& bb, const TrainConfig& train,
                    const EvalConfig& cfg) {
  cfg.validate();
  std::size_t n = data.test.size();
  if (cfg.max_samples > 0) n = std::min(n, cfg.max_samples);
  if (n == 0) throw Error("evaluation needs a non-empty test split");
  if (data.train.empty()) throw Error("evaluation needs training images as texture donors and FID reference");

  struct Out {
    EvalSample s;
    std::vector<double> features;
    std::string error;
  };
  std::vector<Out> outs(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const Sample& src = data.test[i];
      Rng rng(derive_seed(cfg.seed, "eval", i));
      const SampledCondition sc = sample_condition(data.train, train.vocabulary, train.loss.crop_size, rng, train.retry_budget);
      const EditResult r = edit(src.latent, sc.condition, weights, bb);
      Out& o = outs[i];
      o.s.path = src.record.path;
      o.s.prompt = build_prompt(sc.upper_attr, sc.lower_attr);
      o.s.target = category_of_prompt(o.s.prompt);
      o.s.lpips = bb.perceptual->distance(r.image, src.image);
      if (o.s.target != ClothCategory::None) o.s.hit = category_present(bb.parser->parse(r.image), o.s.target, cfg.category_threshold);
      o.features = bb.perceptual->features(r.image);
    } catch (const std::exception& e) {
      outs[i].error = e.what();
    }
  }
  for (const auto& o : outs)
    if (!o.error.empty()) throw Error("evaluation failed on " + o.s.path + ": " + o.error);

  EvalReport rep;
  rep.per_category = empty_scores();
  rep.samples = n;
  double lp = 0.0;
  for (const auto& o : outs) {
    rep.per_sample.push_back(o.s);
    lp += o.s.lpips;
    if (o.s.target == ClothCategory::None) continue;
    const std::size_t slot = category_slot(o.s.target);
    ++rep.scored;
    ++rep.per_category[slot].attempts;
    if (o.s.hit) {
      ++rep.successes;
      ++rep.per_category[slot].successes;
    }
  }
  rep.lpips_mean = lp / static_cast<double>(n);
  rep.accuracy = rep.scored == 0 ? 0.0 : static_cast<double>(rep.successes) / static_cast<double>(rep.scored);

  // FID against the training images of the same target category.
  std::array<std::vector<std::vector<double>>, 4> edited, reference;
  std::vector<std::vector<double>> all_edited, all_reference;
  for (const auto& o : outs) {
    all_edited.push_back(o.features);
    if (o.s.target != ClothCategory::None) edited[category_slot(o.s.target)].push_back(o.features);
  }
  for (const auto& s : data.train) {
    auto f = bb.perceptual->features(s.image);
    const ClothCategory c = category_of_prompt(build_prompt(s.record.upper_tag, s.record.lower_tag));
    if (c != ClothCategory::None) reference[category_slot(c)].push_back(f);
    all_reference.push_back(std::move(f));
  }
  double weighted = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    rep.per_category_fid[c] = -1.0;
    if (edited[c].size() < 2 || reference[c].size() < 2) continue;
    rep.per_category_fid[c] = fid(edited[c], reference[c]);
    weighted += rep.per_category_fid[c] * static_cast<double>(edited[c].size());
    count += edited[c].size();
  }
  if (count > 0) {
    rep.fid = weighted / static_cast<double>(count);
  } else {
    if (all_edited.size() < 2) {
      throw Error("fid needs at least two evaluated test samples, got " + std::to_string(all_edited.size()));
    }
    if (all_reference.size() < 2) throw Error("fid needs at least two training images as reference");
    rep.fid = fid(all_edited, all_reference);
  }
  return rep;
}

std::string EvalReport::to_text() const {
  std::ostringstream o;
  char buf[128];
  auto num = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s: %.9g\n", key, v);
    o << buf;
  };
  num("fid", fid);
  num("accuracy", accuracy);
  num("lpips_mean", lpips_mean);
  o << "samples: " << samples << "\nscored: " << scored << "\nsuccesses: " << successes << '\n';
  // Full-scale figures with pretrained backbones, kept for comparison only.
  o << "reference_fid: 69.22\nreference_accuracy: 0.8275\n";
  o << "\ncategory\tsuccesses\tattempts\taccuracy\tfid\n";
  for (std::size_t c = 0; c < 4; ++c) {
    const auto& s = per_category[c];
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%zu\t%.6f\t", std::string(category_name(s.category)).c_str(), s.successes,
                  s.attempts, s.accuracy());
    o << buf;
    if (per_category_fid[c] < 0.0) {
      o << "n/a\n";
    } else {
      std::snprintf(buf, sizeof buf, "%.6f\n", per_category_fid[c]);
      o << buf;
    }
  }
  return o.str();
}

std::string EvalReport::to_csv() const {
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  std::ostringstream o;
  o << "path,prompt,target,hit,lpips\n";
  char buf[64];
  for (const auto& s : per_sample) {
    std::snprintf(buf, sizeof buf, "%.9g", s.lpips);
    o << quote(s.path) << ',' << quote(s.prompt) << ',' << category_name(s.target) << ',' << (s.hit ? 1 : 0) << ',' << buf
      << '\n';
  }
  return o.str();
}

}  // namespace ftex
