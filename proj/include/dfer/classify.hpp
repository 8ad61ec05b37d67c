#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dfer/autodiff.hpp"

namespace dfer {

// Value-level twins of the graph ops, used by prediction and metrics where
// no gradients are needed. Same numeric discipline: double accumulation,
// max-subtracted softmax, hard floor on feature norms.

template <class Real>
double cosine_sim(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size() || a.empty())
    throw ShapeError("cosine_sim: width mismatch or empty input");
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    d += x * y;
    na += x * x;
    nb += y * y;
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kNormFloor || nb < kNormFloor)
    throw NumericError("cosine_sim: degenerate feature norm");
  return d / (na * nb);
}

template <class Real>
double cosine_sim(const Tensor<Real>& a, const Tensor<Real>& b) {
  return cosine_sim(std::span<const Real>(a.data), std::span<const Real>(b.data));
}

struct SimilarityVector {
  std::vector<double> sims;  // one per class
};

struct ClassProbabilities {
  std::vector<double> probs;
  double tau = 0.0;
};

// softmax(sims / tau), computed with max subtraction.
inline ClassProbabilities class_probs(const SimilarityVector& sv, double tau) {
  if (tau <= 0.0) throw ConfigError("class_probs: temperature must be positive");
  if (sv.sims.empty()) throw ShapeError("class_probs: no similarities");
  ClassProbabilities out;
  out.tau = tau;
  double m = sv.sims[0] / tau;
  for (double s : sv.sims) m = std::max(m, s / tau);
  double sum = 0.0;
  for (double s : sv.sims) sum += std::exp(s / tau - m);
  out.probs.reserve(sv.sims.size());
  for (double s : sv.sims) out.probs.push_back(std::exp(s / tau - m) / sum);
  return out;
}

// -log p[label], with the probability floored at 1e-12 so a vanishing
// probability yields a large finite loss instead of infinity.
inline constexpr double kProbFloor = 1e-12;

inline double cross_entropy(const ClassProbabilities& cp, std::int64_t label) {
  if (label < 0 || label >= static_cast<std::int64_t>(cp.probs.size()))
    throw ConfigError("cross_entropy: label out of range");
  return -std::log(std::max(cp.probs[static_cast<std::size_t>(label)], kProbFloor));
}

// Argmax with ties resolved to the lowest class index.
inline std::int64_t predict(const SimilarityVector& sv) {
  if (sv.sims.empty()) throw ShapeError("predict: no similarities");
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < static_cast<std::int64_t>(sv.sims.size()); ++i)
    if (sv.sims[static_cast<std::size_t>(i)] > sv.sims[static_cast<std::size_t>(best)]) best = i;
  return best;
}

// ---- graph-level loss path ----

// Cosine similarity of the video feature against each class feature,
// divided by the temperature: the logit vector [C].
template <class Real>
Var<Real> similarity_logits(const Var<Real>& video_feat,
                            std::span<const Var<Real>> class_feats, double tau) {
  if (tau <= 0.0) throw ConfigError("similarity_logits: temperature must be positive");
  if (class_feats.empty()) throw ShapeError("similarity_logits: no class features");
  std::vector<Var<Real>> sims;
  sims.reserve(class_feats.size());
  for (const auto& cf : class_feats) sims.push_back(cosine(video_feat, cf));
  Var<Real> stacked = stack_rows(std::span<const Var<Real>>(sims));  // [C,1]
  return scale(reshape(stacked, Shape{static_cast<std::int64_t>(class_feats.size())}), 1.0 / tau);
}

template <class Real>
Var<Real> alignment_loss(const Var<Real>& video_feat, std::span<const Var<Real>> class_feats,
                         double tau, std::int64_t label) {
  return cross_entropy_logits(similarity_logits(video_feat, class_feats, tau), label);
}

}  // namespace dfer
