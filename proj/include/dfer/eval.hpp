#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "dfer/metrics.hpp"
#include "dfer/model.hpp"

namespace dfer {

namespace detail {

template <class Real>
SimilarityVector sims_against(const Tensor<Real>& video_feat,
                              const std::vector<Tensor<Real>>& class_feats) {
  SimilarityVector sv;
  sv.sims.reserve(class_feats.size());
  for (const Tensor<Real>& cf : class_feats) sv.sims.push_back(cosine_sim(video_feat, cf));
  return sv;
}

// The cache serves features by index into ITS dataset, while labels come
// from `split`; the two must be the same object or indices drift silently.
template <class Real>
void require_cache_over(const FeatureCache<Real>& cache, const Dataset& split) {
  if (cache.data != &split)
    throw StateError("feature cache was built over a different dataset than the one evaluated");
}

// Row permutation of a [F, D] feature tensor.
template <class Real>
Tensor<Real> permute_rows(const Tensor<Real>& feats, const std::vector<std::int64_t>& perm) {
  Tensor<Real> out(feats.shape);
  for (std::int64_t r = 0; r < feats.shape[0]; ++r)
    for (std::int64_t j = 0; j < feats.shape[1]; ++j)
      out.at(r, j) = feats.at(perm[static_cast<std::size_t>(r)], j);
  return out;
}

}  // namespace detail

// Center-crop evaluation over a whole dataset. Class features are computed
// once and reused for every sample.
template <class Real>
MetricsReport evaluate(const Pipeline<Real>& p, FeatureCache<Real>& cache, const Dataset& split) {
  detail::require_cache_over(cache, split);
  if (split.samples.empty()) throw ShapeError("evaluate: empty dataset");
  const std::vector<Tensor<Real>> class_feats = class_feature_values(p);
  std::vector<std::int64_t> preds, labels;
  preds.reserve(split.samples.size());
  labels.reserve(split.samples.size());
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const Tensor<Real>& feats = cache.eval_frames(static_cast<std::int64_t>(i));
    Tensor<Real> vf = video_feature(p, feats).value();
    preds.push_back(predict(detail::sims_against(vf, class_feats)));
    labels.push_back(split.samples[i].label);
  }
  return compute_metrics(std::span<const std::int64_t>(preds),
                         std::span<const std::int64_t>(labels), split.classes);
}

// Evaluates twice: frames in natural order, then with a per-sample seeded
// random permutation of the frame axis. Per-frame encoding is frame-local,
// so permuting cached feature rows equals permuting the pixels themselves.
template <class Real>
std::pair<MetricsReport, MetricsReport> shuffle_eval(const Pipeline<Real>& p,
                                                     FeatureCache<Real>& cache,
                                                     const Dataset& split, std::uint64_t seed) {
  detail::require_cache_over(cache, split);
  if (split.samples.empty()) throw ShapeError("shuffle_eval: empty dataset");
  const std::vector<Tensor<Real>> class_feats = class_feature_values(p);
  std::vector<std::int64_t> preds_n, preds_s, labels;
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const Tensor<Real>& feats = cache.eval_frames(static_cast<std::int64_t>(i));
    Tensor<Real> vf = video_feature(p, feats).value();
    preds_n.push_back(predict(detail::sims_against(vf, class_feats)));

    std::vector<std::int64_t> perm(static_cast<std::size_t>(feats.shape[0]));
    for (std::size_t r = 0; r < perm.size(); ++r) perm[r] = static_cast<std::int64_t>(r);
    Rng rng = stream(seed, "frame-shuffle", {static_cast<std::uint64_t>(i)});
    rng.shuffle(perm);
    Tensor<Real> shuffled = detail::permute_rows(feats, perm);
    Tensor<Real> vf_s = video_feature(p, shuffled).value();
    preds_s.push_back(predict(detail::sims_against(vf_s, class_feats)));

    labels.push_back(split.samples[i].label);
  }
  const std::span<const std::int64_t> lab(labels);
  return {compute_metrics(std::span<const std::int64_t>(preds_n), lab, split.classes),
          compute_metrics(std::span<const std::int64_t>(preds_s), lab, split.classes)};
}

// Temperature-scaled similarity vectors for the first n samples — the
// held-out probe used to verify that tower growth preserves the function.
template <class Real>
std::vector<std::vector<double>> sample_logits(const Pipeline<Real>& p,
                                               FeatureCache<Real>& cache, const Dataset& split,
                                               std::int64_t n) {
  detail::require_cache_over(cache, split);
  const std::vector<Tensor<Real>> class_feats = class_feature_values(p);
  const std::int64_t count = std::min<std::int64_t>(n, static_cast<std::int64_t>(split.samples.size()));
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const Tensor<Real>& feats = cache.eval_frames(i);
    Tensor<Real> vf = video_feature(p, feats).value();
    SimilarityVector sv = detail::sims_against(vf, class_feats);
    for (double& s : sv.sims) s /= p.cfg.tau;
    out.push_back(std::move(sv.sims));
  }
  return out;
}

namespace detail {
inline std::string fmt_feature(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}
}  // namespace detail

// CSV with two blocks: one row per sample (video features under the current
// stage's path), then one row per (class, sentence) frozen-encoder text
// feature. Row count = samples + cls*snt + 2 headers.
template <class Real>
std::string export_features_csv(const Pipeline<Real>& p, FeatureCache<Real>& cache,
                                const Dataset& split) {
  detail::require_cache_over(cache, split);
  const std::int64_t D = p.cfg.embd;
  std::string csv = "id,label";
  for (std::int64_t j = 0; j < D; ++j) csv += ",f" + std::to_string(j);
  csv += "\n";
  for (std::size_t i = 0; i < split.samples.size(); ++i) {
    const Tensor<Real>& feats = cache.eval_frames(static_cast<std::int64_t>(i));
    Tensor<Real> vf = video_feature(p, feats).value();
    csv += split.samples[i].id + "," + std::to_string(split.samples[i].label);
    for (std::int64_t j = 0; j < D; ++j)
      csv += "," + detail::fmt_feature(static_cast<double>(vf[j]));
    csv += "\n";
  }
  csv += "class,sentence";
  for (std::int64_t j = 0; j < D; ++j) csv += ",f" + std::to_string(j);
  csv += "\n";
  auto grid = encode_all(p.mat, p.text_enc);
  for (std::size_t i = 0; i < grid.size(); ++i)
    for (std::size_t j = 0; j < grid[i].size(); ++j) {
      Tensor<Real> tf = grid[i][j].value();
      csv += std::to_string(i) + "," + std::to_string(j);
      for (std::int64_t d = 0; d < D; ++d)
        csv += "," + detail::fmt_feature(static_cast<double>(tf[d]));
      csv += "\n";
    }
  return csv;
}

}  // namespace dfer
