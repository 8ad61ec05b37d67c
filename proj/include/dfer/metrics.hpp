#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "dfer/errors.hpp"

namespace dfer {

// Classification quality report: weighted average recall (plain accuracy),
// unweighted average recall (mean of per-class recalls), and the full
// confusion matrix as counts.
struct MetricsReport {
  double war = 0.0;
  double uar = 0.0;
  std::vector<double> recall;             // per class; 0 when the class has no true samples
  std::vector<std::int64_t> confusion;    // cls*cls, row = true class, col = predicted
  std::int64_t cls = 0;
  std::int64_t total = 0;

  std::int64_t at(std::int64_t t, std::int64_t p) const {
    return confusion[static_cast<std::size_t>(t * cls + p)];
  }
};

// Exact integer counting; WAR = correct/N, UAR = mean recall over classes
// that actually appear in the labels (empty classes are excluded rather
// than treated as 0/0).
inline MetricsReport compute_metrics(std::span<const std::int64_t> preds,
                                     std::span<const std::int64_t> labels, std::int64_t cls) {
  if (preds.size() != labels.size())
    throw ShapeError("compute_metrics: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  if (preds.empty()) throw ShapeError("compute_metrics: empty input");
  if (cls < 1) throw ConfigError("compute_metrics: class count must be positive");

  MetricsReport r;
  r.cls = cls;
  r.total = static_cast<std::int64_t>(preds.size());
  r.confusion.assign(static_cast<std::size_t>(cls * cls), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= cls)
      throw ConfigError("compute_metrics: label " + std::to_string(labels[i]) + " out of range");
    if (preds[i] < 0 || preds[i] >= cls)
      throw ConfigError("compute_metrics: prediction " + std::to_string(preds[i]) +
                        " out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i] * cls + preds[i])];
  }

  std::int64_t correct = 0;
  double recall_sum = 0.0;
  std::int64_t populated = 0;
  r.recall.assign(static_cast<std::size_t>(cls), 0.0);
  for (std::int64_t k = 0; k < cls; ++k) {
    std::int64_t true_k = 0;
    for (std::int64_t p = 0; p < cls; ++p) true_k += r.at(k, p);
    correct += r.at(k, k);
    if (true_k > 0) {
      r.recall[static_cast<std::size_t>(k)] =
          static_cast<double>(r.at(k, k)) / static_cast<double>(true_k);
      recall_sum += r.recall[static_cast<std::size_t>(k)];
      ++populated;
    }
  }
  r.war = static_cast<double>(correct) / static_cast<double>(r.total);
  r.uar = populated > 0 ? recall_sum / static_cast<double>(populated) : 0.0;
  return r;
}

namespace detail {
inline std::string fmt_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}
}  // namespace detail

// `metric,value` rows followed by a confusion block, one row per true class.
inline std::string metrics_csv(const MetricsReport& r) {
  std::string out = "metric,value\n";
  out += "war," + detail::fmt_metric(r.war) + "\n";
  out += "uar," + detail::fmt_metric(r.uar) + "\n";
  for (std::int64_t k = 0; k < r.cls; ++k)
    out += "recall_" + std::to_string(k) + "," +
           detail::fmt_metric(r.recall[static_cast<std::size_t>(k)]) + "\n";
  out += "# confusion matrix: row = true class, columns = predicted counts\n";
  for (std::int64_t t = 0; t < r.cls; ++t) {
    out += "confusion_" + std::to_string(t);
    for (std::int64_t p = 0; p < r.cls; ++p) out += "," + std::to_string(r.at(t, p));
    out += "\n";
  }
  return out;
}

}  // namespace dfer
