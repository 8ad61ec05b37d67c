#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dfer/autodiff.hpp"
#include "dfer/rng.hpp"
#include "dfer/tensor.hpp"

namespace dfer {

struct FdOptions {
  double h = 1e-3;
  int samples_per_param = 4;  // coordinates sampled per parameter tensor
  double kink_guard = 10.0;   // see the skip rule below
  double rel_eps = 1e-8;      // denominator floor for the relative error
};

struct FdReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

namespace detail {

// ReLU input tensors on the differentiable path, in construction order.
// Construction order is reproducible because graphs are built by straight-
// line code, so the k-th ReLU of one evaluation corresponds to the k-th of
// the next.
template <class Real>
std::vector<Tensor<Real>> collect_relu_inputs(Node<Real>* root) {
  std::vector<Node<Real>*> order = topo_postorder(root);
  std::vector<Node<Real>*> relus;
  for (Node<Real>* n : order)
    if (std::string_view(n->op) == "relu" && !n->parents.empty()) relus.push_back(n);
  std::sort(relus.begin(), relus.end(),
            [](const Node<Real>* a, const Node<Real>* b) { return a->seq < b->seq; });
  std::vector<Tensor<Real>> vals;
  vals.reserve(relus.size());
  for (Node<Real>* n : relus) vals.push_back(n->parents[0]->value);
  return vals;
}

}  // namespace detail

// Central-difference check of reverse-mode gradients.
//
// For each parameter, a few coordinates are perturbed by +-h and the
// symmetric difference of the rebuilt loss is compared against the analytic
// gradient as |a - n| / (|a| + rel_eps).
//
// ReLU makes the loss piecewise smooth: if a perturbation carries any ReLU
// preactivation across zero, the central difference straddles a kink and
// measures nothing about the gradient. A coordinate is therefore skipped
// when, at any ReLU input element, the +-h evaluations disagree in sign, or
// the base magnitude is within kink_guard half-movements of zero. Skipping
// is coordinate-local; the parameter's other coordinates still count.
//
// make_loss must be a deterministic function of the parameter values only,
// rebuilding the graph on every call.
template <class Real, class LossFn>
FdReport finite_diff_check(LossFn&& make_loss,
                           std::span<const std::pair<std::string, Var<Real>>> params,
                           const FdOptions& opt, Rng rng) {
  Var<Real> loss0 = make_loss();
  GradMap<Real> gm = grad(loss0);
  const auto relu_base = detail::collect_relu_inputs(loss0.node().get());

  FdReport rep;
  std::size_t pi = 0;
  for (const auto& [pname, var] : params) {
    Rng prng = rng.split(pi++);
    Var<Real> p = var;  // shares the node; value edits go to the same leaf
    const std::int64_t n = p.value().numel();
    std::vector<std::int64_t> idxs;
    if (n <= opt.samples_per_param) {
      for (std::int64_t i = 0; i < n; ++i) idxs.push_back(i);
    } else {
      std::set<std::int64_t> seen;
      while (static_cast<int>(seen.size()) < opt.samples_per_param) seen.insert(prng.below(n));
      idxs.assign(seen.begin(), seen.end());
    }

    const Tensor<Real>* ga = gm.find(p);
    for (std::int64_t idx : idxs) {
      Real v0 = p.value()[idx];

      p.mutable_value()[idx] = static_cast<Real>(static_cast<double>(v0) + opt.h);
      Var<Real> lp = make_loss();
      const double fp = static_cast<double>(lp.value()[0]);
      const auto relu_p = detail::collect_relu_inputs(lp.node().get());

      p.mutable_value()[idx] = static_cast<Real>(static_cast<double>(v0) - opt.h);
      Var<Real> lm = make_loss();
      const double fm = static_cast<double>(lm.value()[0]);
      const auto relu_m = detail::collect_relu_inputs(lm.node().get());

      p.mutable_value()[idx] = v0;

      bool skip = relu_p.size() != relu_base.size() || relu_m.size() != relu_base.size();
      for (std::size_t t = 0; !skip && t < relu_base.size(); ++t) {
        const Tensor<Real>& zb = relu_base[t];
        const Tensor<Real>& zp = relu_p[t];
        const Tensor<Real>& zm = relu_m[t];
        if (zp.numel() != zb.numel() || zm.numel() != zb.numel()) {
          skip = true;
          break;
        }
        for (std::int64_t e = 0; e < zb.numel(); ++e) {
          const double b = static_cast<double>(zb[e]);
          const double pl = static_cast<double>(zp[e]);
          const double mi = static_cast<double>(zm[e]);
          if ((pl > 0.0) != (mi > 0.0)) {
            skip = true;
            break;
          }
          const double half_move = std::abs(pl - mi) / 2.0;
          if (half_move > 0.0 && std::abs(b) < opt.kink_guard * half_move) {
            skip = true;
            break;
          }
        }
      }
      if (skip) {
        ++rep.coords_skipped;
        continue;
      }

      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double analytic = ga ? static_cast<double>((*ga)[idx]) : 0.0;
      const double rel = std::abs(analytic - numeric) / (std::abs(analytic) + opt.rel_eps);
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = pname;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace dfer
