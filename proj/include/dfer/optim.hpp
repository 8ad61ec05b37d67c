#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dfer/autodiff.hpp"
#include "dfer/errors.hpp"
#include "dfer/sha256.hpp"
#include "dfer/tensor.hpp"

namespace dfer {

// A named, ordered set of leaf parameters that are stepped together.
// `trainable` toggles per training stage; `locked` groups (the frozen
// feature extractors) can never be made trainable. Velocity buffers live
// here so that freezing a group also freezes its optimizer state.
template <class Real>
struct ParamGroup {
  std::string name;
  std::vector<std::pair<std::string, Var<Real>>> params;  // registration order
  bool trainable = false;
  bool locked = false;
  std::unordered_map<std::string, Tensor<Real>> velocity;

  void add(const std::string& pname, const Var<Real>& v) {
    if (find(pname)) throw StateError(name + ": duplicate parameter " + pname);
    params.emplace_back(pname, v);
    params.back().second.set_requires_grad(trainable);
  }

  Var<Real>* find(const std::string& pname) {
    for (auto& [n, v] : params)
      if (n == pname) return &v;
    return nullptr;
  }

  void set_trainable(bool t) {
    if (locked && t)
      throw StateError(name + ": locked parameter group cannot be made trainable");
    trainable = t;
    for (auto& [n, v] : params) v.set_requires_grad(t);
  }

  void clear_velocity() { velocity.clear(); }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [pn, v] : params) n += v.value().numel();
    return n;
  }
};

// Order-sensitive digest of a group's parameter bytes. Two groups hash
// equal iff names, shapes, and value bit patterns all match.
template <class Real>
std::string group_sha256(const ParamGroup<Real>& g) {
  Sha256 h;
  for (const auto& [name, v] : g.params) {
    h.update(name.data(), name.size());
    const Tensor<Real>& t = v.value();
    const std::uint64_t rank = t.shape.size();
    h.update(&rank, sizeof rank);
    for (std::int64_t e : t.shape) {
      const std::uint64_t u = static_cast<std::uint64_t>(e);
      h.update(&u, sizeof u);
    }
    h.update(t.raw(), t.raw_size());
  }
  return h.hex();
}

// SGD with classical momentum: v <- m*v + g; p <- p - lr*v.
// No dampening, no Nesterov lookahead, no weight decay. Non-trainable
// groups are left byte-identical, velocity included.
template <class Real>
void sgd_momentum_step(ParamGroup<Real>& group, const GradMap<Real>& grads, double lr,
                       double momentum) {
  if (lr <= 0.0) throw ConfigError("sgd: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0, 1)");
  if (!group.trainable) return;
  for (auto& [pname, var] : group.params) {
    Tensor<Real>& p = var.mutable_value();
    auto vit = group.velocity.find(pname);
    if (vit == group.velocity.end())
      vit = group.velocity.emplace(pname, Tensor<Real>::zeros(p.shape)).first;
    Tensor<Real>& vel = vit->second;
    if (vel.shape != p.shape)
      throw ShapeError("sgd: velocity shape " + shape_str(vel.shape) +
                       " does not match parameter " + pname + " " + shape_str(p.shape));
    const Tensor<Real>* g = grads.find(var);
    if (g && g->shape != p.shape)
      throw ShapeError("sgd: gradient shape " + shape_str(g->shape) +
                       " does not match parameter " + pname + " " + shape_str(p.shape));
    const std::int64_t n = p.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      double gv = g ? static_cast<double>((*g)[i]) : 0.0;
      double v = momentum * static_cast<double>(vel[i]) + gv;
      vel[i] = static_cast<Real>(v);
      p[i] = static_cast<Real>(static_cast<double>(p[i]) - lr * v);
    }
  }
}

}  // namespace dfer
