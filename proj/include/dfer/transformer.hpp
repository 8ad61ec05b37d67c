#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfer/autodiff.hpp"
#include "dfer/optim.hpp"
#include "dfer/rng.hpp"

namespace dfer {

// Fixed sin/cos position table. pe[p, 2i] = sin(p / 10000^(2i/D)),
// pe[p, 2i+1] = cos(same argument).
template <class Real>
Tensor<Real> sinusoidal_positions(std::int64_t length, std::int64_t dim) {
  if (dim % 2 != 0) throw ConfigError("position table requires an even width");
  Tensor<Real> pe(Shape{length, dim});
  for (std::int64_t p = 0; p < length; ++p) {
    for (std::int64_t i = 0; i < dim / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      double arg = static_cast<double>(p) * freq;
      pe.at(p, 2 * i) = static_cast<Real>(std::sin(arg));
      pe.at(p, 2 * i + 1) = static_cast<Real>(std::cos(arg));
    }
  }
  return pe;
}

// Weight scale for transformer block matrices: 1/sqrt(width). Keeps attention
// logits and residual branches at a useful magnitude from the first step;
// much smaller scales leave attention effectively uniform (position-blind)
// and bury sequence-order information below the optimizer's reach.
inline double tower_weight_scale(std::int64_t embd) {
  return 1.0 / std::sqrt(static_cast<double>(embd));
}

// Pre-LN transformer block: x + Attn(LN(x)), then + MLP(LN(.)).
// Multi-head bidirectional attention, MLP hidden width 4D, ReLU.
template <class Real>
struct TransformerLayer {
  int heads = 1;
  Var<Real> ln1_g, ln1_b;
  Var<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Var<Real> ln2_g, ln2_b;
  Var<Real> w1, b1, w2, b2;

  static TransformerLayer random(std::int64_t d, int heads, double wscale, Rng& rng) {
    TransformerLayer l = skeleton(d, heads);
    for (Var<Real>* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2})
      w->mutable_value().fill_gaussian(rng, 0.0, wscale);
    return l;
  }

  // Residual branches end in zeroed projections, so the freshly added block
  // is exactly the identity map. Everything upstream of those projections is
  // randomly initialized and starts learning from the first step.
  static TransformerLayer zero_residual(std::int64_t d, int heads, double wscale, Rng& rng) {
    TransformerLayer l = skeleton(d, heads);
    for (Var<Real>* w : {&l.wq, &l.wk, &l.wv, &l.w1})
      w->mutable_value().fill_gaussian(rng, 0.0, wscale);
    return l;
  }

  Var<Real> forward(const Var<Real>& x) const {
    const std::int64_t d = x.shape()[1];
    const std::int64_t dh = d / heads;
    Var<Real> a = layer_norm(x, ln1_g, ln1_b);
    Var<Real> q = add_rowwise(matmul(a, wq), bq);
    Var<Real> k = add_rowwise(matmul(a, wk), bk);
    Var<Real> v = add_rowwise(matmul(a, wv), bv);
    Var<Real> merged;
    for (int h = 0; h < heads; ++h) {
      Var<Real> qh = cols(q, h * dh, (h + 1) * dh);
      Var<Real> kh = cols(k, h * dh, (h + 1) * dh);
      Var<Real> vh = cols(v, h * dh, (h + 1) * dh);
      Var<Real> s = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      Var<Real> oh = matmul(softmax(s), vh);
      merged = h == 0 ? oh : concat(merged, oh, 1);
    }
    Var<Real> attn_out = add_rowwise(matmul(merged, wo), bo);
    Var<Real> x1 = add(x, attn_out);
    Var<Real> m = layer_norm(x1, ln2_g, ln2_b);
    Var<Real> mlp = add_rowwise(matmul(relu(add_rowwise(matmul(m, w1), b1)), w2), b2);
    return add(x1, mlp);
  }

  void register_params(ParamGroup<Real>& group, const std::string& prefix) const {
    group.add(prefix + "ln1_g", ln1_g);
    group.add(prefix + "ln1_b", ln1_b);
    group.add(prefix + "wq", wq);
    group.add(prefix + "bq", bq);
    group.add(prefix + "wk", wk);
    group.add(prefix + "bk", bk);
    group.add(prefix + "wv", wv);
    group.add(prefix + "bv", bv);
    group.add(prefix + "wo", wo);
    group.add(prefix + "bo", bo);
    group.add(prefix + "ln2_g", ln2_g);
    group.add(prefix + "ln2_b", ln2_b);
    group.add(prefix + "w1", w1);
    group.add(prefix + "b1", b1);
    group.add(prefix + "w2", w2);
    group.add(prefix + "b2", b2);
  }

 private:
  static TransformerLayer skeleton(std::int64_t d, int heads) {
    if (heads <= 0 || d % heads != 0)
      throw ConfigError("transformer: width " + std::to_string(d) +
                        " not divisible by heads " + std::to_string(heads));
    TransformerLayer l;
    l.heads = heads;
    auto ones = [&] { return Var<Real>::leaf(Tensor<Real>::full(Shape{d}, Real(1)), false); };
    auto zvec = [&](std::int64_t n) { return Var<Real>::leaf(Tensor<Real>::zeros(Shape{n}), false); };
    auto zmat = [&](std::int64_t r, std::int64_t c) {
      return Var<Real>::leaf(Tensor<Real>::zeros(Shape{r, c}), false);
    };
    l.ln1_g = ones();
    l.ln1_b = zvec(d);
    l.wq = zmat(d, d); l.bq = zvec(d);
    l.wk = zmat(d, d); l.bk = zvec(d);
    l.wv = zmat(d, d); l.bv = zvec(d);
    l.wo = zmat(d, d); l.bo = zvec(d);
    l.ln2_g = ones();
    l.ln2_b = zvec(d);
    l.w1 = zmat(d, 4 * d); l.b1 = zvec(4 * d);
    l.w2 = zmat(4 * d, d); l.b2 = zvec(d);
    return l;
  }
};

}  // namespace dfer
