#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfer/errors.hpp"
#include "dfer/tensor.hpp"

// Reverse-mode autodiff over a dynamically built graph. Ops validate shapes
// eagerly and all reductions (matmul inner products, norms, row statistics)
// accumulate in double regardless of the storage scalar, so the float
// instantiation matches the double instantiation to float rounding.
//
// Nodes whose inputs carry no gradient requirement store neither parents nor
// a backward closure. Frozen subgraphs therefore cost nothing at backward
// time and release their intermediates as soon as the forward values are
// consumed.

namespace dfer {

template <class Real>
class GradMap;

template <class Real>
struct Node {
  Tensor<Real> value;
  bool requires_grad = false;
  bool is_leaf = false;
  const char* op = "leaf";
  std::uint64_t seq = 0;  // creation order; stable graph-walk tiebreak
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<Real>&, GradMap<Real>&)> backprop;
};

template <class Real>
using NodePtr = std::shared_ptr<Node<Real>>;

inline std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> c{0};
  return ++c;
}

template <class Real>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<Real> n) : n_(std::move(n)) {}

  static Var leaf(Tensor<Real> value, bool requires_grad) {
    auto n = std::make_shared<Node<Real>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    n->seq = next_node_seq();
    return Var(std::move(n));
  }

  static Var constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor<Real>& value() const { return n_->value; }
  // In-place update of a leaf (optimizer step, finite-difference probe).
  // Graphs built from the old value become stale; callers rebuild.
  Tensor<Real>& mutable_value() {
    if (!n_->is_leaf) throw StateError("mutable_value on non-leaf node");
    return n_->value;
  }
  const Shape& shape() const { return n_->value.shape; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!n_->is_leaf) throw StateError("set_requires_grad on non-leaf node");
    n_->requires_grad = rg;
  }
  const NodePtr<Real>& node() const { return n_; }

 private:
  NodePtr<Real> n_;
};

template <class Real>
class GradMap {
 public:
  // Accumulation buffer for a node, zero-initialized on first touch.
  Tensor<Real>& buf(const Var<Real>& v) {
    auto it = m_.find(v.node().get());
    if (it == m_.end())
      it = m_.emplace(v.node().get(), Tensor<Real>::zeros(v.shape())).first;
    return it->second;
  }

  // Null means no gradient reached the node: treated as exact zero.
  const Tensor<Real>* find(const Var<Real>& v) const {
    auto it = m_.find(v.node().get());
    return it == m_.end() ? nullptr : &it->second;
  }

  const Tensor<Real>* find_node(const Node<Real>* n) const {
    auto it = m_.find(n);
    return it == m_.end() ? nullptr : &it->second;
  }

  void seed(const Var<Real>& v, Tensor<Real> g) { m_[v.node().get()] = std::move(g); }
  void erase(const Node<Real>* n) { m_.erase(n); }
  std::size_t size() const { return m_.size(); }

 private:
  std::unordered_map<const Node<Real>*, Tensor<Real>> m_;
};

namespace detail {

template <class Real>
Var<Real> make_op(const char* op, Tensor<Real> value, std::vector<Var<Real>> parents,
                  std::function<void(const Tensor<Real>&, GradMap<Real>&)> back) {
  auto n = std::make_shared<Node<Real>>();
  n->op = op;
  n->seq = next_node_seq();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(back);
  }
  return Var<Real>(std::move(n));
}

// C[M,N] = A[M,K] x B[K,N]; double row accumulator, written back once.
template <class Real>
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B,
             Real* C, bool accumulate) {
  std::vector<double> acc(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < M; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const Real* a = A + i * K;
    for (std::int64_t k = 0; k < K; ++k) {
      double av = static_cast<double>(a[k]);
      const Real* b = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) acc[static_cast<std::size_t>(j)] += av * static_cast<double>(b[j]);
    }
    Real* c = C + i * N;
    for (std::int64_t j = 0; j < N; ++j) {
      double v = acc[static_cast<std::size_t>(j)];
      c[j] = accumulate ? static_cast<Real>(static_cast<double>(c[j]) + v) : static_cast<Real>(v);
    }
  }
}

// C[M,N] = A[M,K] x B^T where B is [N,K].
template <class Real>
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B,
             Real* C, bool accumulate) {
  for (std::int64_t i = 0; i < M; ++i) {
    const Real* a = A + i * K;
    Real* c = C + i * N;
    for (std::int64_t j = 0; j < N; ++j) {
      const Real* b = B + j * K;
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += static_cast<double>(a[k]) * static_cast<double>(b[k]);
      c[j] = accumulate ? static_cast<Real>(static_cast<double>(c[j]) + acc) : static_cast<Real>(acc);
    }
  }
}

// C[M,N] = A^T x B where A is [K,M], B is [K,N].
template <class Real>
void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B,
             Real* C, bool accumulate) {
  std::vector<double> acc(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < M; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::int64_t k = 0; k < K; ++k) {
      double av = static_cast<double>(A[k * M + i]);
      const Real* b = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) acc[static_cast<std::size_t>(j)] += av * static_cast<double>(b[j]);
    }
    Real* c = C + i * N;
    for (std::int64_t j = 0; j < N; ++j) {
      double v = acc[static_cast<std::size_t>(j)];
      c[j] = accumulate ? static_cast<Real>(static_cast<double>(c[j]) + v) : static_cast<Real>(v);
    }
  }
}

template <class Real>
double dot_d(const Real* a, const Real* b, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class Real>
void require_rank(const char* op, const Var<Real>& v, int rank) {
  if (v.value().rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " operand, got " +
                     shape_str(v.shape()));
}

}  // namespace detail

// ---- forward ops ----

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  if (b.shape()[0] != K)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor<Real> out(Shape{M, N});
  detail::gemm_nn(M, N, K, a.value().data.data(), b.value().data.data(), out.data.data(), false);
  return detail::make_op<Real>(
      "matmul", std::move(out), {a, b},
      [a, b, M, N, K](const Tensor<Real>& g, GradMap<Real>& sink) {
        if (a.requires_grad())
          detail::gemm_nt(M, K, N, g.data.data(), b.value().data.data(), sink.buf(a).data.data(), true);
        if (b.requires_grad())
          detail::gemm_tn(K, N, M, a.value().data.data(), g.data.data(), sink.buf(b).data.data(), true);
      });
}

template <class Real>
Var<Real> transpose(const Var<Real>& x) {
  detail::require_rank("transpose", x, 2);
  const std::int64_t M = x.shape()[0], N = x.shape()[1];
  Tensor<Real> out(Shape{N, M});
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) out.at(j, i) = x.value().at(i, j);
  return detail::make_op<Real>("transpose", std::move(out), {x},
                               [x, M, N](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = 0; i < M; ++i)
                                   for (std::int64_t j = 0; j < N; ++j) dx.at(i, j) += g.at(j, i);
                               });
}

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Real> out(a.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_op<Real>("add", std::move(out), {a, b},
                               [a, b, n](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 if (a.requires_grad()) {
                                   Tensor<Real>& da = sink.buf(a);
                                   for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
                                 }
                                 if (b.requires_grad()) {
                                   Tensor<Real>& db = sink.buf(b);
                                   for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
                                 }
                               });
}

// m[L,D] + v[D] broadcast over rows. The only broadcast in the op set.
template <class Real>
Var<Real> add_rowwise(const Var<Real>& m, const Var<Real>& v) {
  detail::require_rank("add_rowwise", m, 2);
  detail::require_rank("add_rowwise", v, 1);
  const std::int64_t L = m.shape()[0], D = m.shape()[1];
  if (v.shape()[0] != D)
    throw ShapeError("add_rowwise: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  Tensor<Real> out(Shape{L, D});
  for (std::int64_t i = 0; i < L; ++i)
    for (std::int64_t j = 0; j < D; ++j) out.at(i, j) = m.value().at(i, j) + v.value()[j];
  return detail::make_op<Real>(
      "add_rowwise", std::move(out), {m, v},
      [m, v, L, D](const Tensor<Real>& g, GradMap<Real>& sink) {
        if (m.requires_grad()) {
          Tensor<Real>& dm = sink.buf(m);
          const std::int64_t n = L * D;
          for (std::int64_t i = 0; i < n; ++i) dm[i] += g[i];
        }
        if (v.requires_grad()) {
          Tensor<Real>& dv = sink.buf(v);
          for (std::int64_t j = 0; j < D; ++j) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < L; ++i) acc += static_cast<double>(g.at(i, j));
            dv[j] = static_cast<Real>(static_cast<double>(dv[j]) + acc);
          }
        }
      });
}

template <class Real>
Var<Real> scale(const Var<Real>& x, double c) {
  Tensor<Real> out(x.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i)
    out[i] = static_cast<Real>(c * static_cast<double>(x.value()[i]));
  return detail::make_op<Real>("scale", std::move(out), {x},
                               [x, c, n](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = 0; i < n; ++i)
                                   dx[i] += static_cast<Real>(c * static_cast<double>(g[i]));
                               });
}

// Subgradient at 0 is 0.
template <class Real>
Var<Real> relu(const Var<Real>& x) {
  Tensor<Real> out(x.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = x.value()[i] > Real(0) ? x.value()[i] : Real(0);
  return detail::make_op<Real>("relu", std::move(out), {x},
                               [x, n](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = 0; i < n; ++i)
                                   if (x.value()[i] > Real(0)) dx[i] += g[i];
                               });
}

// Row-wise normalization over the last axis of x[L,D], biased variance,
// then elementwise gain and bias.
template <class Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gain, const Var<Real>& bias,
                     double eps = 1e-5) {
  detail::require_rank("layer_norm", x, 2);
  detail::require_rank("layer_norm", gain, 1);
  detail::require_rank("layer_norm", bias, 1);
  const std::int64_t L = x.shape()[0], D = x.shape()[1];
  if (gain.shape()[0] != D || bias.shape()[0] != D)
    throw ShapeError("layer_norm: gain/bias width must match " + shape_str(x.shape()));
  Tensor<Real> out(Shape{L, D});
  std::vector<double> mu(static_cast<std::size_t>(L)), sd(static_cast<std::size_t>(L));
  for (std::int64_t i = 0; i < L; ++i) {
    double m = 0.0;
    for (std::int64_t j = 0; j < D; ++j) m += static_cast<double>(x.value().at(i, j));
    m /= static_cast<double>(D);
    double v = 0.0;
    for (std::int64_t j = 0; j < D; ++j) {
      double d = static_cast<double>(x.value().at(i, j)) - m;
      v += d * d;
    }
    v /= static_cast<double>(D);
    double s = std::sqrt(v + eps);
    mu[static_cast<std::size_t>(i)] = m;
    sd[static_cast<std::size_t>(i)] = s;
    for (std::int64_t j = 0; j < D; ++j) {
      double xh = (static_cast<double>(x.value().at(i, j)) - m) / s;
      out.at(i, j) = static_cast<Real>(xh * static_cast<double>(gain.value()[j]) +
                                       static_cast<double>(bias.value()[j]));
    }
  }
  return detail::make_op<Real>(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, L, D, mu = std::move(mu), sd = std::move(sd)](const Tensor<Real>& g,
                                                                    GradMap<Real>& sink) {
        std::vector<double> xh(static_cast<std::size_t>(D)), dxh(static_cast<std::size_t>(D));
        for (std::int64_t i = 0; i < L; ++i) {
          const double m = mu[static_cast<std::size_t>(i)];
          const double s = sd[static_cast<std::size_t>(i)];
          double m1 = 0.0, m2 = 0.0;
          for (std::int64_t j = 0; j < D; ++j) {
            double h = (static_cast<double>(x.value().at(i, j)) - m) / s;
            double dh = static_cast<double>(g.at(i, j)) * static_cast<double>(gain.value()[j]);
            xh[static_cast<std::size_t>(j)] = h;
            dxh[static_cast<std::size_t>(j)] = dh;
            m1 += dh;
            m2 += dh * h;
          }
          m1 /= static_cast<double>(D);
          m2 /= static_cast<double>(D);
          if (x.requires_grad()) {
            Tensor<Real>& dx = sink.buf(x);
            for (std::int64_t j = 0; j < D; ++j) {
              double v = (dxh[static_cast<std::size_t>(j)] - m1 -
                          xh[static_cast<std::size_t>(j)] * m2) / s;
              dx.at(i, j) = static_cast<Real>(static_cast<double>(dx.at(i, j)) + v);
            }
          }
          if (gain.requires_grad()) {
            Tensor<Real>& dg = sink.buf(gain);
            for (std::int64_t j = 0; j < D; ++j)
              dg[j] = static_cast<Real>(static_cast<double>(dg[j]) +
                                        static_cast<double>(g.at(i, j)) *
                                            xh[static_cast<std::size_t>(j)]);
          }
          if (bias.requires_grad()) {
            Tensor<Real>& db = sink.buf(bias);
            for (std::int64_t j = 0; j < D; ++j)
              db[j] = static_cast<Real>(static_cast<double>(db[j]) +
                                        static_cast<double>(g.at(i, j)));
          }
        }
      });
}

// Max-subtracted softmax over the last axis; rank 1 or rank 2. Internally
// computed in double. For inputs bounded away from the exp underflow range
// every output component is strictly inside (0, 1).
template <class Real>
Var<Real> softmax(const Var<Real>& x) {
  const int r = x.value().rank();
  if (r != 1 && r != 2)
    throw ShapeError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
  const std::int64_t L = r == 2 ? x.shape()[0] : 1;
  const std::int64_t D = r == 2 ? x.shape()[1] : x.shape()[0];
  if (D == 0) throw ShapeError("softmax: empty axis");
  Tensor<Real> out(x.shape());
  for (std::int64_t i = 0; i < L; ++i) {
    const Real* xi = x.value().data.data() + i * D;
    Real* oi = out.data.data() + i * D;
    double m = static_cast<double>(xi[0]);
    for (std::int64_t j = 1; j < D; ++j) m = std::max(m, static_cast<double>(xi[j]));
    double sum = 0.0;
    for (std::int64_t j = 0; j < D; ++j) sum += std::exp(static_cast<double>(xi[j]) - m);
    for (std::int64_t j = 0; j < D; ++j)
      oi[j] = static_cast<Real>(std::exp(static_cast<double>(xi[j]) - m) / sum);
  }
  Var<Real> result = detail::make_op<Real>(
      "softmax", std::move(out), {x}, nullptr);
  // backward needs the output; capture the result node by weak reference to
  // avoid a cycle, reading its value at backprop time.
  if (result.requires_grad()) {
    std::weak_ptr<Node<Real>> self = result.node();
    result.node()->backprop = [x, self, L, D](const Tensor<Real>& g, GradMap<Real>& sink) {
      auto out_node = self.lock();
      const Tensor<Real>& y = out_node->value;
      Tensor<Real>& dx = sink.buf(x);
      for (std::int64_t i = 0; i < L; ++i) {
        const Real* yi = y.data.data() + i * D;
        const Real* gi = g.data.data() + i * D;
        Real* di = dx.data.data() + i * D;
        double dot = 0.0;
        for (std::int64_t j = 0; j < D; ++j)
          dot += static_cast<double>(gi[j]) * static_cast<double>(yi[j]);
        for (std::int64_t j = 0; j < D; ++j) {
          double v = static_cast<double>(yi[j]) * (static_cast<double>(gi[j]) - dot);
          di[j] = static_cast<Real>(static_cast<double>(di[j]) + v);
        }
      }
    };
  }
  return result;
}

// Mean over one axis of a rank-2 tensor.
template <class Real>
Var<Real> mean_axis(const Var<Real>& x, int axis) {
  detail::require_rank("mean_axis", x, 2);
  if (axis != 0 && axis != 1) throw ShapeError("mean_axis: axis must be 0 or 1");
  const std::int64_t M = x.shape()[0], N = x.shape()[1];
  const std::int64_t keep = axis == 0 ? N : M;
  const std::int64_t red = axis == 0 ? M : N;
  if (red == 0) throw ShapeError("mean_axis: empty reduction axis");
  Tensor<Real> out(Shape{keep});
  for (std::int64_t o = 0; o < keep; ++o) {
    double acc = 0.0;
    for (std::int64_t r = 0; r < red; ++r) {
      acc += static_cast<double>(axis == 0 ? x.value().at(r, o) : x.value().at(o, r));
    }
    out[o] = static_cast<Real>(acc / static_cast<double>(red));
  }
  return detail::make_op<Real>(
      "mean_axis", std::move(out), {x},
      [x, axis, M, N](const Tensor<Real>& g, GradMap<Real>& sink) {
        Tensor<Real>& dx = sink.buf(x);
        const double inv = 1.0 / static_cast<double>(axis == 0 ? M : N);
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t j = 0; j < N; ++j) {
            double v = static_cast<double>(axis == 0 ? g[j] : g[i]) * inv;
            dx.at(i, j) = static_cast<Real>(static_cast<double>(dx.at(i, j)) + v);
          }
      });
}

// Sum of all elements, as a [1] tensor.
template <class Real>
Var<Real> sum(const Var<Real>& x) {
  double acc = 0.0;
  const std::int64_t n = x.value().numel();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x.value()[i]);
  return detail::make_op<Real>("sum", Tensor<Real>::scalar(static_cast<Real>(acc)), {x},
                               [x, n](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = 0; i < n; ++i) dx[i] += g[0];
                               });
}

template <class Real>
Var<Real> concat(const Var<Real>& a, const Var<Real>& b, int axis) {
  detail::require_rank("concat", a, 2);
  detail::require_rank("concat", b, 2);
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  const int other = 1 - axis;
  if (a.shape()[other] != b.shape()[other])
    throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " disagree off axis " + std::to_string(axis));
  Shape s = a.shape();
  s[axis] += b.shape()[axis];
  Tensor<Real> out(s);
  const std::int64_t R = s[0], C = s[1];
  const std::int64_t ar = a.shape()[0], ac = a.shape()[1];
  for (std::int64_t i = 0; i < R; ++i)
    for (std::int64_t j = 0; j < C; ++j) {
      if (axis == 0)
        out.at(i, j) = i < ar ? a.value().at(i, j) : b.value().at(i - ar, j);
      else
        out.at(i, j) = j < ac ? a.value().at(i, j) : b.value().at(i, j - ac);
    }
  return detail::make_op<Real>(
      "concat", std::move(out), {a, b},
      [a, b, axis, ar, ac, R, C](const Tensor<Real>& g, GradMap<Real>& sink) {
        for (std::int64_t i = 0; i < R; ++i)
          for (std::int64_t j = 0; j < C; ++j) {
            const bool first = axis == 0 ? i < ar : j < ac;
            if (first) {
              if (a.requires_grad()) sink.buf(a).at(i, j) += g.at(i, j);
            } else if (b.requires_grad()) {
              if (axis == 0)
                sink.buf(b).at(i - ar, j) += g.at(i, j);
              else
                sink.buf(b).at(i, j - ac) += g.at(i, j);
            }
          }
      });
}

// Row slice [r0, r1) of a rank-2 tensor.
template <class Real>
Var<Real> rows(const Var<Real>& x, std::int64_t r0, std::int64_t r1) {
  detail::require_rank("rows", x, 2);
  const std::int64_t M = x.shape()[0], N = x.shape()[1];
  if (r0 < 0 || r1 > M || r0 >= r1)
    throw ShapeError("rows: invalid range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") for " + shape_str(x.shape()));
  Tensor<Real> out(Shape{r1 - r0, N});
  for (std::int64_t i = r0; i < r1; ++i)
    for (std::int64_t j = 0; j < N; ++j) out.at(i - r0, j) = x.value().at(i, j);
  return detail::make_op<Real>("rows", std::move(out), {x},
                               [x, r0, r1, N](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = r0; i < r1; ++i)
                                   for (std::int64_t j = 0; j < N; ++j)
                                     dx.at(i, j) += g.at(i - r0, j);
                               });
}

// Column slice [c0, c1) of a rank-2 tensor.
template <class Real>
Var<Real> cols(const Var<Real>& x, std::int64_t c0, std::int64_t c1) {
  detail::require_rank("cols", x, 2);
  const std::int64_t M = x.shape()[0], N = x.shape()[1];
  if (c0 < 0 || c1 > N || c0 >= c1)
    throw ShapeError("cols: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") for " + shape_str(x.shape()));
  Tensor<Real> out(Shape{M, c1 - c0});
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = x.value().at(i, j);
  return detail::make_op<Real>("cols", std::move(out), {x},
                               [x, c0, c1, M](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t i = 0; i < M; ++i)
                                   for (std::int64_t j = c0; j < c1; ++j)
                                     dx.at(i, j) += g.at(i, j - c0);
                               });
}

// Index along axis 0, dropping that axis: rank r -> rank r-1. Rank-1 input
// yields a [1] scalar. This is also the embedding-table lookup.
template <class Real>
Var<Real> select(const Var<Real>& x, std::int64_t i) {
  const int r = x.value().rank();
  if (r < 1) throw ShapeError("select: rank must be >= 1");
  const std::int64_t M = x.shape()[0];
  if (i < 0 || i >= M)
    throw ShapeError("select: index " + std::to_string(i) + " out of range for " +
                     shape_str(x.shape()));
  Shape s(x.shape().begin() + 1, x.shape().end());
  if (s.empty()) s = Shape{1};
  Tensor<Real> out(s);
  const std::int64_t stride = out.numel();
  for (std::int64_t k = 0; k < stride; ++k) out[k] = x.value()[i * stride + k];
  return detail::make_op<Real>("select", std::move(out), {x},
                               [x, i, stride](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 for (std::int64_t k = 0; k < stride; ++k)
                                   dx[i * stride + k] += g[k];
                               });
}

// Stack rank-1 vectors of a common width into a [L,D] matrix.
template <class Real>
Var<Real> stack_rows(std::span<const Var<Real>> rows_in) {
  if (rows_in.empty()) throw ShapeError("stack_rows: no rows");
  const std::int64_t D = rows_in[0].shape()[0];
  for (const auto& v : rows_in) {
    if (v.value().rank() != 1 || v.shape()[0] != D)
      throw ShapeError("stack_rows: all rows must be rank-1 of width " + std::to_string(D));
  }
  const std::int64_t L = static_cast<std::int64_t>(rows_in.size());
  Tensor<Real> out(Shape{L, D});
  for (std::int64_t i = 0; i < L; ++i)
    for (std::int64_t j = 0; j < D; ++j)
      out.at(i, j) = rows_in[static_cast<std::size_t>(i)].value()[j];
  std::vector<Var<Real>> parents(rows_in.begin(), rows_in.end());
  return detail::make_op<Real>(
      "stack_rows", std::move(out), parents,
      [parents, L, D](const Tensor<Real>& g, GradMap<Real>& sink) {
        for (std::int64_t i = 0; i < L; ++i) {
          const Var<Real>& p = parents[static_cast<std::size_t>(i)];
          if (!p.requires_grad()) continue;
          Tensor<Real>& dp = sink.buf(p);
          for (std::int64_t j = 0; j < D; ++j) dp[j] += g.at(i, j);
        }
      });
}

template <class Real>
Var<Real> stack_rows(std::initializer_list<Var<Real>> rows_in) {
  std::vector<Var<Real>> v(rows_in);
  return stack_rows(std::span<const Var<Real>>(v));
}

template <class Real>
Var<Real> reshape(const Var<Real>& x, Shape s) {
  if (shape_numel(s) != x.value().numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s) +
                     " changes element count");
  Tensor<Real> out(std::move(s));
  out.data = x.value().data;
  return detail::make_op<Real>("reshape", std::move(out), {x},
                               [x](const Tensor<Real>& g, GradMap<Real>& sink) {
                                 Tensor<Real>& dx = sink.buf(x);
                                 const std::int64_t n = dx.numel();
                                 for (std::int64_t i = 0; i < n; ++i) dx[i] += g[i];
                               });
}

// Cosine similarity of two rank-1 vectors, with a hard floor on the norms:
// a feature collapsing to the zero vector is a training bug worth surfacing,
// not a value to clamp quietly.
inline constexpr double kNormFloor = 1e-12;

template <class Real>
Var<Real> cosine(const Var<Real>& a, const Var<Real>& b) {
  detail::require_rank("cosine", a, 1);
  detail::require_rank("cosine", b, 1);
  const std::int64_t D = a.shape()[0];
  if (b.shape()[0] != D)
    throw ShapeError("cosine: widths differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const double d = detail::dot_d(a.value().data.data(), b.value().data.data(), D);
  const double na = std::sqrt(detail::dot_d(a.value().data.data(), a.value().data.data(), D));
  const double nb = std::sqrt(detail::dot_d(b.value().data.data(), b.value().data.data(), D));
  if (na < kNormFloor || nb < kNormFloor)
    throw NumericError("cosine: degenerate feature norm (" + std::to_string(na) + ", " +
                       std::to_string(nb) + ")");
  const double c = d / (na * nb);
  return detail::make_op<Real>(
      "cosine", Tensor<Real>::scalar(static_cast<Real>(c)), {a, b},
      [a, b, D, na, nb, c](const Tensor<Real>& g, GradMap<Real>& sink) {
        const double gg = static_cast<double>(g[0]);
        if (a.requires_grad()) {
          Tensor<Real>& da = sink.buf(a);
          for (std::int64_t i = 0; i < D; ++i) {
            double v = gg * (static_cast<double>(b.value()[i]) / (na * nb) -
                             c * static_cast<double>(a.value()[i]) / (na * na));
            da[i] = static_cast<Real>(static_cast<double>(da[i]) + v);
          }
        }
        if (b.requires_grad()) {
          Tensor<Real>& db = sink.buf(b);
          for (std::int64_t i = 0; i < D; ++i) {
            double v = gg * (static_cast<double>(a.value()[i]) / (na * nb) -
                             c * static_cast<double>(b.value()[i]) / (nb * nb));
            db[i] = static_cast<Real>(static_cast<double>(db[i]) + v);
          }
        }
      });
}

// Cross-entropy of a logit vector against an integer label, fused with the
// log-softmax for stability (max subtraction, double accumulation).
template <class Real>
Var<Real> cross_entropy_logits(const Var<Real>& z, std::int64_t label) {
  detail::require_rank("cross_entropy_logits", z, 1);
  const std::int64_t C = z.shape()[0];
  if (label < 0 || label >= C)
    throw ShapeError("cross_entropy_logits: label " + std::to_string(label) +
                     " out of range for " + shape_str(z.shape()));
  double m = static_cast<double>(z.value()[0]);
  for (std::int64_t j = 1; j < C; ++j) m = std::max(m, static_cast<double>(z.value()[j]));
  double sum = 0.0;
  for (std::int64_t j = 0; j < C; ++j) sum += std::exp(static_cast<double>(z.value()[j]) - m);
  const double lse = m + std::log(sum);
  const double loss = lse - static_cast<double>(z.value()[label]);
  return detail::make_op<Real>(
      "cross_entropy_logits", Tensor<Real>::scalar(static_cast<Real>(loss)), {z},
      [z, label, C, m, sum](const Tensor<Real>& g, GradMap<Real>& sink) {
        Tensor<Real>& dz = sink.buf(z);
        const double gg = static_cast<double>(g[0]);
        for (std::int64_t j = 0; j < C; ++j) {
          double p = std::exp(static_cast<double>(z.value()[j]) - m) / sum;
          double v = gg * (p - (j == label ? 1.0 : 0.0));
          dz[j] = static_cast<Real>(static_cast<double>(dz[j]) + v);
        }
      });
}

// Mean of scalar ([1]-shaped) terms. Composite, not a primitive.
template <class Real>
Var<Real> average(std::span<const Var<Real>> terms) {
  if (terms.empty()) throw ShapeError("average: no terms");
  Var<Real> stacked = stack_rows(terms);
  return mean_axis(stacked, 0);
}

// ---- backward pass ----

// Postorder over the gradient-requiring subgraph; parents precede children.
// Parent visit order is the stored order, so the walk is deterministic.
template <class Real>
std::vector<Node<Real>*> topo_postorder(Node<Real>* root) {
  std::vector<Node<Real>*> order;
  if (!root || !root->requires_grad) return order;
  std::unordered_set<const Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<Real>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

// Gradients of a scalar loss with respect to every reachable leaf that
// requires them. Parameters not on the graph simply have no entry (zero).
// Intermediate buffers are dropped as soon as their node is processed.
template <class Real>
GradMap<Real> grad(const Var<Real>& loss) {
  if (loss.value().numel() != 1)
    throw ShapeError("grad: loss must be scalar, got " + shape_str(loss.shape()));
  GradMap<Real> map;
  if (!loss.requires_grad()) return map;
  map.seed(loss, Tensor<Real>::full(loss.shape(), Real(1)));
  std::vector<Node<Real>*> order = topo_postorder(loss.node().get());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    const Tensor<Real>* g = map.find_node(n);
    if (!g) continue;
    if (n->backprop) {
      n->backprop(*g, map);
      map.erase(n);  // interior gradients are never read again
    }
  }
  return map;
}

}  // namespace dfer
