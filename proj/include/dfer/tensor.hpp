#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dfer/errors.hpp"
#include "dfer/rng.hpp"

namespace dfer {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(std::span<const std::int64_t> s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(std::span<const std::int64_t> s) {
  std::int64_t n = 1;
  for (std::int64_t e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

// Dense row-major tensor. Deliberately minimal: the network layer above
// works through a fixed op vocabulary, so this type only carries storage,
// shape bookkeeping, and a few whole-tensor utilities. No views, no
// broadcasting, no strides.
template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s)
      : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), Real(0)) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, Real v) {
    Tensor t(std::move(s));
    for (Real& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(Real v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
  }

  static Tensor from(Shape s, std::initializer_list<Real> vals) {
    Tensor t(std::move(s));
    if (static_cast<std::int64_t>(vals.size()) != t.numel())
      throw ShapeError("initializer size does not match shape " + shape_str(t.shape));
    std::size_t i = 0;
    for (Real v : vals) t.data[i++] = v;
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  bool shape_equals(const Tensor& o) const { return shape == o.shape; }

  Real& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const Real& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  Real& at(std::int64_t i, std::int64_t j) {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  const Real& at(std::int64_t i, std::int64_t j) const {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  Real& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  const Real& at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  Real& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  const Real& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return data[static_cast<std::size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  void fill_gaussian(Rng& rng, double mean, double stddev) {
    for (Real& x : data) x = static_cast<Real>(rng.gaussian(mean, stddev));
  }

  bool all_finite() const {
    for (Real x : data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  const void* raw() const { return data.data(); }
  std::size_t raw_size() const { return data.size() * sizeof(Real); }
};

template <class Real>
bool bitwise_equal(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape != b.shape) return false;
  return a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.raw_size()) == 0;
}

}  // namespace dfer
