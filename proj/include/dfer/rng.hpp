#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>
#include <vector>

namespace dfer {

// splitmix64 finalizer. Full-period bijection on u64; consecutive counter
// values map to statistically independent outputs, which is what makes the
// counter-based scheme below reproducible without storing stream state.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view s) {
  // FNV-1a, then one mixing round so short tags spread over the word.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

// Counter-based generator. A stream is (key, counter); `split` derives an
// independent key from a tag without consuming from this stream, so every
// random decision in a run can be addressed as seed -> purpose -> index and
// replayed exactly, resume included.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : key_(mix64(seed ^ 0x7f4a7c15f39cc060ULL)) {}

  Rng split(std::uint64_t tag) const {
    Rng r;
    r.key_ = mix64(key_ ^ mix64(tag ^ 0xd1b54a32d192ed03ULL));
    r.ctr_ = 0;
    return r;
  }
  Rng split(std::string_view tag) const { return split(hash_tag(tag)); }

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(++ctr_)); }

  // Uniform in [0, 1), 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive; modulo bias is irrelevant
  // at the n << 2^64 scales used here.
  std::int64_t below(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Box-Muller. Always consumes exactly two uniforms and keeps no cached
  // spare, so the draw count per call is fixed and replayable.
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));  // log(1-u1), u1 < 1 so arg > 0
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::int64_t j = below(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t ctr_ = 0;
};

// Addresses a stream as seed -> path of tags. All stochastic choices in
// training and data generation go through this, never through shared
// mutable generators, so any piece of the run can be recomputed in
// isolation (bit-exact resume depends on this).
inline Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  Rng r(seed);
  for (std::uint64_t t : path) r = r.split(t);
  return r;
}

inline Rng stream(std::uint64_t seed, std::string_view purpose,
                  std::initializer_list<std::uint64_t> path = {}) {
  Rng r = Rng(seed).split(purpose);
  for (std::uint64_t t : path) r = r.split(t);
  return r;
}

}  // namespace dfer
