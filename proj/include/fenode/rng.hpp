#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "fenode/error.hpp"

namespace fenode {

/// splitmix64 step. Used to derive independent stream seeds from (seed, index)
/// pairs so that dataset i, network i, or episode i always sees the same draws
/// no matter which order (or thread) produced its siblings.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic stream derivation: mixes a base seed with a stream id.
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL));
}

/// Seeded RNG with hand-rolled distributions. std::mt19937_64 is specified
/// bit-for-bit by the standard, but the std distributions are not; uniform and
/// normal are implemented here so output files stay byte-identical across
/// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  static Rng stream(std::uint64_t seed, std::uint64_t id) { return Rng(derive_stream(seed, id)); }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  /// Standard normal via Box-Muller. Draws two uniforms per call and discards
  /// the spare so copies of the generator stay in lockstep.
  double normal() {
    double u1 = (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [lo, hi]. Multiply-shift bounded draw; the bias of
  /// 2^-64 per bucket is irrelevant at the range sizes used here.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ConfigError("uniform_int: empty range");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    const auto r = static_cast<std::uint64_t>((static_cast<unsigned __int128>(gen_()) * span) >> 64);
    return lo + static_cast<std::int64_t>(r);
  }

  /// First k entries of a Fisher-Yates shuffle of 0..n-1: k distinct indices.
  template <class OutIt>
  void sample_without_replacement(std::int64_t n, std::int64_t k, OutIt out) {
    if (k > n) throw ConfigError("sample_without_replacement: k > n");
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < k; ++i) {
      const auto j = uniform_int(i, n - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      *out++ = idx[static_cast<std::size_t>(i)];
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace fenode
