#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fenode/error.hpp"

namespace fenode {

/// Transition tuples (x_j, u_j, x_{j+1}, dt_j) from one dynamical system, i.e.
/// one function in the encoder's sense. Stored flat, row-major.
struct TrajectoryDataset {
  std::string family;
  int state_dim = 0;
  int control_dim = 0;
  std::vector<double> hidden;  // hidden parameters of the generating system

  std::vector<double> x;       // size() * state_dim
  std::vector<double> u;       // size() * control_dim
  std::vector<double> x_next;  // size() * state_dim
  std::vector<double> dt;      // size()

  std::size_t size() const { return dt.size(); }

  std::span<const double> state(std::size_t j) const {
    return {x.data() + j * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
  }
  std::span<const double> control(std::size_t j) const {
    return {u.data() + j * static_cast<std::size_t>(control_dim), static_cast<std::size_t>(control_dim)};
  }
  std::span<const double> next_state(std::size_t j) const {
    return {x_next.data() + j * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
  }

  void validate() const {
    if (state_dim < 1) throw ConfigError("dataset: state_dim must be >= 1");
    if (control_dim < 0) throw ConfigError("dataset: control_dim must be >= 0");
    const std::size_t m = size();
    if (x.size() != m * static_cast<std::size_t>(state_dim) ||
        x_next.size() != m * static_cast<std::size_t>(state_dim) ||
        u.size() != m * static_cast<std::size_t>(control_dim))
      throw ConfigError("dataset: tuple array sizes disagree");
    for (double d : dt)
      if (!(d > 0.0) || !std::isfinite(d)) throw ConfigError("dataset: dt entries must be positive");
  }
};

/// Empty dataset carrying src's family, dimensions and hidden record.
inline TrajectoryDataset shell_of(const TrajectoryDataset& src) {
  TrajectoryDataset out;
  out.family = src.family;
  out.state_dim = src.state_dim;
  out.control_dim = src.control_dim;
  out.hidden = src.hidden;
  return out;
}

/// Copies tuples [from, from + count) of src onto the end of dst. The slice
/// stays contiguous, so rollout evaluation remains valid on it.
inline void append_tuples(TrajectoryDataset& dst, const TrajectoryDataset& src, std::size_t from,
                          std::size_t count) {
  if (from + count > src.size()) throw ConfigError("append_tuples: slice out of range");
  const auto n = static_cast<std::size_t>(src.state_dim);
  const auto p = static_cast<std::size_t>(src.control_dim);
  dst.x.insert(dst.x.end(), src.x.begin() + static_cast<std::ptrdiff_t>(from * n),
               src.x.begin() + static_cast<std::ptrdiff_t>((from + count) * n));
  dst.u.insert(dst.u.end(), src.u.begin() + static_cast<std::ptrdiff_t>(from * p),
               src.u.begin() + static_cast<std::ptrdiff_t>((from + count) * p));
  dst.x_next.insert(dst.x_next.end(), src.x_next.begin() + static_cast<std::ptrdiff_t>(from * n),
                    src.x_next.begin() + static_cast<std::ptrdiff_t>((from + count) * n));
  dst.dt.insert(dst.dt.end(), src.dt.begin() + static_cast<std::ptrdiff_t>(from),
                src.dt.begin() + static_cast<std::ptrdiff_t>(from + count));
}

/// Per-dimension shift/scale putting training states at zero mean and unit
/// variance. Deltas live in the scaled space: they divide by std only.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  int dim() const { return static_cast<int>(mean.size()); }

  static Normalizer identity(int n) {
    return Normalizer{std::vector<double>(static_cast<std::size_t>(n), 0.0),
                      std::vector<double>(static_cast<std::size_t>(n), 1.0)};
  }

  void normalize(std::span<const double> x, std::span<double> z) const {
    for (std::size_t i = 0; i < mean.size(); ++i) z[i] = (x[i] - mean[i]) / stddev[i];
  }
  void denormalize(std::span<const double> z, std::span<double> x) const {
    for (std::size_t i = 0; i < mean.size(); ++i) x[i] = z[i] * stddev[i] + mean[i];
  }
  void normalize_delta(std::span<const double> dx, std::span<double> dz) const {
    for (std::size_t i = 0; i < mean.size(); ++i) dz[i] = dx[i] / stddev[i];
  }
  void denormalize_delta(std::span<const double> dz, std::span<double> dx) const {
    for (std::size_t i = 0; i < mean.size(); ++i) dx[i] = dz[i] * stddev[i];
  }
};

/// Population statistics over every state seen in the datasets (x and x_next
/// columns both count). Standard deviations are floored at 1e-8 so constant
/// dimensions stay finite.
inline Normalizer fit_normalizer(std::span<const TrajectoryDataset> datasets) {
  if (datasets.empty()) throw ConfigError("fit_normalizer: no datasets");
  const int n = datasets.front().state_dim;
  std::vector<double> sum(static_cast<std::size_t>(n), 0.0), sumsq(static_cast<std::size_t>(n), 0.0);
  std::size_t count = 0;
  for (const auto& ds : datasets) {
    if (ds.state_dim != n) throw ConfigError("fit_normalizer: mixed state dims");
    for (std::size_t j = 0; j < ds.size(); ++j) {
      for (int i = 0; i < n; ++i) {
        const double a = ds.state(j)[static_cast<std::size_t>(i)];
        const double b = ds.next_state(j)[static_cast<std::size_t>(i)];
        sum[static_cast<std::size_t>(i)] += a + b;
        sumsq[static_cast<std::size_t>(i)] += a * a + b * b;
      }
      ++count;
    }
  }
  if (count == 0) throw ConfigError("fit_normalizer: datasets hold no tuples");
  Normalizer norm = Normalizer::identity(n);
  const double N = 2.0 * static_cast<double>(count);
  for (int i = 0; i < n; ++i) {
    const double m = sum[static_cast<std::size_t>(i)] / N;
    const double var = sumsq[static_cast<std::size_t>(i)] / N - m * m;
    norm.mean[static_cast<std::size_t>(i)] = m;
    norm.stddev[static_cast<std::size_t>(i)] = std::sqrt(var > 0.0 ? var : 0.0);
    if (norm.stddev[static_cast<std::size_t>(i)] < 1e-8) norm.stddev[static_cast<std::size_t>(i)] = 1e-8;
  }
  return norm;
}

}  // namespace fenode
