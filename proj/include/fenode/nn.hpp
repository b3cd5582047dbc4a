#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fenode/error.hpp"
#include "fenode/rng.hpp"

namespace fenode {

enum class Activation : std::uint32_t { Tanh = 0 };

/// Fully connected net: dims = [in, hidden..., out]. Hidden layers use the
/// activation, the output layer is linear. Forward/backward accept specs with
/// no hidden layer (a single linear map); initialization requires at least one.
struct MlpSpec {
  std::vector<int> dims;
  Activation act = Activation::Tanh;

  int input_dim() const { return dims.front(); }
  int output_dim() const { return dims.back(); }
  int layer_count() const { return static_cast<int>(dims.size()) - 1; }
};

inline void validate(const MlpSpec& spec) {
  if (spec.dims.size() < 2) throw ConfigError("mlp spec needs at least [in, out] dims");
  for (int d : spec.dims)
    if (d < 1) throw ConfigError("mlp spec dims must all be >= 1");
  if (spec.act != Activation::Tanh) throw ConfigError("unknown activation");
}

/// Flat parameter count: per layer, (fan_in + 1) * fan_out.
inline std::size_t param_count(const MlpSpec& spec) {
  validate(spec);
  std::size_t n = 0;
  for (int l = 0; l < spec.layer_count(); ++l)
    n += (static_cast<std::size_t>(spec.dims[l]) + 1) * static_cast<std::size_t>(spec.dims[l + 1]);
  return n;
}

/// Parameters in layer order: W0 row-major (out x in), b0, W1, b1, ...
struct MlpParams {
  MlpSpec spec;
  std::vector<double> w;
};

/// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.
/// Draw order is row-major per layer and part of the determinism contract.
inline MlpParams mlp_init(const MlpSpec& spec, std::uint64_t seed) {
  validate(spec);
  if (spec.dims.size() < 3) throw ConfigError("mlp_init needs at least one hidden layer");
  MlpParams p{spec, std::vector<double>(param_count(spec), 0.0)};
  Rng rng(seed);
  std::size_t off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const auto fan_in = static_cast<std::size_t>(spec.dims[l]);
    const auto fan_out = static_cast<std::size_t>(spec.dims[l + 1]);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < fan_in * fan_out; ++i) p.w[off + i] = rng.uniform(-a, a);
    off += fan_in * fan_out + fan_out;  // biases stay zero
  }
  return p;
}

namespace detail {

// Dot product with four independent accumulators. The summation order is fixed
// (and thus deterministic); the independence lets the compiler keep several
// FMAs in flight, which matters since everything here runs on one core.
inline double dot4(const double* w, const double* x, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += w[i] * x[i];
    s1 += w[i + 1] * x[i + 1];
    s2 += w[i + 2] * x[i + 2];
    s3 += w[i + 3] * x[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += w[i] * x[i];
  return s;
}

inline void axpy(double a, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

/// Scratch space reused across forward/backward calls.
struct MlpWork {
  std::vector<double> acts;   // activation trace, one block per layer incl input
  std::vector<double> delta;  // backward scratch, two blocks of max width
};

namespace detail {

inline void ensure_work(const MlpSpec& spec, MlpWork& work) {
  std::size_t total = 0;
  int widest = 0;
  for (int d : spec.dims) {
    total += static_cast<std::size_t>(d);
    widest = d > widest ? d : widest;
  }
  if (work.acts.size() < total) work.acts.resize(total);
  if (work.delta.size() < 2 * static_cast<std::size_t>(widest))
    work.delta.resize(2 * static_cast<std::size_t>(widest));
}

// Runs the forward pass, leaving the full activation trace in work.acts.
// Returns the offset of the output block.
inline std::size_t forward_trace(const MlpParams& p, std::span<const double> x, MlpWork& work) {
  const auto& dims = p.spec.dims;
  ensure_work(p.spec, work);
  double* acts = work.acts.data();
  for (int i = 0; i < dims[0]; ++i) acts[i] = x[static_cast<std::size_t>(i)];

  std::size_t in_off = 0, w_off = 0;
  const int layers = p.spec.layer_count();
  for (int l = 0; l < layers; ++l) {
    const int nin = dims[l], nout = dims[l + 1];
    const double* a = acts + in_off;
    double* y = acts + in_off + nin;
    const double* W = p.w.data() + w_off;
    const double* b = W + static_cast<std::size_t>(nin) * nout;
    const bool hidden = l + 1 < layers;
    for (int o = 0; o < nout; ++o) {
      const double z = b[o] + dot4(W + static_cast<std::size_t>(o) * nin, a, nin);
      y[o] = hidden ? std::tanh(z) : z;
    }
    in_off += static_cast<std::size_t>(nin);
    w_off += (static_cast<std::size_t>(nin) + 1) * nout;
  }
  return in_off;
}

}  // namespace detail

inline void mlp_forward(const MlpParams& p, std::span<const double> x, std::span<double> y,
                        MlpWork& work) {
  if (static_cast<int>(x.size()) != p.spec.input_dim() ||
      static_cast<int>(y.size()) != p.spec.output_dim())
    throw ConfigError("mlp_forward: dimension mismatch");
  const std::size_t out_off = detail::forward_trace(p, x, work);
  for (int i = 0; i < p.spec.output_dim(); ++i) y[static_cast<std::size_t>(i)] = work.acts[out_off + static_cast<std::size_t>(i)];
}

inline void mlp_forward(const MlpParams& p, std::span<const double> x, std::span<double> y) {
  MlpWork work;
  mlp_forward(p, x, y, work);
}

/// Reverse-mode sweep. Given the cotangent of the output, accumulates the
/// parameter gradient into grad (same layout as MlpParams::w; pass an empty
/// span to skip) and writes the input cotangent into x_bar (empty to skip).
inline void mlp_backward(const MlpParams& p, std::span<const double> x,
                         std::span<const double> cot, std::span<double> x_bar,
                         std::span<double> grad, MlpWork& work) {
  const auto& dims = p.spec.dims;
  if (static_cast<int>(x.size()) != p.spec.input_dim() ||
      static_cast<int>(cot.size()) != p.spec.output_dim())
    throw ConfigError("mlp_backward: dimension mismatch");
  if (!grad.empty() && grad.size() != p.w.size())
    throw ConfigError("mlp_backward: grad buffer size mismatch");
  if (!x_bar.empty() && static_cast<int>(x_bar.size()) != p.spec.input_dim())
    throw ConfigError("mlp_backward: x_bar size mismatch");

  detail::forward_trace(p, x, work);

  const int layers = p.spec.layer_count();
  std::size_t widest = work.delta.size() / 2;
  double* cur = work.delta.data();          // cotangent of layer output
  double* nxt = work.delta.data() + widest; // cotangent of layer input

  // offsets of the last layer's input activation block and weights
  std::size_t in_off = 0, w_off = 0;
  std::vector<std::size_t> act_offs(static_cast<std::size_t>(layers)), w_offs(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    act_offs[static_cast<std::size_t>(l)] = in_off;
    w_offs[static_cast<std::size_t>(l)] = w_off;
    in_off += static_cast<std::size_t>(dims[l]);
    w_off += (static_cast<std::size_t>(dims[l]) + 1) * dims[l + 1];
  }

  for (int i = 0; i < dims.back(); ++i) cur[i] = cot[static_cast<std::size_t>(i)];

  for (int l = layers - 1; l >= 0; --l) {
    const int nin = dims[l], nout = dims[l + 1];
    const double* a = work.acts.data() + act_offs[static_cast<std::size_t>(l)];
    const double* out = a + nin;  // this layer's output activations
    const double* W = p.w.data() + w_offs[static_cast<std::size_t>(l)];

    if (l + 1 < layers)  // undo tanh: d tanh(z) = 1 - tanh(z)^2
      for (int o = 0; o < nout; ++o) cur[o] *= 1.0 - out[o] * out[o];

    if (!grad.empty()) {
      double* Wg = grad.data() + w_offs[static_cast<std::size_t>(l)];
      double* bg = Wg + static_cast<std::size_t>(nin) * nout;
      for (int o = 0; o < nout; ++o) {
        detail::axpy(cur[o], a, Wg + static_cast<std::size_t>(o) * nin, nin);
        bg[o] += cur[o];
      }
    }

    const bool need_input_cot = l > 0 || !x_bar.empty();
    if (need_input_cot) {
      for (int i = 0; i < nin; ++i) nxt[i] = 0.0;
      for (int o = 0; o < nout; ++o)
        detail::axpy(cur[o], W + static_cast<std::size_t>(o) * nin, nxt, nin);
    }
    std::swap(cur, nxt);
  }

  if (!x_bar.empty())
    for (int i = 0; i < dims[0]; ++i) x_bar[static_cast<std::size_t>(i)] = cur[i];
}

inline void mlp_backward(const MlpParams& p, std::span<const double> x,
                         std::span<const double> cot, std::span<double> x_bar,
                         std::span<double> grad) {
  MlpWork work;
  mlp_backward(p, x, cot, x_bar, grad, work);
}

// --- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. A zero gradient with zero moments leaves the
/// parameters exactly unchanged.
class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void update(std::span<double> p, std::span<const double> g) {
    if (p.size() != m_.size() || g.size() != m_.size())
      throw ConfigError("adam: size mismatch");
    for (double gi : g)
      if (!std::isfinite(gi))
        throw NumericError("adam: non-finite gradient at step " + std::to_string(step_ + 1));
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::int64_t step_ = 0;
};

// --- gradient clipping -------------------------------------------------------

inline double global_norm(std::span<const std::span<const double>> parts) {
  double sq = 0.0;
  for (const auto& part : parts)
    for (double g : part) sq += g * g;
  return std::sqrt(sq);
}

/// Scales the concatenated gradient down to max_norm if it exceeds it
/// (PyTorch clip_grad_norm_ semantics, applied jointly over all parts).
/// Returns the pre-clip norm. Gradients at or below the threshold are
/// returned bitwise untouched.
inline double clip_global_norm(std::span<const std::span<double>> parts, double max_norm) {
  double sq = 0.0;
  for (const auto& part : parts)
    for (double g : part) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& part : parts)
      for (double& g : part) g *= scale;
  }
  return norm;
}

inline double clip_global_norm(std::span<double> grad, double max_norm) {
  std::span<double> parts[] = {grad};
  return clip_global_norm(std::span<const std::span<double>>(parts, 1), max_norm);
}

}  // namespace fenode
