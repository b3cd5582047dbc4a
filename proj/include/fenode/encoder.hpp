#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fenode/dataset.hpp"
#include "fenode/error.hpp"
#include "fenode/integrate.hpp"
#include "fenode/nn.hpp"

namespace fenode {

/// How a model represents the function space.
///
///  - FeNode:          k neural-ODE basis fields, coefficients identify a member
///  - FeNodeResiduals: FeNode on top of a learned average field
///  - FeDirect:        k nets map [state; control; dt] straight to a delta
///  - NodeBaseline:    one neural ODE, coefficient fixed at 1, no identification
///  - OracleBaseline:  one neural ODE that sees the hidden parameters as input
enum class ModelMode : std::uint32_t {
  FeNode = 0,
  FeNodeResiduals = 1,
  FeDirect = 2,
  NodeBaseline = 3,
  OracleBaseline = 4,
};

inline const char* mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::FeNode: return "fe_node";
    case ModelMode::FeNodeResiduals: return "fe_node_residuals";
    case ModelMode::FeDirect: return "fe_direct";
    case ModelMode::NodeBaseline: return "node_baseline";
    case ModelMode::OracleBaseline: return "oracle_baseline";
  }
  throw ConfigError("unknown model mode");
}

inline ModelMode mode_from_name(const std::string& s) {
  for (auto m : {ModelMode::FeNode, ModelMode::FeNodeResiduals, ModelMode::FeDirect,
                 ModelMode::NodeBaseline, ModelMode::OracleBaseline})
    if (s == mode_name(m)) return m;
  throw ConfigError("unknown model mode: " + s);
}

inline ModelMode mode_from_value(std::uint32_t v) {
  if (v > static_cast<std::uint32_t>(ModelMode::OracleBaseline))
    throw ConfigError("unknown model mode value: " + std::to_string(v));
  return static_cast<ModelMode>(v);
}

inline bool is_baseline(ModelMode m) {
  return m == ModelMode::NodeBaseline || m == ModelMode::OracleBaseline;
}

/// Identified coefficients for one function, with provenance.
struct Coefficients {
  std::vector<double> c;
  std::string method;       // "inner_product" | "least_squares" | "fixed"
  std::size_t tuples = 0;   // example tuples used in the estimate
};

struct EncoderModel {
  ModelMode mode = ModelMode::FeNode;
  int state_dim = 0;
  int control_dim = 0;
  int hidden_dim = 0;  // hidden-parameter count, consumed only by OracleBaseline
  int k = 0;
  double volume = 1.0;  // inner-product volume factor V
  std::vector<MlpParams> basis;
  std::optional<MlpParams> avg;  // FeNodeResiduals only
  Normalizer norm = Normalizer::identity(0);
  std::string config_echo;  // training-config echo, serialized with the model

  /// Extra network inputs appended after the state: controls, then hidden
  /// params (oracle), then dt (direct mode).
  int aux_dim() const {
    int a = control_dim;
    if (mode == ModelMode::OracleBaseline) a += hidden_dim;
    if (mode == ModelMode::FeDirect) a += 1;
    return a;
  }

  void validate() const {
    if (state_dim < 1) throw ConfigError("model: state_dim must be >= 1");
    if (k < 1) throw ConfigError("model: k must be >= 1");
    if (is_baseline(mode) && k != 1) throw ConfigError("model: baselines require k == 1");
    if (static_cast<int>(basis.size()) != k) throw ConfigError("model: basis count != k");
    if ((mode == ModelMode::FeNodeResiduals) != avg.has_value())
      throw ConfigError("model: exactly the residuals mode carries an average field");
    if (!(volume > 0.0)) throw ConfigError("model: volume must be positive");
    const int in = state_dim + aux_dim();
    for (const auto& net : basis) {
      fenode::validate(net.spec);
      if (net.spec.input_dim() != in || net.spec.output_dim() != state_dim)
        throw ConfigError("model: basis network shape mismatch");
      if (net.w.size() != param_count(net.spec)) throw ConfigError("model: basis parameter size");
    }
    if (avg) {
      if (avg->spec.input_dim() != state_dim + control_dim ||
          avg->spec.output_dim() != state_dim)
        throw ConfigError("model: average network shape mismatch");
      if (avg->w.size() != param_count(avg->spec)) throw ConfigError("model: avg parameter size");
    }
    if (norm.dim() != state_dim) throw ConfigError("model: normalizer dim mismatch");
  }
};

/// Fresh model with basis net i seeded from (seed, i) and the average field,
/// when present, from (seed, 0x40). The normalizer starts as identity and is
/// fitted by training.
inline EncoderModel make_model(ModelMode mode, int state_dim, int control_dim, int hidden_dim,
                               int k, const std::vector<int>& hidden_layers, std::uint64_t seed) {
  EncoderModel m;
  m.mode = mode;
  m.state_dim = state_dim;
  m.control_dim = control_dim;
  m.hidden_dim = hidden_dim;
  m.k = k;
  m.norm = Normalizer::identity(state_dim);

  std::vector<int> dims;
  dims.push_back(state_dim + m.aux_dim());
  for (int h : hidden_layers) dims.push_back(h);
  dims.push_back(state_dim);
  for (int i = 0; i < k; ++i)
    m.basis.push_back(mlp_init(MlpSpec{dims}, derive_stream(seed, static_cast<std::uint64_t>(i))));

  if (mode == ModelMode::FeNodeResiduals) {
    std::vector<int> adims;
    adims.push_back(state_dim + control_dim);
    for (int h : hidden_layers) adims.push_back(h);
    adims.push_back(state_dim);
    m.avg = mlp_init(MlpSpec{adims}, derive_stream(seed, 0x40));
  }
  m.validate();
  return m;
}

namespace detail {

/// Scratch buffers for model evaluation; reuse across calls in hot loops.
struct EncoderWork {
  MlpWork mlp;
  std::vector<double> z, aux, delta_z, g, inbuf, avg_delta;
};

/// Assembles the network aux block for one tuple: controls, then hidden
/// params for the oracle. dt (direct mode) is appended by the caller.
inline void assemble_aux(const EncoderModel& m, std::span<const double> u,
                         std::span<const double> hidden, std::vector<double>& aux) {
  aux.clear();
  aux.insert(aux.end(), u.begin(), u.end());
  if (m.mode == ModelMode::OracleBaseline) {
    if (static_cast<int>(hidden.size()) != m.hidden_dim)
      throw ConfigError("oracle baseline needs the dataset hidden parameters");
    aux.insert(aux.end(), hidden.begin(), hidden.end());
  }
}

/// Writes the normalized-space delta of basis i at normalized state z.
/// Integrated modes run RK4 over the net field; direct mode is one forward
/// pass on [z; aux; dt]. Optional tape enables the training backward pass.
inline void basis_delta_z(const EncoderModel& m, int i, std::span<const double> z,
                          std::span<const double> aux, double dt, int substeps,
                          std::span<double> out, NetOdeTape* tape, EncoderWork& work) {
  const auto& net = m.basis[static_cast<std::size_t>(i)];
  if (m.mode == ModelMode::FeDirect) {
    work.inbuf.resize(z.size() + aux.size() + 1);
    std::size_t o = 0;
    for (double v : z) work.inbuf[o++] = v;
    for (double v : aux) work.inbuf[o++] = v;
    work.inbuf[o] = dt;
    mlp_forward(net, work.inbuf, out, work.mlp);
    return;
  }
  net_ode_delta(net, z, aux, IntegrationSpec{dt, substeps}, out, tape, &work.mlp);
}

inline void avg_delta_z(const EncoderModel& m, std::span<const double> z,
                        std::span<const double> u, double dt, int substeps, std::span<double> out,
                        NetOdeTape* tape, EncoderWork& work) {
  net_ode_delta(*m.avg, z, u, IntegrationSpec{dt, substeps}, out, tape, &work.mlp);
}

inline void require_coeffs(const EncoderModel& m, const Coefficients& c) {
  if (static_cast<int>(c.c.size()) != m.k)
    throw ConfigError("coefficient count does not match the model's k");
  for (double v : c.c)
    if (!std::isfinite(v)) throw ConfigError("non-finite coefficients");
}

}  // namespace detail

/// Normalized-space delta of one basis function at a raw state, mapped back to
/// raw space. Mostly a diagnostic; prediction composes these internally.
inline void integrate_basis(const EncoderModel& m, int i, std::span<const double> x,
                            std::span<const double> u, const IntegrationSpec& spec,
                            std::span<double> delta, std::span<const double> hidden = {}) {
  m.validate();
  if (i < 0 || i >= m.k) throw ConfigError("integrate_basis: basis index out of range");
  validate(spec);
  detail::EncoderWork work;
  work.z.resize(static_cast<std::size_t>(m.state_dim));
  m.norm.normalize(x, work.z);
  detail::assemble_aux(m, u, hidden, work.aux);
  work.delta_z.resize(static_cast<std::size_t>(m.state_dim));
  detail::basis_delta_z(m, i, work.z, work.aux, spec.dt, spec.substeps, work.delta_z, nullptr,
                        work);
  m.norm.denormalize_delta(work.delta_z, delta);
}

/// Single integration of the coefficient-weighted field
/// f = avg + sum_i c_i g_i (Appendix-B style fast path). Cheaper than the
/// per-basis route and less accurate; the gap closes as substeps grow.
inline void integrate_combined(const EncoderModel& m, const Coefficients& c,
                               std::span<const double> x, std::span<const double> u,
                               const IntegrationSpec& spec, std::span<double> delta,
                               std::span<const double> hidden = {}) {
  m.validate();
  validate(spec);
  detail::require_coeffs(m, c);
  if (m.mode == ModelMode::FeDirect)
    throw ConfigError("integrate_combined: direct mode has no field to integrate");
  detail::EncoderWork work;
  work.z.resize(static_cast<std::size_t>(m.state_dim));
  m.norm.normalize(x, work.z);
  detail::assemble_aux(m, u, hidden, work.aux);

  std::vector<double> gi(static_cast<std::size_t>(m.state_dim));
  auto field = [&](std::span<const double> zs, std::span<double> dz) {
    for (auto& v : dz) v = 0.0;
    work.inbuf.resize(zs.size() + work.aux.size());
    std::size_t o = 0;
    for (double v : zs) work.inbuf[o++] = v;
    for (double v : work.aux) work.inbuf[o++] = v;
    for (int i = 0; i < m.k; ++i) {
      mlp_forward(m.basis[static_cast<std::size_t>(i)], work.inbuf, gi, work.mlp);
      const double ci = is_baseline(m.mode) ? 1.0 : c.c[static_cast<std::size_t>(i)];
      for (int d = 0; d < m.state_dim; ++d) dz[static_cast<std::size_t>(d)] += ci * gi[static_cast<std::size_t>(d)];
    }
    if (m.avg) {
      // the average field sees controls only, never oracle hiddens
      work.avg_delta.resize(static_cast<std::size_t>(m.state_dim));
      std::vector<double> ain(zs.size() + u.size());
      std::size_t p = 0;
      for (double v : zs) ain[p++] = v;
      for (double v : u) ain[p++] = v;
      mlp_forward(*m.avg, ain, work.avg_delta, work.mlp);
      for (int d = 0; d < m.state_dim; ++d) dz[static_cast<std::size_t>(d)] += work.avg_delta[static_cast<std::size_t>(d)];
    }
  };
  work.delta_z.resize(static_cast<std::size_t>(m.state_dim));
  rk4_delta_fn(field, work.z, spec, work.delta_z);
  m.norm.denormalize_delta(work.delta_z, delta);
}

/// One-interval prediction in raw space: normalizes the state, evaluates each
/// basis delta separately (plus the average field in residuals mode), combines
/// with the coefficients, denormalizes. Baselines ignore the coefficient
/// values and use 1.
inline void predict_delta(const EncoderModel& m, const Coefficients& c, std::span<const double> x,
                          std::span<const double> u, double dt, std::span<double> delta,
                          int substeps = 1, std::span<const double> hidden = {}) {
  detail::require_coeffs(m, c);
  validate(IntegrationSpec{dt, substeps});
  detail::EncoderWork work;
  work.z.resize(static_cast<std::size_t>(m.state_dim));
  m.norm.normalize(x, work.z);
  detail::assemble_aux(m, u, hidden, work.aux);
  work.g.resize(static_cast<std::size_t>(m.state_dim));
  work.delta_z.assign(static_cast<std::size_t>(m.state_dim), 0.0);

  for (int i = 0; i < m.k; ++i) {
    detail::basis_delta_z(m, i, work.z, work.aux, dt, substeps, work.g, nullptr, work);
    const double ci = is_baseline(m.mode) ? 1.0 : c.c[static_cast<std::size_t>(i)];
    for (int d = 0; d < m.state_dim; ++d) work.delta_z[static_cast<std::size_t>(d)] += ci * work.g[static_cast<std::size_t>(d)];
  }
  if (m.avg) {
    work.avg_delta.resize(static_cast<std::size_t>(m.state_dim));
    detail::avg_delta_z(m, work.z, u, dt, substeps, work.avg_delta, nullptr, work);
    for (int d = 0; d < m.state_dim; ++d) work.delta_z[static_cast<std::size_t>(d)] += work.avg_delta[static_cast<std::size_t>(d)];
  }
  m.norm.denormalize_delta(work.delta_z, delta);
}

// --- identification -----------------------------------------------------------

namespace detail {

/// Shared tuple sweep: for each example tuple, compute all basis deltas (and
/// the residual target) in normalized space, then hand them to a sink.
template <class Sink>
void sweep_tuples(const EncoderModel& m, const TrajectoryDataset& ds, int substeps, Sink&& sink) {
  m.validate();
  ds.validate();
  if (ds.state_dim != m.state_dim || ds.control_dim != m.control_dim)
    throw ConfigError("dataset dims do not match the model");
  if (ds.size() == 0) throw ConfigError("empty dataset");

  EncoderWork work;
  const auto n = static_cast<std::size_t>(m.state_dim);
  work.z.resize(n);
  std::vector<double> zn(n), target(n);
  std::vector<double> G(static_cast<std::size_t>(m.k) * n);

  for (std::size_t j = 0; j < ds.size(); ++j) {
    m.norm.normalize(ds.state(j), work.z);
    m.norm.normalize(ds.next_state(j), zn);
    for (std::size_t d = 0; d < n; ++d) target[d] = zn[d] - work.z[d];
    detail::assemble_aux(m, ds.control(j), ds.hidden, work.aux);

    if (m.avg) {
      work.avg_delta.resize(n);
      avg_delta_z(m, work.z, ds.control(j), ds.dt[j], substeps, work.avg_delta, nullptr, work);
      for (std::size_t d = 0; d < n; ++d) target[d] -= work.avg_delta[d];
    }
    for (int i = 0; i < m.k; ++i)
      basis_delta_z(m, i, work.z, work.aux, ds.dt[j], substeps,
                    std::span<double>(G.data() + static_cast<std::size_t>(i) * n, n), nullptr,
                    work);
    sink(j, std::span<const double>(target), std::span<const double>(G));
  }
}

}  // namespace detail

/// Monte-Carlo inner-product identification:
///   c_i = (V / m) sum_j <target_j, G_ij>
/// where target is the normalized observed delta, minus the average-field
/// delta in residuals mode. Baselines return the fixed coefficient 1.
inline Coefficients estimate_coefficients_ip(const EncoderModel& m, const TrajectoryDataset& ds,
                                             int substeps = 1) {
  if (is_baseline(m.mode)) {
    m.validate();
    return Coefficients{{1.0}, "fixed", ds.size()};
  }
  const auto n = static_cast<std::size_t>(m.state_dim);
  std::vector<double> acc(static_cast<std::size_t>(m.k), 0.0);
  std::size_t count = 0;
  detail::sweep_tuples(m, ds, substeps,
                       [&](std::size_t, std::span<const double> t, std::span<const double> G) {
                         for (int i = 0; i < m.k; ++i) {
                           double dot = 0.0;
                           for (std::size_t d = 0; d < n; ++d)
                             dot += t[d] * G[static_cast<std::size_t>(i) * n + d];
                           acc[static_cast<std::size_t>(i)] += dot;
                         }
                         ++count;
                       });
  const double scale = m.volume / static_cast<double>(count);
  for (auto& v : acc) v *= scale;
  return Coefficients{std::move(acc), "inner_product", count};
}

/// Empirical Gram matrix Gamma_il = (V/m) sum_j <G_ij, G_lj>, row-major k x k.
inline std::vector<double> gram_matrix(const EncoderModel& m, const TrajectoryDataset& ds,
                                       int substeps = 1) {
  const auto n = static_cast<std::size_t>(m.state_dim);
  const auto k = static_cast<std::size_t>(m.k);
  std::vector<double> gram(k * k, 0.0);
  std::size_t count = 0;
  detail::sweep_tuples(m, ds, substeps,
                       [&](std::size_t, std::span<const double>, std::span<const double> G) {
                         for (std::size_t i = 0; i < k; ++i)
                           for (std::size_t l = i; l < k; ++l) {
                             double dot = 0.0;
                             for (std::size_t d = 0; d < n; ++d) dot += G[i * n + d] * G[l * n + d];
                             gram[i * k + l] += dot;
                           }
                         ++count;
                       });
  const double scale = m.volume / static_cast<double>(count);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t l = i; l < k; ++l) {
      gram[i * k + l] *= scale;
      gram[l * k + i] = gram[i * k + l];
    }
  return gram;
}

struct GramStats {
  double offdiag_mean = 0.0;  // mean |normalized off-diagonal|; 0 for k = 1
  double cond = 1.0;          // spectral condition number of the raw Gram
  double min_eig = 0.0;
  double max_eig = 0.0;
};

inline GramStats gram_stats(std::span<const double> gram, int k) {
  if (k < 1 || gram.size() != static_cast<std::size_t>(k) * static_cast<std::size_t>(k))
    throw ConfigError("gram_stats: bad matrix size");
  GramStats st;
  const auto K = static_cast<std::size_t>(k);
  double sum = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t l = 0; l < K; ++l) {
      if (i == l) continue;
      const double denom = std::sqrt(std::max(gram[i * K + i], 1e-300) *
                                     std::max(gram[l * K + l], 1e-300));
      sum += std::fabs(gram[i * K + l]) / denom;
    }
  st.offdiag_mean = k > 1 ? sum / static_cast<double>(K * (K - 1)) : 0.0;

  Eigen::Map<const Eigen::MatrixXd> G(gram.data(), k, k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  st.min_eig = es.eigenvalues().minCoeff();
  st.max_eig = es.eigenvalues().maxCoeff();
  st.cond = st.min_eig > 0.0 ? st.max_eig / st.min_eig : std::numeric_limits<double>::infinity();
  return st;
}

/// Least-squares identification: solve (Gamma + ridge I) c = b with
/// b_i = (V/m) sum_j <target_j, G_ij>. The default ridge keeps ill-conditioned
/// bases usable; pass 0 for exact span recovery on well-conditioned problems.
inline Coefficients estimate_coefficients_ls(const EncoderModel& m, const TrajectoryDataset& ds,
                                             double ridge = 1e-6, int substeps = 1) {
  if (ridge < 0.0) throw ConfigError("ridge must be >= 0");
  if (is_baseline(m.mode)) {
    m.validate();
    return Coefficients{{1.0}, "fixed", ds.size()};
  }
  const auto n = static_cast<std::size_t>(m.state_dim);
  const auto k = static_cast<std::size_t>(m.k);
  std::vector<double> gram(k * k, 0.0), b(k, 0.0);
  std::size_t count = 0;
  detail::sweep_tuples(m, ds, substeps,
                       [&](std::size_t, std::span<const double> t, std::span<const double> G) {
                         for (std::size_t i = 0; i < k; ++i) {
                           double dot = 0.0;
                           for (std::size_t d = 0; d < n; ++d) dot += t[d] * G[i * n + d];
                           b[i] += dot;
                           for (std::size_t l = i; l < k; ++l) {
                             double gg = 0.0;
                             for (std::size_t d = 0; d < n; ++d) gg += G[i * n + d] * G[l * n + d];
                             gram[i * k + l] += gg;
                           }
                         }
                         ++count;
                       });
  const double scale = m.volume / static_cast<double>(count);
  for (std::size_t i = 0; i < k; ++i) {
    b[i] *= scale;
    for (std::size_t l = i; l < k; ++l) {
      gram[i * k + l] *= scale;
      gram[l * k + i] = gram[i * k + l];
    }
  }

  Eigen::Map<Eigen::MatrixXd> G(gram.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  if (ridge == 0.0) {
    // LDLT silently solves consistent singular systems, so a rank check is
    // the only reliable singularity signal at ridge 0.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    const double lmax = es.eigenvalues().maxCoeff();
    const double lmin = es.eigenvalues().minCoeff();
    if (!(lmin > 1e-12 * std::max(lmax, 1e-300)))
      throw NumericError("least squares: gram matrix is singular; increase ridge");
  }
  Eigen::MatrixXd A = G + ridge * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  Eigen::Map<Eigen::VectorXd> bv(b.data(), static_cast<Eigen::Index>(k));
  Eigen::VectorXd c = A.ldlt().solve(bv);

  const double resid = (A * c - bv).norm();
  if (!c.allFinite() || resid > 1e-8 * (bv.norm() + 1.0))
    throw NumericError("least squares: gram matrix is singular; increase ridge");

  Coefficients out;
  out.c.assign(c.data(), c.data() + k);
  out.method = "least_squares";
  out.tuples = count;
  return out;
}

// --- differentiable stepping ------------------------------------------------------

/// One-interval step of the coefficient-weighted field with a reverse sweep,
/// raw space in and out. This is the planning interface: step() predicts a
/// delta, step_vjp() additionally pulls a delta cotangent back to the start
/// state (written) and the controls (accumulated). Holds scratch buffers, so
/// give each thread its own instance.
class ModelStepper {
 public:
  ModelStepper(const EncoderModel& model, Coefficients coeffs, int substeps = 1,
               std::vector<double> hidden = {})
      : m_(&model), c_(std::move(coeffs)), substeps_(substeps), hidden_(std::move(hidden)) {
    model.validate();
    detail::require_coeffs(model, c_);
    if (substeps_ < 1) throw ConfigError("stepper substeps must be >= 1");
    if (model.mode == ModelMode::OracleBaseline &&
        static_cast<int>(hidden_.size()) != model.hidden_dim)
      throw ConfigError("oracle stepper needs hidden parameters");
    z_.resize(static_cast<std::size_t>(model.state_dim));
    dz_.resize(z_.size());
    gi_.resize(z_.size());
  }

  int state_dim() const { return m_->state_dim; }
  int control_dim() const { return m_->control_dim; }

  void step(std::span<const double> x, std::span<const double> u, double dt,
            std::span<double> delta) {
    forward(x, u, dt, delta, nullptr);
  }

  /// Forward plus reverse. x_bar is written, u_bar is accumulated; pass empty
  /// spans to skip either.
  void step_vjp(std::span<const double> x, std::span<const double> u, double dt,
                std::span<double> delta, std::span<const double> delta_cot,
                std::span<double> x_bar, std::span<double> u_bar) {
    const auto n = static_cast<std::size_t>(m_->state_dim);
    forward(x, u, dt, delta, &trace_);

    cot_z_.resize(n);
    for (std::size_t d = 0; d < n; ++d) cot_z_[d] = delta_cot[d] * m_->norm.stddev[d];

    zbar_.assign(n, 0.0);
    if (m_->mode == ModelMode::FeDirect) {
      direct_vjp(u, std::span<const double>(cot_z_), std::span<double>(zbar_), u_bar);
    } else {
      const IntegrationSpec spec{dt, substeps_};
      rk4_vjp_fn(
          [&](std::span<const double> sz, std::span<const double> kcot, std::span<double> sz_bar) {
            field_vjp(sz, u, kcot, sz_bar, u_bar);
          },
          trace_, m_->state_dim, spec, cot_z_, zbar_);
    }
    if (!x_bar.empty())
      for (std::size_t d = 0; d < n; ++d) x_bar[d] = zbar_[d] / m_->norm.stddev[d];
  }

 private:
  void assemble(std::span<const double> u) {
    detail::assemble_aux(*m_, u, hidden_, aux_);
  }

  void forward(std::span<const double> x, std::span<const double> u, double dt,
               std::span<double> delta, std::vector<double>* trace) {
    validate(IntegrationSpec{dt, substeps_});
    const auto n = static_cast<std::size_t>(m_->state_dim);
    m_->norm.normalize(x, z_);
    assemble(u);
    if (m_->mode == ModelMode::FeDirect) {
      in_.resize(n + aux_.size() + 1);
      std::size_t o = 0;
      for (double v : z_) in_[o++] = v;
      for (double v : aux_) in_[o++] = v;
      in_[o] = dt;
      for (auto& v : dz_) v = 0.0;
      for (int i = 0; i < m_->k; ++i) {
        mlp_forward(m_->basis[static_cast<std::size_t>(i)], in_, gi_, work_);
        for (std::size_t d = 0; d < n; ++d) dz_[d] += c_.c[static_cast<std::size_t>(i)] * gi_[d];
      }
    } else {
      rk4_delta_fn(
          [&](std::span<const double> sz, std::span<double> out) { field_eval(sz, u, out); },
          z_, IntegrationSpec{dt, substeps_}, dz_, trace);
    }
    m_->norm.denormalize_delta(dz_, delta);
  }

  void field_eval(std::span<const double> sz, std::span<const double> u, std::span<double> out) {
    const auto n = sz.size();
    in_.resize(n + aux_.size());
    std::size_t o = 0;
    for (double v : sz) in_[o++] = v;
    for (double v : aux_) in_[o++] = v;
    for (auto& v : out) v = 0.0;
    for (int i = 0; i < m_->k; ++i) {
      mlp_forward(m_->basis[static_cast<std::size_t>(i)], in_, gi_, work_);
      const double ci = is_baseline(m_->mode) ? 1.0 : c_.c[static_cast<std::size_t>(i)];
      for (std::size_t d = 0; d < n; ++d) out[d] += ci * gi_[d];
    }
    if (m_->avg) {
      ain_.resize(n + u.size());
      std::size_t p = 0;
      for (double v : sz) ain_[p++] = v;
      for (double v : u) ain_[p++] = v;
      mlp_forward(*m_->avg, ain_, gi_, work_);
      for (std::size_t d = 0; d < n; ++d) out[d] += gi_[d];
    }
  }

  // Overwrites sz_bar; accumulates the raw-control cotangent into u_bar.
  // Aux entries beyond the controls (oracle hiddens) are constants.
  void field_vjp(std::span<const double> sz, std::span<const double> u,
                 std::span<const double> kcot, std::span<double> sz_bar,
                 std::span<double> u_bar) {
    const auto n = sz.size();
    in_.resize(n + aux_.size());
    std::size_t o = 0;
    for (double v : sz) in_[o++] = v;
    for (double v : aux_) in_[o++] = v;
    inbar_.resize(in_.size());
    scaled_.resize(kcot.size());
    for (auto& v : sz_bar) v = 0.0;
    for (int i = 0; i < m_->k; ++i) {
      const double ci = is_baseline(m_->mode) ? 1.0 : c_.c[static_cast<std::size_t>(i)];
      if (ci == 0.0) continue;
      for (std::size_t d = 0; d < kcot.size(); ++d) scaled_[d] = ci * kcot[d];
      mlp_backward(m_->basis[static_cast<std::size_t>(i)], in_, scaled_, inbar_, {}, work_);
      for (std::size_t d = 0; d < n; ++d) sz_bar[d] += inbar_[d];
      if (!u_bar.empty())
        for (std::size_t d = 0; d < u.size(); ++d) u_bar[d] += inbar_[n + d];
    }
    if (m_->avg) {
      ain_.resize(n + u.size());
      std::size_t p = 0;
      for (double v : sz) ain_[p++] = v;
      for (double v : u) ain_[p++] = v;
      abar_.resize(ain_.size());
      mlp_backward(*m_->avg, ain_, kcot, abar_, {}, work_);
      for (std::size_t d = 0; d < n; ++d) sz_bar[d] += abar_[d];
      if (!u_bar.empty())
        for (std::size_t d = 0; d < u.size(); ++d) u_bar[d] += abar_[n + d];
    }
  }

  void direct_vjp(std::span<const double> u, std::span<const double> cot_z,
                  std::span<double> zbar, std::span<double> u_bar) {
    // in_ still holds [z; u; dt] from the forward pass
    inbar_.resize(in_.size());
    scaled_.resize(cot_z.size());
    const auto n = static_cast<std::size_t>(m_->state_dim);
    for (int i = 0; i < m_->k; ++i) {
      const double ci = c_.c[static_cast<std::size_t>(i)];
      if (ci == 0.0) continue;
      for (std::size_t d = 0; d < cot_z.size(); ++d) scaled_[d] = ci * cot_z[d];
      mlp_backward(m_->basis[static_cast<std::size_t>(i)], in_, scaled_, inbar_, {}, work_);
      for (std::size_t d = 0; d < n; ++d) zbar[d] += inbar_[d];
      if (!u_bar.empty())
        for (std::size_t d = 0; d < u.size(); ++d) u_bar[d] += inbar_[n + d];
    }
  }

  const EncoderModel* m_;
  Coefficients c_;
  int substeps_;
  std::vector<double> hidden_;
  MlpWork work_;
  std::vector<double> z_, dz_, gi_, in_, ain_, aux_, trace_, cot_z_, zbar_, inbar_, abar_, scaled_;
};

// --- evaluation -----------------------------------------------------------------

/// Per-start squared rollout errors at one horizon: from every start j with
/// j + h <= size, roll the predictor h intervals on the dataset's controls and
/// dts, and score ||xhat - x_{j+h}||^2 in raw space.
template <class StepFn>
std::vector<double> rollout_errors_fn(StepFn&& step, const TrajectoryDataset& ds, int horizon) {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  ds.validate();
  const auto n = static_cast<std::size_t>(ds.state_dim);
  std::vector<double> errors;
  if (ds.size() < static_cast<std::size_t>(horizon)) return errors;

  const auto h = static_cast<std::size_t>(horizon);
  std::vector<double> states(h * n);
  for (std::size_t j = 0; j + h <= ds.size(); ++j) {
    const auto controls = std::span<const double>(
        ds.u.data() + j * static_cast<std::size_t>(ds.control_dim),
        h * static_cast<std::size_t>(ds.control_dim));
    const auto dts = std::span<const double>(ds.dt.data() + j, h);
    rollout(step, ds.state(j), controls, dts, ds.state_dim, ds.control_dim, states);
    double err = 0.0;
    const auto truth = ds.next_state(j + h - 1);
    for (std::size_t d = 0; d < n; ++d) {
      const double e = states[(h - 1) * n + d] - truth[d];
      err += e * e;
    }
    errors.push_back(err);
  }
  return errors;
}

inline std::vector<double> rollout_errors(const EncoderModel& m, const Coefficients& c,
                                          const TrajectoryDataset& ds, int horizon,
                                          int substeps = 1) {
  detail::require_coeffs(m, c);
  return rollout_errors_fn(
      [&](std::span<const double> x, std::span<const double> u, double dt,
          std::span<double> delta) { predict_delta(m, c, x, u, dt, delta, substeps, ds.hidden); },
      ds, horizon);
}

struct HorizonRow {
  int horizon = 0;
  double mse = 0.0;           // mean over every rollout from every dataset
  std::size_t rollouts = 0;
  std::size_t skipped = 0;    // datasets too short for this horizon
};

/// Pooled mean squared rollout error per horizon over a set of datasets that
/// share one coefficient vector. Datasets shorter than a horizon are skipped
/// with a warning, not an error.
inline std::vector<HorizonRow> evaluate(const EncoderModel& m, const Coefficients& c,
                                        std::span<const TrajectoryDataset> datasets,
                                        std::span<const int> horizons, int substeps = 1) {
  if (datasets.empty()) throw ConfigError("evaluate: no datasets");
  std::vector<HorizonRow> rows;
  for (int h : horizons) {
    HorizonRow row;
    row.horizon = h;
    double sum = 0.0;
    for (const auto& ds : datasets) {
      auto errs = rollout_errors(m, c, ds, h, substeps);
      if (errs.empty()) {
        ++row.skipped;
        std::cerr << "warning: dataset with " << ds.size() << " tuples skipped at horizon " << h
                  << "\n";
        continue;
      }
      for (double e : errs) sum += e;
      row.rollouts += errs.size();
    }
    row.mse = row.rollouts ? sum / static_cast<double>(row.rollouts) : std::numeric_limits<double>::quiet_NaN();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace fenode
