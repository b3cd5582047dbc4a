#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fenode/error.hpp"
#include "fenode/nn.hpp"

namespace fenode {

/// One observed interval of length dt, integrated with classical RK4 in
/// `substeps` equal pieces. Controls are held constant across the interval.
struct IntegrationSpec {
  double dt = 0.0;
  int substeps = 1;
};

inline void validate(const IntegrationSpec& s) {
  if (!(s.dt > 0.0) || !std::isfinite(s.dt)) throw ConfigError("integration dt must be positive");
  if (s.substeps < 1) throw ConfigError("integration substeps must be >= 1");
}

/// A dynamical system dx/dt = f(x, u). vjp is optional; when present it pulls
/// a cotangent of dx back to x (written) and u (accumulated).
struct VectorField {
  int state_dim = 0;
  int control_dim = 0;
  std::function<void(std::span<const double> x, std::span<const double> u, std::span<double> dx)>
      eval;
  std::function<void(std::span<const double> x, std::span<const double> u,
                     std::span<const double> dx_cot, std::span<double> x_bar,
                     std::span<double> u_bar)>
      vjp;
};

namespace detail {

inline void check_finite_state(std::span<const double> x, int substep) {
  for (double v : x)
    if (!std::isfinite(v))
      throw DivergenceError("integration diverged (non-finite state) at substep " +
                                std::to_string(substep),
                            substep);
}

}  // namespace detail

/// Classical RK4 over a callable f(x, dx). Writes x(t0 + dt) - x(t0) into
/// delta. If stage_trace is given it receives the substeps*4 stage input
/// states (each state_dim wide), which is everything the reverse sweep needs.
template <class F>
void rk4_delta_fn(F&& f, std::span<const double> x0, const IntegrationSpec& spec,
                  std::span<double> delta, std::vector<double>* stage_trace = nullptr) {
  validate(spec);
  const int n = static_cast<int>(x0.size());
  const double h = spec.dt / spec.substeps;

  if (stage_trace) stage_trace->assign(static_cast<std::size_t>(spec.substeps) * 4 * n, 0.0);

  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> k1(n), k2(n), k3(n), k4(n), stage(n);

  for (int s = 0; s < spec.substeps; ++s) {
    double* trace = stage_trace ? stage_trace->data() + static_cast<std::size_t>(s) * 4 * n : nullptr;
    auto record = [&](int which, std::span<const double> v) {
      if (trace)
        for (int i = 0; i < n; ++i) trace[static_cast<std::size_t>(which) * n + i] = v[static_cast<std::size_t>(i)];
    };

    record(0, x);
    f(std::span<const double>(x), std::span<double>(k1));
    for (int i = 0; i < n; ++i) stage[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + 0.5 * h * k1[static_cast<std::size_t>(i)];
    record(1, stage);
    f(std::span<const double>(stage), std::span<double>(k2));
    for (int i = 0; i < n; ++i) stage[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + 0.5 * h * k2[static_cast<std::size_t>(i)];
    record(2, stage);
    f(std::span<const double>(stage), std::span<double>(k3));
    for (int i = 0; i < n; ++i) stage[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] + h * k3[static_cast<std::size_t>(i)];
    record(3, stage);
    f(std::span<const double>(stage), std::span<double>(k4));

    for (int i = 0; i < n; ++i)
      x[static_cast<std::size_t>(i)] += h / 6.0 *
          (k1[static_cast<std::size_t>(i)] + 2.0 * k2[static_cast<std::size_t>(i)] +
           2.0 * k3[static_cast<std::size_t>(i)] + k4[static_cast<std::size_t>(i)]);
    detail::check_finite_state(x, s);
  }

  for (int i = 0; i < n; ++i) delta[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] - x0[static_cast<std::size_t>(i)];
}

/// Reverse sweep matching rk4_delta_fn. `vjp(stage_x, k_cot, x_bar)` must
/// overwrite x_bar with the pullback of k_cot through the field at stage_x,
/// accumulating any internal cotangents (parameters, controls) itself.
/// x0_bar, if non-empty, receives d<delta_cot, delta>/dx0, including the
/// -delta_cot term from delta = x_end - x0.
template <class Vjp>
void rk4_vjp_fn(Vjp&& vjp, std::span<const double> stage_trace, int n,
                const IntegrationSpec& spec, std::span<const double> delta_cot,
                std::span<double> x0_bar) {
  validate(spec);
  const double h = spec.dt / spec.substeps;
  if (stage_trace.size() != static_cast<std::size_t>(spec.substeps) * 4 * n)
    throw ConfigError("rk4_vjp_fn: stage trace size mismatch");

  std::vector<double> xbar(delta_cot.begin(), delta_cot.end());  // cotangent of x after substep
  std::vector<double> kcot(n), a1(n), a2(n), a3(n), a4(n);

  for (int s = spec.substeps - 1; s >= 0; --s) {
    const double* tr = stage_trace.data() + static_cast<std::size_t>(s) * 4 * n;
    auto stage = [&](int which) {
      return std::span<const double>(tr + static_cast<std::size_t>(which) * n, static_cast<std::size_t>(n));
    };

    // k4
    for (int i = 0; i < n; ++i) kcot[static_cast<std::size_t>(i)] = h / 6.0 * xbar[static_cast<std::size_t>(i)];
    vjp(stage(3), std::span<const double>(kcot), std::span<double>(a4));
    // k3
    for (int i = 0; i < n; ++i)
      kcot[static_cast<std::size_t>(i)] = h / 3.0 * xbar[static_cast<std::size_t>(i)] + h * a4[static_cast<std::size_t>(i)];
    vjp(stage(2), std::span<const double>(kcot), std::span<double>(a3));
    // k2
    for (int i = 0; i < n; ++i)
      kcot[static_cast<std::size_t>(i)] = h / 3.0 * xbar[static_cast<std::size_t>(i)] + 0.5 * h * a3[static_cast<std::size_t>(i)];
    vjp(stage(1), std::span<const double>(kcot), std::span<double>(a2));
    // k1
    for (int i = 0; i < n; ++i)
      kcot[static_cast<std::size_t>(i)] = h / 6.0 * xbar[static_cast<std::size_t>(i)] + 0.5 * h * a2[static_cast<std::size_t>(i)];
    vjp(stage(0), std::span<const double>(kcot), std::span<double>(a1));

    for (int i = 0; i < n; ++i)
      xbar[static_cast<std::size_t>(i)] += a1[static_cast<std::size_t>(i)] + a2[static_cast<std::size_t>(i)] +
                                           a3[static_cast<std::size_t>(i)] + a4[static_cast<std::size_t>(i)];
  }

  if (!x0_bar.empty())
    for (int i = 0; i < n; ++i)
      x0_bar[static_cast<std::size_t>(i)] = xbar[static_cast<std::size_t>(i)] - delta_cot[static_cast<std::size_t>(i)];
}

// --- analytic vector fields ---------------------------------------------------

inline void rk4_delta(const VectorField& f, std::span<const double> x0, std::span<const double> u,
                      const IntegrationSpec& spec, std::span<double> delta,
                      std::vector<double>* stage_trace = nullptr) {
  if (static_cast<int>(x0.size()) != f.state_dim || static_cast<int>(u.size()) != f.control_dim)
    throw ConfigError("rk4_delta: dimension mismatch");
  rk4_delta_fn([&](std::span<const double> x, std::span<double> dx) { f.eval(x, u, dx); }, x0, spec,
               delta, stage_trace);
}

/// Pullback through an analytic field's RK4 step. Accumulates the control
/// cotangent into u_bar (pass empty to skip); x0_bar as in rk4_vjp_fn.
inline void rk4_vjp(const VectorField& f, std::span<const double> u,
                    std::span<const double> stage_trace, const IntegrationSpec& spec,
                    std::span<const double> delta_cot, std::span<double> x0_bar,
                    std::span<double> u_bar) {
  if (!f.vjp) throw ConfigError("rk4_vjp: field has no vjp");
  rk4_vjp_fn(
      [&](std::span<const double> sx, std::span<const double> kcot, std::span<double> sx_bar) {
        for (auto& v : sx_bar) v = 0.0;
        f.vjp(sx, u, kcot, sx_bar, u_bar);
      },
      stage_trace, f.state_dim, spec, delta_cot, x0_bar);
}

// --- network vector fields ----------------------------------------------------

/// Stage-input record for one integrated interval of a network field.
struct NetOdeTape {
  int substeps = 0;
  int state_dim = 0;
  std::vector<double> stages;  // substeps * 4 * state_dim
};

namespace detail {

// Shared input buffer layout for network fields: [x; aux].
inline void net_field_eval(const MlpParams& net, std::span<const double> x,
                           std::span<const double> aux, std::span<double> dx, MlpWork& work,
                           std::vector<double>& inbuf) {
  const std::size_t n = x.size(), m = aux.size();
  inbuf.resize(n + m);
  for (std::size_t i = 0; i < n; ++i) inbuf[i] = x[i];
  for (std::size_t i = 0; i < m; ++i) inbuf[n + i] = aux[i];
  mlp_forward(net, inbuf, dx, work);
}

}  // namespace detail

/// Integrates dx/dt = net([x; aux]) over the interval and writes the state
/// delta. aux is held constant (zero-order hold). Fill tape to enable
/// net_ode_vjp afterwards.
inline void net_ode_delta(const MlpParams& net, std::span<const double> x0,
                          std::span<const double> aux, const IntegrationSpec& spec,
                          std::span<double> delta, NetOdeTape* tape = nullptr,
                          MlpWork* work = nullptr) {
  const int n = static_cast<int>(x0.size());
  if (net.spec.input_dim() != n + static_cast<int>(aux.size()) || net.spec.output_dim() != n)
    throw ConfigError("net_ode_delta: network shape does not match state/aux dims");
  MlpWork local;
  MlpWork& wk = work ? *work : local;
  std::vector<double> inbuf;
  std::vector<double>* trace = nullptr;
  if (tape) {
    tape->substeps = spec.substeps;
    tape->state_dim = n;
    trace = &tape->stages;
  }
  rk4_delta_fn(
      [&](std::span<const double> x, std::span<double> dx) {
        detail::net_field_eval(net, x, aux, dx, wk, inbuf);
      },
      x0, spec, delta, trace);
}

/// Reverse sweep for net_ode_delta. Accumulates the parameter gradient into
/// grad (layout of MlpParams::w; empty to skip), the aux cotangent into
/// aux_bar (empty to skip), and writes the x0 cotangent (empty to skip).
inline void net_ode_vjp(const MlpParams& net, std::span<const double> aux, const NetOdeTape& tape,
                        const IntegrationSpec& spec, std::span<const double> delta_cot,
                        std::span<double> grad, std::span<double> x0_bar,
                        std::span<double> aux_bar, MlpWork* work = nullptr) {
  const int n = tape.state_dim;
  if (tape.substeps != spec.substeps) throw ConfigError("net_ode_vjp: tape/spec substep mismatch");
  MlpWork local;
  MlpWork& wk = work ? *work : local;
  std::vector<double> inbuf(static_cast<std::size_t>(net.spec.input_dim()));
  std::vector<double> in_bar(inbuf.size());

  rk4_vjp_fn(
      [&](std::span<const double> sx, std::span<const double> kcot, std::span<double> sx_bar) {
        for (std::size_t i = 0; i < sx.size(); ++i) inbuf[i] = sx[i];
        for (std::size_t i = 0; i < aux.size(); ++i) inbuf[sx.size() + i] = aux[i];
        mlp_backward(net, inbuf, kcot, in_bar, grad, wk);
        for (int i = 0; i < n; ++i) sx_bar[static_cast<std::size_t>(i)] = in_bar[static_cast<std::size_t>(i)];
        if (!aux_bar.empty())
          for (std::size_t i = 0; i < aux.size(); ++i) aux_bar[i] += in_bar[static_cast<std::size_t>(n) + i];
      },
      tape.stages, n, spec, delta_cot, x0_bar);
}

// --- rollout -------------------------------------------------------------------

/// Multi-step open-loop rollout. step(x, u, dt, delta) predicts one interval;
/// each prediction is re-grounded on the previous predicted state. Writes the
/// T predicted states row-major into out_states (T x state_dim). Divergence
/// errors are rethrown with the failing rollout step attached.
template <class Step>
void rollout(Step&& step, std::span<const double> x0, std::span<const double> controls,
             std::span<const double> dts, int state_dim, int control_dim,
             std::span<double> out_states) {
  const std::size_t T = dts.size();
  if (controls.size() != T * static_cast<std::size_t>(control_dim))
    throw ConfigError("rollout: controls size mismatch");
  if (out_states.size() != T * static_cast<std::size_t>(state_dim))
    throw ConfigError("rollout: output size mismatch");

  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> delta(static_cast<std::size_t>(state_dim));
  for (std::size_t t = 0; t < T; ++t) {
    const auto u = controls.subspan(t * static_cast<std::size_t>(control_dim),
                                    static_cast<std::size_t>(control_dim));
    try {
      step(std::span<const double>(x), u, dts[t], std::span<double>(delta));
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " (rollout step " + std::to_string(t) + ")",
                            e.substep, static_cast<int>(t));
    }
    for (int i = 0; i < state_dim; ++i) x[static_cast<std::size_t>(i)] += delta[static_cast<std::size_t>(i)];
    for (int i = 0; i < state_dim; ++i)
      out_states[t * static_cast<std::size_t>(state_dim) + static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)];
  }
}

}  // namespace fenode
