#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fenode/encoder.hpp"
#include "fenode/error.hpp"
#include "fenode/integrate.hpp"
#include "fenode/nn.hpp"
#include "fenode/parallel.hpp"
#include "fenode/rng.hpp"

namespace fenode {

// Receding-horizon control of the planar birotor over a prediction model.
// Candidate control sequences are sampled around hover thrust, each is locally
// improved by gradient descent through the model rollout, and the cheapest
// candidate wins. State layout (px, pz, theta, vx, vz, omega), controls
// (T1, T2), matching quad2d_field.

struct MpcWeights {
  double goal = 1.0;
  double attitude = 0.5;
  double velocity = 0.1;
  double thrust_diff = 0.01;
};

struct MpcConfig {
  int horizon = 10;
  int samples = 32;     // sampled candidate sequences per plan
  int iterations = 20;  // gradient refinement passes per candidate
  int episode_steps = 100;
  bool warm_start = true;
  double dt = 0.05;  // control interval
  double control_lo = 0.0;
  double control_hi = 8.0;
  double hover_thrust = 0.5 * 9.81;   // sampling center: nominal-mass hover, per rotor
  double sample_std_frac = 0.3;       // sampling std = frac * hover_thrust
  double refine_step = 1e-2;
  MpcWeights weights;
  int model_substeps = 1;  // integration substeps inside the prediction model
  int true_substeps = 10;  // plant integration substeps per applied control
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (horizon < 1) throw ConfigError("mpc: horizon must be >= 1");
    if (samples < 1) throw ConfigError("mpc: samples must be >= 1");
    if (iterations < 0) throw ConfigError("mpc: iterations must be >= 0");
    if (episode_steps < 0) throw ConfigError("mpc: episode_steps must be >= 0");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("mpc: dt must be positive");
    if (!(control_hi > control_lo)) throw ConfigError("mpc: empty control bounds");
    if (!std::isfinite(hover_thrust)) throw ConfigError("mpc: bad hover thrust");
    if (!(sample_std_frac >= 0.0)) throw ConfigError("mpc: sample_std_frac must be >= 0");
    if (!(refine_step >= 0.0)) throw ConfigError("mpc: refine_step must be >= 0");
    if (weights.goal < 0.0 || weights.attitude < 0.0 || weights.velocity < 0.0 ||
        weights.thrust_diff < 0.0)
      throw ConfigError("mpc: cost weights must be >= 0");
    if (model_substeps < 1 || true_substeps < 1)
      throw ConfigError("mpc: substeps must be >= 1");
  }
};

namespace detail {

constexpr int kQuadStateDim = 6;
constexpr int kQuadControlDim = 2;

inline void check_goal(std::span<const double> goal) {
  if (goal.size() != 2 && goal.size() != kQuadStateDim)
    throw ConfigError("mpc: goal must be a (px, pz) pair or a full state");
  for (double v : goal)
    if (!std::isfinite(v)) throw ConfigError("mpc: non-finite goal");
}

}  // namespace detail

/// Stage cost summed over the horizon: distance to the goal point, lean away
/// from level, any motion (linear or angular), and rotor imbalance. Zero
/// exactly when every scored state hovers level and still at the goal with
/// both rotors matched. `states` holds the horizon states reached after each
/// control, flat (px, pz, theta, vx, vz, omega); `controls` the matching
/// (T1, T2) pairs; `goal` the target position.
inline double trajectory_cost(std::span<const double> states, std::span<const double> controls,
                              std::span<const double> goal, const MpcWeights& w) {
  constexpr auto n = static_cast<std::size_t>(detail::kQuadStateDim);
  constexpr auto cdim = static_cast<std::size_t>(detail::kQuadControlDim);
  if (states.empty() || states.size() % n != 0)
    throw ConfigError("trajectory_cost: states must be a whole number of birotor states");
  const std::size_t H = states.size() / n;
  if (controls.size() != H * cdim)
    throw ConfigError("trajectory_cost: controls do not match the state count");
  detail::check_goal(goal);

  double cost = 0.0;
  for (std::size_t t = 0; t < H; ++t) {
    const double* x = states.data() + t * n;
    const double* u = controls.data() + t * cdim;
    const double dx = x[0] - goal[0];
    const double dz = x[1] - goal[1];
    const double imbalance = u[1] - u[0];
    cost += w.goal * (dx * dx + dz * dz) + w.attitude * x[2] * x[2] +
            w.velocity * (x[3] * x[3] + x[4] * x[4] + x[5] * x[5]) +
            w.thrust_diff * imbalance * imbalance;
  }
  return cost;
}

namespace detail {

// d(stage cost)/d(state), accumulated into x_bar
inline void cost_state_grad(std::span<const double> x, std::span<const double> goal,
                            const MpcWeights& w, std::span<double> x_bar) {
  x_bar[0] += 2.0 * w.goal * (x[0] - goal[0]);
  x_bar[1] += 2.0 * w.goal * (x[1] - goal[1]);
  x_bar[2] += 2.0 * w.attitude * x[2];
  x_bar[3] += 2.0 * w.velocity * x[3];
  x_bar[4] += 2.0 * w.velocity * x[4];
  x_bar[5] += 2.0 * w.velocity * x[5];
}

// d(stage cost)/d(control), accumulated into u_bar
inline void cost_control_grad(std::span<const double> u, const MpcWeights& w,
                              std::span<double> u_bar) {
  const double imbalance = u[1] - u[0];
  u_bar[0] += -2.0 * w.thrust_diff * imbalance;
  u_bar[1] += 2.0 * w.thrust_diff * imbalance;
}

}  // namespace detail

/// Prediction interface over an analytic vector field: the "model" for
/// ground-truth reference runs. Same step/step_vjp shape as ModelStepper.
class TrueFieldStepper {
 public:
  explicit TrueFieldStepper(VectorField field, int substeps = 1)
      : f_(std::move(field)), substeps_(substeps) {
    if (!f_.eval) throw ConfigError("true-field stepper: field has no eval");
    if (substeps_ < 1) throw ConfigError("stepper substeps must be >= 1");
  }

  int state_dim() const { return f_.state_dim; }
  int control_dim() const { return f_.control_dim; }

  void step(std::span<const double> x, std::span<const double> u, double dt,
            std::span<double> delta) {
    rk4_delta(f_, x, u, IntegrationSpec{dt, substeps_}, delta);
  }

  void step_vjp(std::span<const double> x, std::span<const double> u, double dt,
                std::span<double> delta, std::span<const double> delta_cot,
                std::span<double> x_bar, std::span<double> u_bar) {
    if (!f_.vjp) throw ConfigError("true-field stepper: field has no vjp");
    const IntegrationSpec spec{dt, substeps_};
    rk4_delta(f_, x, u, spec, delta, &trace_);
    rk4_vjp_fn(
        [&](std::span<const double> sx, std::span<const double> kcot, std::span<double> sx_bar) {
          std::fill(sx_bar.begin(), sx_bar.end(), 0.0);
          f_.vjp(sx, u, kcot, sx_bar, u_bar);
        },
        trace_, f_.state_dim, spec, delta_cot, x_bar);
  }

 private:
  VectorField f_;
  int substeps_;
  std::vector<double> trace_;
};

struct PlanResult {
  std::vector<double> controls;  // horizon x (T1, T2), flat
  double cost = std::numeric_limits<double>::infinity();  // predicted cost of the plan
  int candidate = -1;                                     // winning candidate index
};

/// One receding-horizon solve. Draws `samples` Gaussian candidates around
/// hover thrust (plus, when given, the previous plan shifted one step with the
/// last action repeated), runs `iterations` gradient passes on each through
/// the model rollout keeping the best iterate, and returns the cheapest plan.
/// Candidates that diverge are dropped; if every one does, planning fails.
/// Deterministic in (cfg.seed, noise_stream, inputs); candidate rollouts
/// parallelize over cfg.threads and ties go to the lowest candidate index.
template <class Stepper>
PlanResult plan(Stepper& stepper, std::span<const double> x0, std::span<const double> goal,
                const MpcConfig& cfg, std::span<const double> warm = {},
                std::uint64_t noise_stream = 0) {
  cfg.validate();
  detail::check_goal(goal);
  constexpr auto n = static_cast<std::size_t>(detail::kQuadStateDim);
  constexpr auto cdim = static_cast<std::size_t>(detail::kQuadControlDim);
  if (stepper.state_dim() != detail::kQuadStateDim ||
      stepper.control_dim() != detail::kQuadControlDim)
    throw ConfigError("plan: stepper is not a birotor model");
  if (x0.size() != n) throw ConfigError("plan: x0 has the wrong dimension");
  const auto H = static_cast<std::size_t>(cfg.horizon);
  if (!warm.empty() && warm.size() != H * cdim)
    throw ConfigError("plan: warm plan length does not match the horizon");

  const auto clamp = [&](double v) { return std::clamp(v, cfg.control_lo, cfg.control_hi); };

  // all sampling up front so the sampled set is independent of the warm
  // candidate's presence and of how candidates are scheduled
  const std::size_t n_cand = static_cast<std::size_t>(cfg.samples) + (warm.empty() ? 0 : 1);
  std::vector<std::vector<double>> cand(n_cand);
  {
    auto rng = Rng::stream(cfg.seed, 0x706c616eULL ^ noise_stream);
    const double std = cfg.sample_std_frac * std::fabs(cfg.hover_thrust);
    for (int s = 0; s < cfg.samples; ++s) {
      auto& u = cand[static_cast<std::size_t>(s)];
      u.resize(H * cdim);
      for (auto& v : u) v = clamp(cfg.hover_thrust + std * rng.normal());
    }
  }
  if (!warm.empty()) {
    auto& u = cand.back();
    u.assign(warm.begin(), warm.end());
    u.erase(u.begin(), u.begin() + cdim);                       // shift one step
    u.insert(u.end(), warm.end() - cdim, warm.end());           // repeat the last action
    for (auto& v : u) v = clamp(v);
  }

  std::vector<double> best_cost(n_cand, std::numeric_limits<double>::infinity());

  parallel_for(n_cand, cfg.threads, [&](std::size_t ci) {
    auto local = stepper;  // private scratch per candidate
    auto& u = cand[ci];
    std::vector<double> states((H + 1) * n), best_u = u;
    std::vector<double> g(n), xb(n), ub(cdim), u_grad(H * cdim), delta(n);
    // the torque channel is far stiffer than total thrust, so raw gradient
    // steps either stall or oscillate; a diagonal preconditioner fixes both
    Adam refiner(H * cdim, AdamConfig{cfg.refine_step, 0.9, 0.999, 1e-8});

    double best = std::numeric_limits<double>::infinity();
    for (int it = 0; it <= cfg.iterations; ++it) {
      double cost;
      try {
        std::copy(x0.begin(), x0.end(), states.begin());
        for (std::size_t t = 0; t < H; ++t) {
          auto xt = std::span<const double>(states).subspan(t * n, n);
          auto next = std::span<double>(states).subspan((t + 1) * n, n);
          local.step(xt, std::span<const double>(u).subspan(t * cdim, cdim), cfg.dt, next);
          for (std::size_t d = 0; d < n; ++d) next[d] += xt[d];
        }
        cost = trajectory_cost(std::span<const double>(states).subspan(n), u, goal,
                               cfg.weights);
        if (!std::isfinite(cost)) throw DivergenceError("non-finite plan cost", 0);
      } catch (const DivergenceError&) {
        break;  // keep the best finite iterate, if any
      }
      if (cost < best) {
        best = cost;
        best_u = u;
      }
      if (it == cfg.iterations) break;

      // reverse pass: cotangent of each state feeds the one before it
      try {
        std::fill(g.begin(), g.end(), 0.0);
        detail::cost_state_grad(std::span<const double>(states).subspan(H * n, n), goal,
                                cfg.weights, g);
        for (std::size_t t = H; t-- > 0;) {
          auto xt = std::span<const double>(states).subspan(t * n, n);
          auto ut = std::span<double>(u).subspan(t * cdim, cdim);
          std::fill(ub.begin(), ub.end(), 0.0);
          local.step_vjp(xt, ut, cfg.dt, delta, g, xb, ub);
          detail::cost_control_grad(ut, cfg.weights, ub);
          std::copy(ub.begin(), ub.end(), u_grad.begin() + static_cast<std::ptrdiff_t>(t * cdim));
          if (t > 0) {
            // x_{t+1} = x_t + delta: pass-through plus the step's pullback
            for (std::size_t d = 0; d < n; ++d) g[d] += xb[d];
            detail::cost_state_grad(xt, goal, cfg.weights, g);
          }
        }
        refiner.update(u, u_grad);
      } catch (const DivergenceError&) {
        break;
      } catch (const NumericError&) {
        break;  // non-finite gradient: keep the best finite iterate
      }
      for (auto& v : u) v = clamp(v);
    }
    best_cost[ci] = best;
    cand[ci] = std::move(best_u);
  });

  std::size_t winner = 0;
  for (std::size_t ci = 1; ci < n_cand; ++ci)
    if (best_cost[ci] < best_cost[winner]) winner = ci;
  if (!std::isfinite(best_cost[winner]))
    throw NumericError("planning failed: every candidate diverged");

  PlanResult out;
  out.controls = std::move(cand[winner]);
  out.cost = best_cost[winner];
  out.candidate = static_cast<int>(winner);
  return out;
}

struct EpisodeLog {
  int state_dim = 0;
  int control_dim = 0;
  std::vector<double> states;     // (steps + 1) x state_dim true states, x0 first
  std::vector<double> controls;   // steps x control_dim applied controls
  std::vector<double> plan_cost;  // predicted cost of each chosen plan
  std::vector<double> wall_ms;    // planning wall time per step
  bool aborted = false;

  bool metrics_defined = false;
  double final_distance = std::numeric_limits<double>::quiet_NaN();
  double mean_distance = std::numeric_limits<double>::quiet_NaN();
  double slew_rate = std::numeric_limits<double>::quiet_NaN();

  std::size_t steps() const { return controls.size() / 2; }
};

/// Closed loop: plan, apply the first action to the true plant (fine RK4),
/// re-plan from the measured state. Warm starts reuse the previous plan from
/// the second step on. A plant divergence or a fully failed plan aborts the
/// episode; whatever was logged up to that point is kept, metrics undefined.
template <class Stepper>
EpisodeLog run_episode(const VectorField& plant, Stepper& model, std::span<const double> x0,
                       std::span<const double> goal, const MpcConfig& cfg) {
  cfg.validate();
  detail::check_goal(goal);
  constexpr auto n = static_cast<std::size_t>(detail::kQuadStateDim);
  constexpr auto cdim = static_cast<std::size_t>(detail::kQuadControlDim);
  if (plant.state_dim != detail::kQuadStateDim || plant.control_dim != detail::kQuadControlDim)
    throw ConfigError("run_episode: plant is not a birotor");
  if (x0.size() != n) throw ConfigError("run_episode: x0 has the wrong dimension");

  EpisodeLog log;
  log.state_dim = detail::kQuadStateDim;
  log.control_dim = detail::kQuadControlDim;
  if (cfg.episode_steps == 0) return log;

  std::vector<double> x(x0.begin(), x0.end()), delta(n);
  log.states.insert(log.states.end(), x.begin(), x.end());
  std::vector<double> previous;  // last chosen plan, for warm starting

  for (int step = 0; step < cfg.episode_steps; ++step) {
    PlanResult pr;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto warm = (cfg.warm_start && !previous.empty())
                            ? std::span<const double>(previous)
                            : std::span<const double>();
      pr = plan(model, x, goal, cfg, warm, static_cast<std::uint64_t>(step));
    } catch (const NumericError&) {
      log.aborted = true;
      break;
    }
    const auto t1 = std::chrono::steady_clock::now();

    auto u0 = std::span<const double>(pr.controls).first(cdim);
    try {
      rk4_delta(plant, x, u0, IntegrationSpec{cfg.dt, cfg.true_substeps}, delta);
    } catch (const DivergenceError&) {
      log.aborted = true;
      break;
    }
    for (std::size_t d = 0; d < n; ++d) x[d] += delta[d];

    log.states.insert(log.states.end(), x.begin(), x.end());
    log.controls.insert(log.controls.end(), u0.begin(), u0.end());
    log.plan_cost.push_back(pr.cost);
    log.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    previous = std::move(pr.controls);
  }

  if (!log.aborted && !log.controls.empty()) {
    const std::size_t N = log.steps();
    const double gx = goal[0], gz = goal[1];
    double dist_sum = 0.0;
    for (std::size_t t = 1; t <= N; ++t) {
      const double* s = log.states.data() + t * n;
      dist_sum += std::hypot(s[0] - gx, s[1] - gz);
    }
    const double* last = log.states.data() + N * n;
    log.final_distance = std::hypot(last[0] - gx, last[1] - gz);
    log.mean_distance = dist_sum / static_cast<double>(N);
    double slew = 0.0;
    for (std::size_t t = 1; t < N; ++t) {
      const double* a = log.controls.data() + (t - 1) * cdim;
      const double* b = log.controls.data() + t * cdim;
      slew += std::hypot(b[0] - a[0], b[1] - a[1]) / cfg.dt;
    }
    log.slew_rate = N > 1 ? slew / static_cast<double>(N - 1) : 0.0;
    log.metrics_defined = true;
  }
  return log;
}

/// Convenience wrapper: identified encoder model as the planner's predictor.
inline EpisodeLog run_episode(const VectorField& plant, const EncoderModel& model,
                              const Coefficients& c, std::span<const double> x0,
                              std::span<const double> goal, const MpcConfig& cfg) {
  ModelStepper stepper(model, c, cfg.model_substeps);
  return run_episode(plant, stepper, x0, goal, cfg);
}

}  // namespace fenode
