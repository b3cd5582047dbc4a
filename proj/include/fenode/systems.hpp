#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fenode/dataset.hpp"
#include "fenode/error.hpp"
#include "fenode/integrate.hpp"
#include "fenode/parallel.hpp"
#include "fenode/rng.hpp"

namespace fenode {

// --- concrete dynamics ----------------------------------------------------------

/// Van der Pol oscillator: x' = y, y' = mu (1 - x^2) y - x.
inline VectorField vdp_field(double mu) {
  VectorField f;
  f.state_dim = 2;
  f.control_dim = 0;
  f.eval = [mu](std::span<const double> x, std::span<const double>, std::span<double> dx) {
    dx[0] = x[1];
    dx[1] = mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
  };
  f.vjp = [mu](std::span<const double> x, std::span<const double>, std::span<const double> cot,
               std::span<double> x_bar, std::span<double>) {
    x_bar[0] += cot[1] * (-2.0 * mu * x[0] * x[1] - 1.0);
    x_bar[1] += cot[0] + cot[1] * mu * (1.0 - x[0] * x[0]);
  };
  return f;
}

struct Quad2dConsts {
  double gravity = 9.81;
  double arm = 0.1;         // rotor arm length l; inertia I = m l^2 / 2
  double thrust_max = 8.0;  // per rotor
};

/// Planar birotor. State (px, pz, theta, vx, vz, omega), controls (T1, T2).
inline VectorField quad2d_field(double mass, Quad2dConsts c = {}) {
  if (!(mass > 0.0)) throw ConfigError("quad2d: mass must be positive");
  VectorField f;
  f.state_dim = 6;
  f.control_dim = 2;
  f.eval = [mass, c](std::span<const double> x, std::span<const double> u, std::span<double> dx) {
    const double T = u[0] + u[1];
    const double s = std::sin(x[2]), co = std::cos(x[2]);
    dx[0] = x[3];
    dx[1] = x[4];
    dx[2] = x[5];
    dx[3] = -T * s / mass;
    dx[4] = T * co / mass - c.gravity;
    dx[5] = 2.0 * (u[1] - u[0]) / (mass * c.arm);  // l (T2 - T1) / (m l^2 / 2)
  };
  f.vjp = [mass, c](std::span<const double> x, std::span<const double> u,
                    std::span<const double> cot, std::span<double> x_bar,
                    std::span<double> u_bar) {
    const double T = u[0] + u[1];
    const double s = std::sin(x[2]), co = std::cos(x[2]);
    x_bar[2] += cot[3] * (-T * co / mass) + cot[4] * (-T * s / mass);
    x_bar[3] += cot[0];
    x_bar[4] += cot[1];
    x_bar[5] += cot[2];
    if (!u_bar.empty()) {
      const double shared = cot[3] * (-s / mass) + cot[4] * (co / mass);
      const double diff = 2.0 * cot[5] / (mass * c.arm);
      u_bar[0] += shared - diff;
      u_bar[1] += shared + diff;
    }
  };
  return f;
}

/// Toy family f_a = (a, -a): constant field, one hidden parameter.
inline VectorField constant_field(double a) {
  VectorField f;
  f.state_dim = 2;
  f.control_dim = 0;
  f.eval = [a](std::span<const double>, std::span<const double>, std::span<double> dx) {
    dx[0] = a;
    dx[1] = -a;
  };
  f.vjp = [](std::span<const double>, std::span<const double>, std::span<const double>,
             std::span<double>, std::span<double>) {};
  return f;
}

// --- families -------------------------------------------------------------------

/// A parameterized space of dynamical systems; hidden parameters select one
/// member. hidden stays out of every model input except the oracle baseline.
struct DynamicsFamily {
  std::string name;
  int state_dim = 0;
  int control_dim = 0;
  int hidden_dim = 0;
  double param_lo = 0.0, param_hi = 1.0;  // sampling range for hidden[0]
  std::function<VectorField(std::span<const double> hidden)> make_field;
};

inline DynamicsFamily make_family(const std::string& name) {
  DynamicsFamily fam;
  fam.name = name;
  fam.hidden_dim = 1;
  if (name == "van_der_pol") {
    fam.state_dim = 2;
    fam.control_dim = 0;
    fam.param_lo = 0.1;
    fam.param_hi = 3.0;
    fam.make_field = [](std::span<const double> h) { return vdp_field(h[0]); };
  } else if (name == "quad2d") {
    fam.state_dim = 6;
    fam.control_dim = 2;
    fam.param_lo = 0.7;
    fam.param_hi = 1.3;
    fam.make_field = [](std::span<const double> h) { return quad2d_field(h[0]); };
  } else if (name == "constant_field") {
    fam.state_dim = 2;
    fam.control_dim = 0;
    fam.param_lo = -1.0;
    fam.param_hi = 1.0;
    fam.make_field = [](std::span<const double> h) { return constant_field(h[0]); };
  } else {
    throw ConfigError("unknown dynamics family: " + name);
  }
  return fam;
}

// --- data generation --------------------------------------------------------------

struct GenConfig {
  int param_draws = 8;      // hidden-parameter draws
  int trajs_per_param = 1;  // trajectories sharing each draw
  int steps = 100;          // sampled states per trajectory -> steps-1 tuples
  double dt = 0.01;
  double dt_jitter = 0.0;  // dt_j uniform in dt * [1 - jitter, 1 + jitter]
  int substeps = 10;       // ground-truth RK4 substeps per interval
  std::vector<double> init_lo, init_hi;
  std::vector<double> control_lo, control_hi;
  std::string policy = "none";  // "none" | "random" | "pd_waypoint"
  int waypoint_every = 20;
  double policy_noise = 0.0;
  double param_lo = std::numeric_limits<double>::quiet_NaN();  // NaN: family default
  double param_hi = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> fixed_hidden;  // non-empty: use instead of sampling
  std::uint64_t seed = 0;
  int threads = 1;
};

inline void validate(const GenConfig& g, const DynamicsFamily& fam) {
  if (g.param_draws < 1 || g.trajs_per_param < 1) throw ConfigError("gen: draw counts must be >= 1");
  if (g.steps < 3) throw ConfigError("gen: steps must be >= 3 (two tuples minimum)");
  if (!(g.dt > 0.0)) throw ConfigError("gen: dt must be positive");
  if (g.dt_jitter < 0.0 || g.dt_jitter >= 1.0) throw ConfigError("gen: dt_jitter must be in [0, 1)");
  if (g.substeps < 1) throw ConfigError("gen: substeps must be >= 1");
  if (static_cast<int>(g.init_lo.size()) != fam.state_dim ||
      static_cast<int>(g.init_hi.size()) != fam.state_dim)
    throw ConfigError("gen: init box must match the family state dim");
  for (std::size_t i = 0; i < g.init_lo.size(); ++i)
    if (g.init_lo[i] > g.init_hi[i]) throw ConfigError("gen: init box lo > hi");
  if (fam.control_dim > 0 && g.policy != "none") {
    if (static_cast<int>(g.control_lo.size()) != fam.control_dim ||
        static_cast<int>(g.control_hi.size()) != fam.control_dim)
      throw ConfigError("gen: control bounds must match the family control dim");
  }
  if (g.policy != "none" && g.policy != "random" && g.policy != "pd_waypoint")
    throw ConfigError("gen: unknown policy: " + g.policy);
  if (!g.fixed_hidden.empty() && static_cast<int>(g.fixed_hidden.size()) != fam.hidden_dim)
    throw ConfigError("gen: fixed_hidden size must match the family hidden dim");
}

namespace detail {

/// Waypoint-chasing PD controller for the planar birotor; thrust bounds come
/// from the caller. Waypoints resample periodically so data covers the box.
class PdWaypointPolicy {
 public:
  PdWaypointPolicy(const GenConfig& cfg, Rng rng) : cfg_(cfg), rng_(rng) {}

  void act(std::span<const double> x, int step, double mass_hint, std::span<double> u_out) {
    if (step % cfg_.waypoint_every == 0) {
      wx_ = rng_.uniform(cfg_.init_lo[0], cfg_.init_hi[0]);
      wz_ = rng_.uniform(cfg_.init_lo[1], cfg_.init_hi[1]);
    }
    const Quad2dConsts c{};
    // desired accelerations toward the waypoint
    const double ax = kp_ * (wx_ - x[0]) - kd_ * x[3];
    const double az = kp_ * (wz_ - x[1]) - kd_ * x[4] + c.gravity;
    const double T = mass_hint * std::sqrt(ax * ax + az * az);
    const double theta_des = std::atan2(-ax, az);
    const double torque = k_ang_ * wrap(theta_des - x[2]) - k_rate_ * x[5];
    double t1 = 0.5 * T - 0.5 * torque;
    double t2 = 0.5 * T + 0.5 * torque;
    t1 += cfg_.policy_noise * rng_.uniform(-1.0, 1.0);
    t2 += cfg_.policy_noise * rng_.uniform(-1.0, 1.0);
    u_out[0] = clamp(t1, cfg_.control_lo[0], cfg_.control_hi[0]);
    u_out[1] = clamp(t2, cfg_.control_lo[1], cfg_.control_hi[1]);
  }

 private:
  static double clamp(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }
  static double wrap(double a) {
    while (a > 3.14159265358979323846) a -= 2.0 * 3.14159265358979323846;
    while (a < -3.14159265358979323846) a += 2.0 * 3.14159265358979323846;
    return a;
  }
  GenConfig cfg_;
  Rng rng_;
  double wx_ = 0.0, wz_ = 0.0;
  double kp_ = 2.0, kd_ = 1.8, k_ang_ = 8.0, k_rate_ = 2.0;
};

}  // namespace detail

/// Simulates the family under the configured policy. Dataset index l gets RNG
/// stream (seed, l) and hidden-parameter draw l / trajs_per_param, so results
/// are bitwise identical for any thread count. Trajectories that leave the
/// finite range are truncated with a warning; fewer than 2 usable tuples is an
/// error.
inline std::vector<TrajectoryDataset> generate(const DynamicsFamily& fam, const GenConfig& cfg) {
  validate(cfg, fam);
  const int total = cfg.param_draws * cfg.trajs_per_param;
  std::vector<TrajectoryDataset> out(static_cast<std::size_t>(total));

  // hidden draws are a separate stream so adding trajectories never reshuffles them
  std::vector<std::vector<double>> hidden(static_cast<std::size_t>(cfg.param_draws));
  for (int d = 0; d < cfg.param_draws; ++d) {
    if (!cfg.fixed_hidden.empty()) {
      hidden[static_cast<std::size_t>(d)] = cfg.fixed_hidden;
    } else {
      Rng rng = Rng::stream(cfg.seed, 0x9000 + static_cast<std::uint64_t>(d));
      const double lo = std::isnan(cfg.param_lo) ? fam.param_lo : cfg.param_lo;
      const double hi = std::isnan(cfg.param_hi) ? fam.param_hi : cfg.param_hi;
      hidden[static_cast<std::size_t>(d)] = {rng.uniform(lo, hi)};
    }
  }

  parallel_for(static_cast<std::size_t>(total), cfg.threads, [&](std::size_t l) {
    const int draw = static_cast<int>(l) / cfg.trajs_per_param;
    const auto& h = hidden[static_cast<std::size_t>(draw)];
    const VectorField field = fam.make_field(h);
    Rng rng = Rng::stream(cfg.seed, 1 + l);

    TrajectoryDataset ds;
    ds.family = fam.name;
    ds.state_dim = fam.state_dim;
    ds.control_dim = fam.control_dim;
    ds.hidden = h;

    std::vector<double> x(static_cast<std::size_t>(fam.state_dim));
    for (int i = 0; i < fam.state_dim; ++i)
      x[static_cast<std::size_t>(i)] = rng.uniform(cfg.init_lo[static_cast<std::size_t>(i)],
                                                   cfg.init_hi[static_cast<std::size_t>(i)]);

    detail::PdWaypointPolicy pd(cfg, Rng::stream(cfg.seed, 0x5000 + l));
    std::vector<double> u(static_cast<std::size_t>(fam.control_dim), 0.0);
    std::vector<double> delta(static_cast<std::size_t>(fam.state_dim));

    const int tuples = cfg.steps - 1;
    for (int j = 0; j < tuples; ++j) {
      if (fam.control_dim > 0) {
        if (cfg.policy == "pd_waypoint") {
          pd.act(x, j, 1.0, u);  // nominal-mass controller; true mass is hidden
        } else if (cfg.policy == "random") {
          for (int i = 0; i < fam.control_dim; ++i)
            u[static_cast<std::size_t>(i)] = rng.uniform(cfg.control_lo[static_cast<std::size_t>(i)],
                                                         cfg.control_hi[static_cast<std::size_t>(i)]);
        }
      }
      const double dtj = cfg.dt_jitter > 0.0
                             ? cfg.dt * (1.0 + cfg.dt_jitter * rng.uniform(-1.0, 1.0))
                             : cfg.dt;
      bool diverged = false;
      try {
        rk4_delta(field, x, u, IntegrationSpec{dtj, cfg.substeps}, delta);
      } catch (const DivergenceError&) {
        diverged = true;
      }
      if (diverged) {
        std::cerr << "warning: " << fam.name << " trajectory " << l << " truncated at step " << j
                  << " (non-finite state)\n";
        break;
      }
      ds.x.insert(ds.x.end(), x.begin(), x.end());
      ds.u.insert(ds.u.end(), u.begin(), u.end());
      for (int i = 0; i < fam.state_dim; ++i) x[static_cast<std::size_t>(i)] += delta[static_cast<std::size_t>(i)];
      ds.x_next.insert(ds.x_next.end(), x.begin(), x.end());
      ds.dt.push_back(dtj);
    }

    if (ds.size() < 2)
      throw NumericError(fam.name + ": trajectory " + std::to_string(l) +
                         " diverged before producing 2 tuples");
    ds.validate();
    out[l] = std::move(ds);
  });

  return out;
}

}  // namespace fenode
