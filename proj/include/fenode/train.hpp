#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fenode/dataset.hpp"
#include "fenode/encoder.hpp"
#include "fenode/error.hpp"
#include "fenode/integrate.hpp"
#include "fenode/nn.hpp"
#include "fenode/parallel.hpp"
#include "fenode/rng.hpp"

namespace fenode {

struct ModelArch {
  ModelMode mode = ModelMode::FeNode;
  int k = 8;
  std::vector<int> hidden_layers{64, 64};
  /// Residuals mode: start the average field from these parameters instead of
  /// a random init (e.g. a hand-built field encoding prior knowledge).
  std::optional<MlpParams> preset_avg;
  /// Residuals mode: skip the average-field loss entirely and never update
  /// its parameters.
  bool freeze_avg = false;
};

struct TrainConfig {
  int steps = 1000;
  int functions_per_update = 32;
  int batch = 32;              // tuples sampled per function and update
  double lr = 1e-3;
  double clip_norm = 1.0;      // joint norm over every trainable parameter
  double volume = 1.0;         // V in the Monte-Carlo inner product
  int substeps = 1;
  /// When set, each update draws twice the batch per function and uses the
  /// first half only for the coefficient estimate and the second half only
  /// for the prediction loss. Default: one shared minibatch for both.
  bool split_examples = false;
  std::uint64_t seed = 0;
  int threads = 1;
  std::function<void(int step, double loss)> observer;
  /// Diagnostic peek at the evolving model every inspect_every updates (and
  /// after the last one). 0 disables.
  int inspect_every = 0;
  std::function<void(int step, const EncoderModel& model)> inspect;
};

inline void validate(const TrainConfig& c) {
  if (c.steps < 0) throw ConfigError("train: steps must be >= 0");
  if (c.functions_per_update < 1) throw ConfigError("train: functions_per_update must be >= 1");
  if (c.batch < 1) throw ConfigError("train: batch must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (!(c.clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
  if (!(c.volume > 0.0)) throw ConfigError("train: volume must be positive");
  if (c.substeps < 1) throw ConfigError("train: substeps must be >= 1");
  if (c.threads < 1) throw ConfigError("train: threads must be >= 1");
}

namespace detail {

/// One training function: every tuple whose trajectory shares one hidden
/// parameter draw, pre-normalized once.
struct FnData {
  std::vector<double> z;    // count x n, normalized start states
  std::vector<double> t;    // count x n, normalized deltas z_next - z
  std::vector<double> aux;  // count x aux_dim, controls (+ hidden for oracle)
  std::vector<double> dt;   // count
  std::vector<double> hidden;
  std::size_t count = 0;
};

/// Groups datasets by bitwise-identical hidden records, in first-appearance
/// order. Datasets without a hidden record each form their own function.
inline std::vector<std::vector<std::size_t>> group_datasets(
    std::span<const TrajectoryDataset> datasets) {
  std::vector<std::vector<std::size_t>> groups;
  std::map<std::string, std::size_t> by_key;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    if (datasets[d].hidden.empty()) {
      groups.push_back({d});
      continue;
    }
    std::string key(reinterpret_cast<const char*>(datasets[d].hidden.data()),
                    datasets[d].hidden.size() * sizeof(double));
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      by_key.emplace(std::move(key), groups.size());
      groups.push_back({d});
    } else {
      groups[it->second].push_back(d);
    }
  }
  return groups;
}

inline std::vector<FnData> build_function_data(std::span<const TrajectoryDataset> datasets,
                                               const EncoderModel& model) {
  auto groups = group_datasets(datasets);
  const auto n = static_cast<std::size_t>(model.state_dim);
  const auto a = static_cast<std::size_t>(model.aux_dim() - (model.mode == ModelMode::FeDirect));
  std::vector<FnData> fns(groups.size());
  std::vector<double> z(n), zn(n), auxrow;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& fn = fns[g];
    fn.hidden = datasets[groups[g].front()].hidden;
    for (std::size_t d : groups[g]) {
      const auto& ds = datasets[d];
      for (std::size_t j = 0; j < ds.size(); ++j) {
        model.norm.normalize(ds.state(j), z);
        model.norm.normalize(ds.next_state(j), zn);
        for (std::size_t i = 0; i < n; ++i) {
          fn.z.push_back(z[i]);
          fn.t.push_back(zn[i] - z[i]);
        }
        assemble_aux(model, ds.control(j), ds.hidden, auxrow);
        if (auxrow.size() != a) throw ConfigError("train: inconsistent aux dims");
        fn.aux.insert(fn.aux.end(), auxrow.begin(), auxrow.end());
        fn.dt.push_back(ds.dt[j]);
        ++fn.count;
      }
    }
  }
  return fns;
}

/// Per-parallel-slot scratch for one function's forward/backward pass.
struct TrainSlot {
  std::vector<std::vector<double>> grad;  // one slab per trainable net
  double loss = 0.0;
  std::vector<std::size_t> idx;
  std::vector<double> G;            // batch x k x n basis deltas
  std::vector<NetOdeTape> tapes;    // batch x k (integrated modes)
  std::vector<double> direct_in;    // batch x (n + a + 1) (direct mode)
  std::vector<NetOdeTape> avg_tapes;
  std::vector<double> r;            // batch x n average-field deltas
  std::vector<double> t;            // batch x n working targets
  std::vector<double> c, cbar, cot, e;
  MlpWork mlp;
};

/// Forward and backward for one function minibatch. Implements the training
/// loss sum_j ||t_j - sum_i c_i G_ij||^2 with the coefficient estimate inside
/// the gradient graph: c_i = s * sum_{j in coeff batch} <t_j, G_ij> with
/// s = V / |coeff batch|, so
///   dL/dG_ij = -2 c_i e_j               (prediction batch)
///            + s * cbar_i * t_j         (coefficient batch)
///   cbar_i   = -2 sum_j <e_j, G_ij>.
/// In residuals mode t_j has the average-field delta subtracted and is
/// treated as a constant: no cotangent from this loss reaches the average
/// parameters. The average field trains on its own loss
/// sum_j ||dz_j - r_j||^2 whose gradient is accumulated into the last slab.
/// Baselines skip the coefficient path and use c = 1.
inline void function_pass(const EncoderModel& model, const FnData& fn, const TrainConfig& cfg,
                          bool train_avg, std::span<const std::size_t> idx, std::size_t coeff_count,
                          TrainSlot& slot) {
  const auto n = static_cast<std::size_t>(model.state_dim);
  const auto k = static_cast<std::size_t>(model.k);
  const auto a = fn.count ? fn.aux.size() / fn.count : 0;
  const std::size_t B = idx.size();
  const bool direct = model.mode == ModelMode::FeDirect;
  const bool baseline = is_baseline(model.mode);
  // prediction batch: the full sample by default, the tail in split mode
  const std::size_t pred_begin = coeff_count == B ? 0 : coeff_count;

  slot.t.resize(B * n);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) slot.t[b * n + i] = fn.t[idx[b] * n + i];

  if (model.avg) {
    slot.r.resize(B * n);
    slot.avg_tapes.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t j = idx[b];
      net_ode_delta(*model.avg, std::span<const double>(fn.z.data() + j * n, n),
                    std::span<const double>(fn.aux.data() + j * a, a),
                    IntegrationSpec{fn.dt[j], cfg.substeps},
                    std::span<double>(slot.r.data() + b * n, n),
                    train_avg ? &slot.avg_tapes[b] : nullptr, &slot.mlp);
      for (std::size_t i = 0; i < n; ++i) slot.t[b * n + i] -= slot.r[b * n + i];
    }
  }

  slot.G.resize(B * k * n);
  if (direct) {
    slot.direct_in.resize(B * (n + a + 1));
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t j = idx[b];
      double* in = slot.direct_in.data() + b * (n + a + 1);
      std::memcpy(in, fn.z.data() + j * n, n * sizeof(double));
      std::memcpy(in + n, fn.aux.data() + j * a, a * sizeof(double));
      in[n + a] = fn.dt[j];
      for (std::size_t i = 0; i < k; ++i)
        mlp_forward(model.basis[i], std::span<const double>(in, n + a + 1),
                    std::span<double>(slot.G.data() + (b * k + i) * n, n), slot.mlp);
    }
  } else {
    slot.tapes.resize(B * k);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t j = idx[b];
      for (std::size_t i = 0; i < k; ++i)
        net_ode_delta(model.basis[i], std::span<const double>(fn.z.data() + j * n, n),
                      std::span<const double>(fn.aux.data() + j * a, a),
                      IntegrationSpec{fn.dt[j], cfg.substeps},
                      std::span<double>(slot.G.data() + (b * k + i) * n, n),
                      &slot.tapes[b * k + i], &slot.mlp);
    }
  }

  slot.c.assign(k, baseline ? 1.0 : 0.0);
  const double s = cfg.volume / static_cast<double>(coeff_count);
  if (!baseline) {
    for (std::size_t b = 0; b < coeff_count; ++b)
      for (std::size_t i = 0; i < k; ++i) {
        double dot = 0.0;
        for (std::size_t d = 0; d < n; ++d)
          dot += slot.t[b * n + d] * slot.G[(b * k + i) * n + d];
        slot.c[i] += dot;
      }
    for (auto& v : slot.c) v *= s;
  }

  slot.e.resize(B * n);
  slot.cbar.assign(k, 0.0);
  for (std::size_t b = pred_begin; b < B; ++b) {
    for (std::size_t d = 0; d < n; ++d) {
      double pred = 0.0;
      for (std::size_t i = 0; i < k; ++i) pred += slot.c[i] * slot.G[(b * k + i) * n + d];
      const double e = slot.t[b * n + d] - pred;
      slot.e[b * n + d] = e;
      slot.loss += e * e;
    }
    if (!baseline)
      for (std::size_t i = 0; i < k; ++i) {
        double dot = 0.0;
        for (std::size_t d = 0; d < n; ++d)
          dot += slot.e[b * n + d] * slot.G[(b * k + i) * n + d];
        slot.cbar[i] -= 2.0 * dot;
      }
  }

  slot.cot.resize(n);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t j = idx[b];
    const bool in_pred = b >= pred_begin;
    const bool in_coeff = b < coeff_count;
    for (std::size_t i = 0; i < k; ++i) {
      bool any = false;
      for (std::size_t d = 0; d < n; ++d) {
        double g = 0.0;
        if (in_pred) g -= 2.0 * slot.c[i] * slot.e[b * n + d];
        if (in_coeff && !baseline) g += s * slot.cbar[i] * slot.t[b * n + d];
        slot.cot[d] = g;
        any = any || g != 0.0;
      }
      if (!any) continue;
      if (direct) {
        const double* in = slot.direct_in.data() + b * (n + a + 1);
        mlp_backward(model.basis[i], std::span<const double>(in, n + a + 1), slot.cot, {},
                     slot.grad[i], slot.mlp);
      } else {
        net_ode_vjp(model.basis[i], std::span<const double>(fn.aux.data() + j * a, a),
                    slot.tapes[b * k + i], IntegrationSpec{fn.dt[j], cfg.substeps}, slot.cot,
                    slot.grad[i], {}, {}, &slot.mlp);
      }
    }
    if (train_avg && in_pred) {
      // average-field loss on the same tuples; t still equals dz - r here
      for (std::size_t d = 0; d < n; ++d) {
        slot.loss += slot.t[b * n + d] * slot.t[b * n + d];
        slot.cot[d] = -2.0 * slot.t[b * n + d];
      }
      net_ode_vjp(*model.avg, std::span<const double>(fn.aux.data() + j * a, a),
                  slot.avg_tapes[b], IntegrationSpec{fn.dt[j], cfg.substeps}, slot.cot,
                  slot.grad[k], {}, {}, &slot.mlp);
    }
  }
}

}  // namespace detail

/// Trains a model on a corpus of trajectory datasets. Datasets sharing a
/// hidden-parameter draw are pooled into one training function. Each step
/// samples functions, computes per-function losses with minibatch coefficient
/// estimates inside the gradient graph, accumulates gradients across
/// functions, clips the joint norm, and takes one Adam step. The fitted state
/// normalizer is stored in the returned model. Deterministic for a fixed
/// config, independent of thread count.
inline EncoderModel train(std::span<const TrajectoryDataset> datasets, const ModelArch& arch,
                          const TrainConfig& cfg) {
  validate(cfg);
  if (datasets.size() < 2)
    throw ConfigError("train: need at least 2 datasets to exercise a function space");
  for (const auto& ds : datasets) ds.validate();
  const int n = datasets[0].state_dim;
  const int p = datasets[0].control_dim;
  const auto hidden_dim = datasets[0].hidden.size();
  for (const auto& ds : datasets)
    if (ds.state_dim != n || ds.control_dim != p || ds.hidden.size() != hidden_dim)
      throw ConfigError("train: datasets disagree on dimensions");
  if (arch.mode == ModelMode::OracleBaseline && hidden_dim == 0)
    throw ConfigError("train: oracle baseline needs hidden-parameter records");

  EncoderModel model = make_model(arch.mode, n, p, static_cast<int>(hidden_dim), arch.k,
                                  arch.hidden_layers, cfg.seed);
  model.volume = cfg.volume;
  if (arch.preset_avg) {
    if (arch.mode != ModelMode::FeNodeResiduals)
      throw ConfigError("train: preset average field requires the residuals mode");
    model.avg = *arch.preset_avg;
  }
  if (arch.freeze_avg && arch.mode != ModelMode::FeNodeResiduals)
    throw ConfigError("train: freeze_avg requires the residuals mode");
  model.norm = fit_normalizer(datasets);
  model.validate();

  auto fns = detail::build_function_data(datasets, model);
  if (fns.size() < 2)
    throw ConfigError("train: need at least 2 distinct functions (got " +
                      std::to_string(fns.size()) + ")");
  for (const auto& fn : fns)
    if (fn.count == 0) throw ConfigError("train: empty function group");

  const bool train_avg = model.avg.has_value() && !arch.freeze_avg;
  const auto k = static_cast<std::size_t>(model.k);
  const std::size_t nets = k + (train_avg ? 1 : 0);

  const std::size_t F = std::min<std::size_t>(static_cast<std::size_t>(cfg.functions_per_update),
                                              fns.size());
  std::vector<detail::TrainSlot> slots(F);
  for (auto& slot : slots) {
    slot.grad.resize(nets);
    for (std::size_t i = 0; i < k; ++i) slot.grad[i].resize(model.basis[i].w.size());
    if (train_avg) slot.grad[k].resize(model.avg->w.size());
  }

  std::vector<std::vector<double>> grad(nets);
  std::vector<Adam> opt;
  const AdamConfig adam_cfg{cfg.lr, 0.9, 0.999, 1e-8};
  for (std::size_t i = 0; i < k; ++i) {
    grad[i].resize(model.basis[i].w.size());
    opt.emplace_back(model.basis[i].w.size(), adam_cfg);
  }
  if (train_avg) {
    grad[k].resize(model.avg->w.size());
    opt.emplace_back(model.avg->w.size(), adam_cfg);
  }

  auto rng = Rng::stream(cfg.seed, 0x51f0);
  std::vector<std::size_t> fn_order(fns.size());
  for (std::size_t i = 0; i < fns.size(); ++i) fn_order[i] = i;
  std::vector<std::size_t> chosen(F);
  std::vector<std::vector<std::size_t>> batch_idx(F);

  for (int step = 0; step < cfg.steps; ++step) {
    // all sampling happens up front on one stream: thread-count independent
    if (F == fns.size()) {
      chosen = fn_order;
    } else {
      rng.sample_without_replacement(static_cast<std::int64_t>(fns.size()),
                                     static_cast<std::int64_t>(F), chosen.begin());
    }
    std::vector<std::size_t> coeff_counts(F);
    for (std::size_t s = 0; s < F; ++s) {
      const auto& fn = fns[chosen[s]];
      const std::size_t want = static_cast<std::size_t>(cfg.batch) * (cfg.split_examples ? 2 : 1);
      auto& idx = batch_idx[s];
      if (fn.count <= want) {
        idx.resize(fn.count);
        for (std::size_t i = 0; i < fn.count; ++i) idx[i] = i;
      } else {
        idx.resize(want);
        rng.sample_without_replacement(static_cast<std::int64_t>(fn.count),
                                       static_cast<std::int64_t>(want), idx.begin());
      }
      coeff_counts[s] = cfg.split_examples ? std::max<std::size_t>(1, idx.size() / 2) : idx.size();
      if (cfg.split_examples && idx.size() < 2)
        throw ConfigError("train: split_examples needs at least 2 tuples per function");
    }

    parallel_for(F, cfg.threads, [&](std::size_t s) {
      auto& slot = slots[s];
      slot.loss = 0.0;
      for (auto& gslab : slot.grad) std::fill(gslab.begin(), gslab.end(), 0.0);
      detail::function_pass(model, fns[chosen[s]], cfg, train_avg, batch_idx[s], coeff_counts[s],
                            slot);
    });

    double loss = 0.0;
    for (std::size_t s = 0; s < F; ++s) loss += slots[s].loss;
    if (!std::isfinite(loss))
      throw NumericError("train: non-finite loss at step " + std::to_string(step));

    for (std::size_t g = 0; g < nets; ++g) {
      std::fill(grad[g].begin(), grad[g].end(), 0.0);
      for (std::size_t s = 0; s < F; ++s) {
        const auto& src = slots[s].grad[g];
        for (std::size_t i = 0; i < src.size(); ++i) grad[g][i] += src[i];
      }
    }

    std::vector<std::span<double>> parts(grad.begin(), grad.end());
    clip_global_norm(std::span<const std::span<double>>(parts), cfg.clip_norm);

    for (std::size_t i = 0; i < k; ++i) opt[i].update(model.basis[i].w, grad[i]);
    if (train_avg) opt[k].update(model.avg->w, grad[k]);

    if (cfg.observer) cfg.observer(step, loss);
    if (cfg.inspect && cfg.inspect_every > 0 &&
        ((step + 1) % cfg.inspect_every == 0 || step + 1 == cfg.steps))
      cfg.inspect(step, model);
  }
  return model;
}

/// Algorithm-2 entry point: trains the average field on the raw deltas and
/// the basis on the detached residuals. Thin dispatch over train() with the
/// mode pinned.
inline EncoderModel train_residuals(std::span<const TrajectoryDataset> datasets,
                                    const ModelArch& arch, const TrainConfig& cfg) {
  if (arch.mode != ModelMode::FeNodeResiduals)
    throw ConfigError("train_residuals: arch.mode must be fe_node_residuals");
  return train(datasets, arch, cfg);
}

}  // namespace fenode
