// fenode: generate dynamics data, train function-encoder models, identify and
// evaluate unseen systems, and fly the planar birotor under sampling MPC.
//
// Every run is described by one json config plus optional --seed/--out/--threads
// overrides. Outputs are deterministic: the same config and binary produce
// byte-identical files, whatever the thread count.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fenode/config.hpp"
#include "fenode/encoder.hpp"
#include "fenode/model_io.hpp"
#include "fenode/mpc.hpp"
#include "fenode/systems.hpp"
#include "fenode/train.hpp"

namespace fs = std::filesystem;
using namespace fenode;

namespace {

constexpr int kTruthSubsteps = 20;  // reference predictor: finely integrated true field

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string join_semicolon(std::span<const double> values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ';';
    s += csv_num(values[i]);
  }
  return s;
}

fs::path need_out(const ExperimentConfig& cfg, const char* cmd) {
  if (cfg.out.empty())
    throw ConfigError(std::string(cmd) + ": output directory required (out key or --out)");
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError("cannot create output directory: " + cfg.out.string());
  return cfg.out;
}

/// Lists every file the command wrote, with size and content hash, so runs can
/// be diffed without opening anything.
void write_file_manifest(const fs::path& out, const std::vector<std::string>& names,
                         std::uint64_t config_hash) {
  CsvWriter csv(out / "manifest.csv", "file,bytes,fnv64", config_hash);
  for (const auto& name : names) {
    std::ifstream in(out / name, std::ios::binary);
    if (!in) throw IoError("manifest: cannot reopen " + (out / name).string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    csv.row(std::vector<std::string>{name, std::to_string(bytes.size()), hex64(fnv1a64(bytes))});
  }
}

/// Linear-interpolation quantile of an ascending-sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

struct ErrorSummary {
  double mse = std::numeric_limits<double>::quiet_NaN();
  double q1 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q3 = std::numeric_limits<double>::quiet_NaN();
  std::size_t rollouts = 0;
  std::size_t skipped = 0;
};

ErrorSummary summarize_errors(std::vector<double> errors, std::size_t skipped) {
  ErrorSummary s;
  s.rollouts = errors.size();
  s.skipped = skipped;
  if (errors.empty()) return s;
  double sum = 0.0;
  for (double e : errors) sum += e;
  s.mse = sum / static_cast<double>(errors.size());
  std::sort(errors.begin(), errors.end());
  s.q1 = quantile_sorted(errors, 0.25);
  s.median = quantile_sorted(errors, 0.5);
  s.q3 = quantile_sorted(errors, 0.75);
  return s;
}

// --- dataset slicing -------------------------------------------------------------

/// Datasets generated from one hidden-parameter draw, i.e. one system.
struct SystemGroup {
  std::vector<double> hidden;
  std::vector<std::size_t> members;  // indices into the dataset list, in file order
  std::size_t tuples = 0;
};

std::vector<SystemGroup> group_by_hidden(std::span<const TrajectoryDataset> datasets) {
  std::vector<SystemGroup> groups;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const SystemGroup& g) { return g.hidden == datasets[i].hidden; });
    if (it == groups.end()) {
      groups.push_back(SystemGroup{datasets[i].hidden, {i}, datasets[i].size()});
    } else {
      it->members.push_back(i);
      it->tuples += datasets[i].size();
    }
  }
  return groups;
}

/// First `m` tuples of the group, pooled for coefficient estimation.
TrajectoryDataset pool_ident(std::span<const TrajectoryDataset> datasets, const SystemGroup& g,
                             std::size_t m) {
  TrajectoryDataset pool = shell_of(datasets[g.members.front()]);
  std::size_t need = m;
  for (std::size_t idx : g.members) {
    const auto& ds = datasets[idx];
    const std::size_t take = std::min(need, ds.size());
    append_tuples(pool, ds, 0, take);
    need -= take;
    if (need == 0) break;
  }
  if (need > 0)
    throw ConfigError("identification wants " + std::to_string(m) + " tuples but system [" +
                      join_semicolon(g.hidden) + "] has only " + std::to_string(m - need));
  return pool;
}

/// Contiguous per-trajectory remainders after reserving the first `reserve`
/// tuples of the group for identification.
std::vector<TrajectoryDataset> eval_slices(std::span<const TrajectoryDataset> datasets,
                                           const SystemGroup& g, std::size_t reserve) {
  std::vector<TrajectoryDataset> out;
  std::size_t skip = reserve;
  for (std::size_t idx : g.members) {
    const auto& ds = datasets[idx];
    if (skip >= ds.size()) {
      skip -= ds.size();
      continue;
    }
    TrajectoryDataset slice = shell_of(ds);
    append_tuples(slice, ds, skip, ds.size() - skip);
    out.push_back(std::move(slice));
    skip = 0;
  }
  if (out.empty())
    throw ConfigError("system [" + join_semicolon(g.hidden) + "] has no tuples left after " +
                      std::to_string(reserve) + " identification tuples; generate longer data");
  return out;
}

Coefficients identify(const EncoderModel& m, const TrajectoryDataset& ident,
                      const std::string& estimator, double ridge, int substeps) {
  return estimator == "inner_product" ? estimate_coefficients_ip(m, ident, substeps)
                                      : estimate_coefficients_ls(m, ident, ridge, substeps);
}

std::vector<TrajectoryDataset> load_required_data(const fs::path& path, const char* cmd) {
  if (path.empty()) throw ConfigError(std::string(cmd) + ": data file required");
  return load_datasets(path);
}

EncoderModel load_required_model(const fs::path& path, const char* cmd) {
  if (path.empty()) throw ConfigError(std::string(cmd) + ": model_file required");
  return load_model(path);
}

// --- commands --------------------------------------------------------------------

int cmd_gen(const ExperimentConfig& cfg) {
  if (cfg.family.empty()) throw ConfigError("gen: family required");
  if (!cfg.generation) throw ConfigError("gen: generation section required");
  const fs::path out = need_out(cfg, "gen");
  const std::uint64_t hash = fnv1a64(cfg.raw);

  const DynamicsFamily fam = make_family(cfg.family);
  const auto datasets = generate(fam, *cfg.generation);
  save_datasets(out / "data.fed", datasets);

  std::size_t tuples = 0;
  {
    CsvWriter csv(out / "datasets.csv", "dataset,family,hidden,tuples", hash);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      csv.row(std::vector<std::string>{std::to_string(i), datasets[i].family,
                                       join_semicolon(datasets[i].hidden),
                                       std::to_string(datasets[i].size())});
      tuples += datasets[i].size();
    }
  }
  write_file_manifest(out, {"data.fed", "datasets.csv"}, hash);
  std::cout << "gen: " << datasets.size() << " trajectories, " << tuples << " tuples -> "
            << (out / "data.fed").string() << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  if (!cfg.model) throw ConfigError("train: model section required");
  if (!cfg.train) throw ConfigError("train: train section required");
  const auto datasets = load_required_data(cfg.data, "train");
  const fs::path out = need_out(cfg, "train");
  const std::uint64_t hash = fnv1a64(cfg.raw);

  TrainConfig tcfg = *cfg.train;
  std::vector<std::pair<int, double>> losses;
  losses.reserve(static_cast<std::size_t>(tcfg.steps));
  tcfg.observer = [&](int step, double loss) { losses.emplace_back(step, loss); };

  // periodic basis-correlation diagnostic, probed on the first dataset
  struct GramRow {
    int updates;
    GramStats stats;
  };
  std::vector<GramRow> gram_rows;
  auto probe = [&](const EncoderModel& m) {
    return gram_stats(gram_matrix(m, datasets[0], tcfg.substeps), m.k);
  };
  if (cfg.gram_log_every > 0) {
    TrainConfig init_cfg = tcfg;
    init_cfg.steps = 0;  // a zero-step run is exactly the seeded initial model
    init_cfg.observer = nullptr;
    gram_rows.push_back({0, probe(train(datasets, *cfg.model, init_cfg))});
    tcfg.inspect_every = cfg.gram_log_every;
    tcfg.inspect = [&](int step, const EncoderModel& m) {
      gram_rows.push_back({step + 1, probe(m)});
    };
  }

  EncoderModel model = train(datasets, *cfg.model, tcfg);
  model.config_echo = cfg.raw;
  save_model(out / "model.fem", model);

  std::vector<std::string> files{"model.fem"};
  {
    CsvWriter csv(out / "loss.csv", "step,loss", hash);
    for (const auto& [step, loss] : losses)
      csv.row(std::vector<std::string>{std::to_string(step), csv_num(loss)});
    files.push_back("loss.csv");
  }
  if (!gram_rows.empty()) {
    CsvWriter csv(out / "gram.csv", "updates,offdiag_mean,cond,min_eig,max_eig", hash);
    for (const auto& row : gram_rows)
      csv.row(std::vector<std::string>{std::to_string(row.updates), csv_num(row.stats.offdiag_mean),
                                       csv_num(row.stats.cond), csv_num(row.stats.min_eig),
                                       csv_num(row.stats.max_eig)});
    files.push_back("gram.csv");
  }
  write_file_manifest(out, files, hash);

  std::cout << "train: " << mode_name(model.mode) << " k=" << model.k << ", "
            << datasets.size() << " trajectories, " << tcfg.steps << " updates";
  if (!losses.empty()) std::cout << ", final loss " << losses.back().second;
  std::cout << " -> " << (out / "model.fem").string() << "\n";
  return 0;
}

/// One results row per (method, system, horizon) with quartiles over rollouts.
int cmd_eval(const ExperimentConfig& cfg) {
  if (!cfg.eval) throw ConfigError("eval: eval section required");
  const EvalConfig& ev = *cfg.eval;
  const EncoderModel model = load_required_model(cfg.model_file, "eval");
  const fs::path data_path = cfg.eval_data.empty() ? cfg.data : cfg.eval_data;
  const auto datasets = load_required_data(data_path, "eval");
  const fs::path out = need_out(cfg, "eval");
  const std::uint64_t hash = fnv1a64(cfg.raw);

  const auto groups = group_by_hidden(datasets);
  CsvWriter csv(out / "results.csv",
                "method,estimator,hidden,horizon,ident_tuples,mse,q1,median,q3,rollouts,skipped",
                hash);

  std::map<int, std::pair<double, std::size_t>> pooled;  // horizon -> (sum, count)
  for (const auto& g : groups) {
    const auto ident = pool_ident(datasets, g, ev.example_size);
    const auto slices = eval_slices(datasets, g, ev.example_size);
    const auto c = identify(model, ident, ev.estimator, ev.ridge, ev.substeps);
    for (int h : ev.horizons) {
      std::vector<double> errors;
      std::size_t skipped = 0;
      for (const auto& slice : slices) {
        auto e = rollout_errors(model, c, slice, h, ev.substeps);
        if (e.empty()) {
          ++skipped;
          continue;
        }
        errors.insert(errors.end(), e.begin(), e.end());
      }
      const auto s = summarize_errors(std::move(errors), skipped);
      csv.row(std::vector<std::string>{
          mode_name(model.mode), ev.estimator, join_semicolon(g.hidden), std::to_string(h),
          std::to_string(ident.size()), csv_num(s.mse), csv_num(s.q1), csv_num(s.median),
          csv_num(s.q3), std::to_string(s.rollouts), std::to_string(s.skipped)});
      if (s.rollouts) {
        pooled[h].first += s.mse * static_cast<double>(s.rollouts);
        pooled[h].second += s.rollouts;
      }
    }
  }

  if (ev.reference_row) {
    if (cfg.family.empty())
      throw ConfigError("eval: family required for the true-field reference row");
    const DynamicsFamily fam = make_family(cfg.family);
    for (const auto& g : groups) {
      const VectorField field = fam.make_field(g.hidden);
      const auto slices = eval_slices(datasets, g, ev.example_size);
      std::vector<double> delta(static_cast<std::size_t>(field.state_dim));
      auto step = [&](std::span<const double> x, std::span<const double> u, double dt,
                      std::span<double> d) {
        rk4_delta(field, x, u, IntegrationSpec{dt, kTruthSubsteps}, d);
      };
      for (int h : ev.horizons) {
        std::vector<double> errors;
        std::size_t skipped = 0;
        for (const auto& slice : slices) {
          auto e = rollout_errors_fn(step, slice, h);
          if (e.empty()) {
            ++skipped;
            continue;
          }
          errors.insert(errors.end(), e.begin(), e.end());
        }
        const auto s = summarize_errors(std::move(errors), skipped);
        csv.row(std::vector<std::string>{
            "true_field", "none", join_semicolon(g.hidden), std::to_string(h), "0", csv_num(s.mse),
            csv_num(s.q1), csv_num(s.median), csv_num(s.q3), std::to_string(s.rollouts),
            std::to_string(s.skipped)});
      }
    }
  }
  csv.close();
  write_file_manifest(out, {"results.csv"}, hash);

  std::cout << "eval: " << mode_name(model.mode) << " (" << ev.estimator << ") on "
            << groups.size() << " systems\n";
  for (const auto& [h, acc] : pooled)
    std::cout << "  horizon " << h << ": mse " << acc.first / static_cast<double>(acc.second)
              << " over " << acc.second << " rollouts\n";
  return 0;
}

/// Sweeps one experimental axis. basis_count retrains at each k on `data` and
/// scores on the eval corpus; example_size reuses the stored model and varies
/// only the identification budget, against a fixed evaluation remainder.
int cmd_ablate(const ExperimentConfig& cfg) {
  if (!cfg.ablate) throw ConfigError("ablate: ablate section required");
  if (!cfg.eval) throw ConfigError("ablate: eval section required (scoring protocol)");
  const AblateConfig& ab = *cfg.ablate;
  const EvalConfig& ev = *cfg.eval;
  const fs::path out = need_out(cfg, "ablate");
  const std::uint64_t hash = fnv1a64(cfg.raw);

  const fs::path eval_path = cfg.eval_data.empty() ? cfg.data : cfg.eval_data;
  const auto eval_sets = load_required_data(eval_path, "ablate");
  const auto groups = group_by_hidden(eval_sets);

  CsvWriter csv(out / "ablate.csv",
                "axis,value,estimator,horizon,ident_tuples,mse,q1,median,q3,rollouts,skipped",
                hash);

  auto score = [&](const EncoderModel& model, std::size_t ident_m, std::size_t reserve,
                   int value) {
    std::map<int, std::vector<double>> errors_by_h;
    std::map<int, std::size_t> skipped_by_h;
    for (const auto& g : groups) {
      const auto ident = pool_ident(eval_sets, g, ident_m);
      const auto slices = eval_slices(eval_sets, g, reserve);
      const auto c = identify(model, ident, ev.estimator, ev.ridge, ev.substeps);
      for (int h : ev.horizons) {
        for (const auto& slice : slices) {
          auto e = rollout_errors(model, c, slice, h, ev.substeps);
          if (e.empty()) {
            ++skipped_by_h[h];
            continue;
          }
          auto& pool = errors_by_h[h];
          pool.insert(pool.end(), e.begin(), e.end());
        }
      }
    }
    double last_mse = std::numeric_limits<double>::quiet_NaN();
    for (int h : ev.horizons) {
      const auto s = summarize_errors(std::move(errors_by_h[h]), skipped_by_h[h]);
      csv.row(std::vector<std::string>{ab.axis, std::to_string(value), ev.estimator,
                                       std::to_string(h), std::to_string(ident_m), csv_num(s.mse),
                                       csv_num(s.q1), csv_num(s.median), csv_num(s.q3),
                                       std::to_string(s.rollouts), std::to_string(s.skipped)});
      last_mse = s.mse;
    }
    return last_mse;
  };

  if (ab.axis == "basis_count") {
    if (!cfg.model) throw ConfigError("ablate: model section required for basis_count");
    if (!cfg.train) throw ConfigError("ablate: train section required for basis_count");
    const auto train_sets = load_required_data(cfg.data, "ablate");
    for (int k : ab.grid) {
      ModelArch arch = *cfg.model;
      arch.k = k;
      const EncoderModel model = train(train_sets, arch, *cfg.train);
      const double mse = score(model, ev.example_size, ev.example_size, k);
      std::cout << "ablate basis_count " << k << ": horizon " << ev.horizons.back() << " mse "
                << mse << "\n";
    }
  } else {  // example_size
    const EncoderModel model = load_required_model(cfg.model_file, "ablate");
    const int reserve = *std::max_element(ab.grid.begin(), ab.grid.end());
    for (int m : ab.grid) {
      const double mse =
          score(model, static_cast<std::size_t>(m), static_cast<std::size_t>(reserve), m);
      std::cout << "ablate example_size " << m << ": horizon " << ev.horizons.back() << " mse "
                << mse << "\n";
    }
  }
  csv.close();
  write_file_manifest(out, {"ablate.csv"}, hash);
  return 0;
}

int cmd_mpc(const ExperimentConfig& cfg) {
  if (!cfg.mpc) throw ConfigError("mpc: mpc section required");
  if (cfg.family != "quad2d")
    throw ConfigError("mpc: family must be quad2d (the planner controls the planar birotor)");
  const MpcExperiment& mx = *cfg.mpc;
  const EncoderModel model = load_required_model(cfg.model_file, "mpc");
  const fs::path out = need_out(cfg, "mpc");
  const std::uint64_t hash = fnv1a64(cfg.raw);
  const DynamicsFamily fam = make_family(cfg.family);

  std::vector<std::string> files;
  CsvWriter episodes(out / "episodes.csv",
                     "method,mass,episode,steps,aborted,final_distance,mean_distance,slew_rate,"
                     "mean_plan_cost",
                     hash);

  struct Bucket {
    std::vector<double> final_d, mean_d, slew;
    int aborted = 0;
    int episodes = 0;
  };
  std::map<std::pair<std::string, int>, Bucket> buckets;  // (method, mass index)

  auto log_episode = [&](const std::string& method, int mass_idx, double mass, int episode,
                         const EpisodeLog& log) {
    double mean_cost = std::numeric_limits<double>::quiet_NaN();
    if (!log.plan_cost.empty()) {
      double sum = 0.0;
      for (double c : log.plan_cost) sum += c;
      mean_cost = sum / static_cast<double>(log.plan_cost.size());
    }
    episodes.row(std::vector<std::string>{
        method, csv_num(mass), std::to_string(episode), std::to_string(log.steps()),
        log.aborted ? "1" : "0", csv_num(log.final_distance), csv_num(log.mean_distance),
        csv_num(log.slew_rate), csv_num(mean_cost)});
    const std::string name =
        "ep_" + method + "_m" + std::to_string(mass_idx) + "_s" + std::to_string(episode) + ".csv";
    write_episode_csv(out / name, log, hash);
    files.push_back(name);

    auto& b = buckets[{method, mass_idx}];
    ++b.episodes;
    if (log.aborted || !log.metrics_defined) {
      ++b.aborted;
    } else {
      b.final_d.push_back(log.final_distance);
      b.mean_d.push_back(log.mean_distance);
      b.slew.push_back(log.slew_rate);
    }
  };

  for (std::size_t mass_idx = 0; mass_idx < mx.masses.size(); ++mass_idx) {
    const double mass = mx.masses[mass_idx];
    const VectorField plant = quad2d_field(mass);

    // identification data comes from the true plant, as a calibration run would
    GenConfig ident = mx.ident;
    ident.fixed_hidden = {mass};
    ident.seed = derive_stream(cfg.seed, 0xA000 + mass_idx);
    const auto ident_sets = generate(fam, ident);
    TrajectoryDataset ident_pool = shell_of(ident_sets.front());
    for (const auto& ds : ident_sets) append_tuples(ident_pool, ds, 0, ds.size());
    const auto c =
        identify(model, ident_pool, mx.estimator, mx.ridge, mx.mpc.model_substeps);

    for (int ep = 0; ep < mx.episode_seeds; ++ep) {
      MpcConfig mc = mx.mpc;
      mc.seed = derive_stream(derive_stream(cfg.seed, mass_idx), static_cast<std::uint64_t>(ep));
      log_episode(mode_name(model.mode), static_cast<int>(mass_idx), mass, ep,
                  run_episode(plant, model, c, mx.x0, mx.goal, mc));
      if (mx.reference_row) {
        TrueFieldStepper truth(plant, mc.model_substeps);
        log_episode("true_field", static_cast<int>(mass_idx), mass, ep,
                    run_episode(plant, truth, mx.x0, mx.goal, mc));
      }
    }
  }
  episodes.close();
  files.insert(files.begin(), "episodes.csv");

  {
    CsvWriter summary(out / "summary.csv",
                      "method,mass,episodes,aborted,median_final_distance,median_mean_distance,"
                      "median_slew_rate",
                      hash);
    for (auto& [key, b] : buckets) {
      std::sort(b.final_d.begin(), b.final_d.end());
      std::sort(b.mean_d.begin(), b.mean_d.end());
      std::sort(b.slew.begin(), b.slew.end());
      summary.row(std::vector<std::string>{
          key.first, csv_num(mx.masses[static_cast<std::size_t>(key.second)]),
          std::to_string(b.episodes), std::to_string(b.aborted),
          csv_num(quantile_sorted(b.final_d, 0.5)), csv_num(quantile_sorted(b.mean_d, 0.5)),
          csv_num(quantile_sorted(b.slew, 0.5))});
      std::cout << "mpc " << key.first << " mass " << mx.masses[static_cast<std::size_t>(key.second)]
                << ": median final distance " << quantile_sorted(b.final_d, 0.5) << ", slew "
                << quantile_sorted(b.slew, 0.5) << " (" << b.aborted << "/" << b.episodes
                << " aborted)\n";
    }
  }
  files.push_back("summary.csv");
  write_file_manifest(out, files, hash);
  return 0;
}

int cmd_gram(const ExperimentConfig& cfg) {
  const EncoderModel model = load_required_model(cfg.model_file, "gram");
  const auto datasets = load_required_data(cfg.data, "gram");
  const fs::path out = need_out(cfg, "gram");
  const std::uint64_t hash = fnv1a64(cfg.raw);
  const int substeps = cfg.eval ? cfg.eval->substeps : 1;

  {
    CsvWriter csv(out / "gram_stats.csv", "dataset,hidden,tuples,offdiag_mean,cond,min_eig,max_eig",
                  hash);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      const auto st = gram_stats(gram_matrix(model, datasets[i], substeps), model.k);
      csv.row(std::vector<std::string>{std::to_string(i), join_semicolon(datasets[i].hidden),
                                       std::to_string(datasets[i].size()), csv_num(st.offdiag_mean),
                                       csv_num(st.cond), csv_num(st.min_eig), csv_num(st.max_eig)});
      if (i == 0)
        std::cout << "gram: dataset 0 offdiag " << st.offdiag_mean << ", cond " << st.cond << "\n";
    }
  }
  {
    std::string header = "i";
    for (int j = 0; j < model.k; ++j) header += ",c" + std::to_string(j);
    CsvWriter csv(out / "gram_matrix.csv", header, hash);
    const auto gram = gram_matrix(model, datasets[0], substeps);
    const auto k = static_cast<std::size_t>(model.k);
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<std::string> cells{std::to_string(i)};
      for (std::size_t j = 0; j < k; ++j) cells.push_back(csv_num(gram[i * k + j]));
      csv.row(cells);
    }
  }
  write_file_manifest(out, {"gram_stats.csv", "gram_matrix.csv"}, hash);
  return 0;
}

int cmd_info(const ExperimentConfig& cfg, bool echo) {
  const EncoderModel m = load_required_model(cfg.model_file, "info");
  std::size_t params = 0;
  for (const auto& net : m.basis) params += net.w.size();
  if (m.avg) params += m.avg->w.size();

  auto shape = [](const MlpSpec& spec) {
    std::string s;
    for (std::size_t i = 0; i < spec.dims.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(spec.dims[i]);
    }
    return s;
  };

  std::cout << "mode: " << mode_name(m.mode) << "\n"
            << "state_dim: " << m.state_dim << "\n"
            << "control_dim: " << m.control_dim << "\n"
            << "hidden_dim: " << m.hidden_dim << "\n"
            << "basis_count: " << m.k << "\n"
            << "volume: " << m.volume << "\n"
            << "basis_shape: " << shape(m.basis.front().spec) << "\n"
            << "average_field: " << (m.avg ? shape(m.avg->spec) : std::string("none")) << "\n"
            << "parameters: " << params << "\n"
            << "normalizer_mean: " << join_semicolon(m.norm.mean) << "\n"
            << "normalizer_std: " << join_semicolon(m.norm.stddev) << "\n"
            << "config_echo_bytes: " << m.config_echo.size() << "\n";
  if (echo && !m.config_echo.empty()) std::cout << m.config_echo;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"function-encoder toolkit: neural-ODE bases for families of dynamical systems"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed_val = 0;
  std::string out_val;
  int threads_val = 1;
  bool info_echo = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "json run description")->required();
    sub->add_option("--seed", seed_val, "override the config seed");
    sub->add_option("--out", out_val, "override the output directory");
    sub->add_option("--threads", threads_val, "override the worker thread count");
    return sub;
  };

  add_common(app.add_subcommand("gen", "simulate a system family into a dataset file"));
  add_common(app.add_subcommand("train", "fit basis fields to a dataset"));
  add_common(app.add_subcommand("eval", "identify held-out systems and score rollouts"));
  add_common(app.add_subcommand("ablate", "sweep basis count or identification budget"));
  add_common(app.add_subcommand("mpc", "fly the birotor with the model in the loop"));
  add_common(app.add_subcommand("gram", "basis correlation diagnostics on a dataset"));
  add_common(app.add_subcommand("info", "print the facts of a stored model"))
      ->add_flag("--echo", info_echo, "also print the stored training config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the parse complaint
    return rc == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    ConfigOverrides over;
    if (sub->count("--seed")) over.seed = seed_val;
    if (sub->count("--out")) over.out = out_val;
    if (sub->count("--threads")) over.threads = threads_val;
    const ExperimentConfig cfg = parse_config_file(config_path, over);

    const std::string name = sub->get_name();
    if (name == "gen") return cmd_gen(cfg);
    if (name == "train") return cmd_train(cfg);
    if (name == "eval") return cmd_eval(cfg);
    if (name == "ablate") return cmd_ablate(cfg);
    if (name == "mpc") return cmd_mpc(cfg);
    if (name == "gram") return cmd_gram(cfg);
    return cmd_info(cfg, info_echo);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {  // DivergenceError included
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
