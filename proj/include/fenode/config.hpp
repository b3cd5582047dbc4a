#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fenode/error.hpp"
#include "fenode/mpc.hpp"
#include "fenode/systems.hpp"
#include "fenode/train.hpp"

namespace fenode {

// Declarative run description: one JSON file drives every command. Parsing is
// strict; an unknown or mistyped key fails before any work starts.

namespace detail {

using json = nlohmann::json;

/// Strict object walker: every key must be consumed, types are checked, and
/// error messages carry the full path (e.g. "train.lr: expected a number").
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
    return v.get<double>();
  }

  /// A number or null; null and absence both mean "use the family default".
  double number_or_nan(const std::string& key) {
    if (!has(key)) return std::numeric_limits<double>::quiet_NaN();
    const auto& v = take(key);
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    if (!v.is_number()) throw ConfigError(at(key) + ": expected a number or null");
    return v.get<double>();
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
    return v.get<std::int64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_boolean()) throw ConfigError(at(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string str(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
    return v.get<std::string>();
  }

  std::string str_required(const std::string& key) {
    if (!has(key)) throw ConfigError(at(key) + ": required");
    return str(key, "");
  }

  std::vector<double> vec_double(const std::string& key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_array()) throw ConfigError(at(key) + ": expected an array of numbers");
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(at(key) + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<int> vec_int(const std::string& key, std::vector<int> fallback) {
    if (!has(key)) return fallback;
    const auto& v = take(key);
    if (!v.is_array()) throw ConfigError(at(key) + ": expected an array of integers");
    std::vector<int> out;
    out.reserve(v.size());
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError(at(key) + ": expected an array of integers");
      out.push_back(e.get<int>());
    }
    return out;
  }

  std::optional<ObjectReader> section(const std::string& key) {
    if (!has(key)) return std::nullopt;
    const auto& v = take(key);
    return ObjectReader(v, at(key));
  }

  /// Call after reading everything this section supports.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(at(key) + ": unknown key");
  }

 private:
  std::string at(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& take(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct EvalConfig {
  std::vector<int> horizons{1, 5, 10, 20};
  std::string estimator = "least_squares";  // or "inner_product"
  double ridge = 1e-6;
  std::size_t example_size = 500;  // tuples used to identify each system
  int substeps = 1;
  bool reference_row = true;  // include the true-field predictor

  void validate() const {
    if (horizons.empty()) throw ConfigError("eval: horizons must be non-empty");
    for (int h : horizons)
      if (h < 1) throw ConfigError("eval: horizons must be >= 1");
    if (estimator != "least_squares" && estimator != "inner_product")
      throw ConfigError("eval: estimator must be least_squares or inner_product");
    if (ridge < 0.0) throw ConfigError("eval: ridge must be >= 0");
    if (example_size < 1) throw ConfigError("eval: example_size must be >= 1");
    if (substeps < 1) throw ConfigError("eval: substeps must be >= 1");
  }
};

struct AblateConfig {
  std::string axis;  // "basis_count" | "example_size"
  std::vector<int> grid;

  void validate() const {
    if (axis != "basis_count" && axis != "example_size")
      throw ConfigError("ablate: axis must be basis_count or example_size");
    if (grid.empty()) throw ConfigError("ablate: grid must be non-empty");
    for (int v : grid)
      if (v < 1) throw ConfigError("ablate: grid values must be >= 1");
  }
};

struct MpcExperiment {
  MpcConfig mpc;
  std::vector<double> masses{1.0};
  int episode_seeds = 1;
  std::vector<double> x0 = std::vector<double>(6, 0.0);
  std::vector<double> goal{0.0, 1.0};
  bool reference_row = true;
  std::string estimator = "least_squares";
  double ridge = 1e-6;
  GenConfig ident;  // identification data drawn from each true plant

  void validate() const {
    mpc.validate();
    if (masses.empty()) throw ConfigError("mpc: masses must be non-empty");
    for (double m : masses)
      if (!(m > 0.0)) throw ConfigError("mpc: masses must be positive");
    if (episode_seeds < 1) throw ConfigError("mpc: episode_seeds must be >= 1");
    if (x0.size() != 6) throw ConfigError("mpc: x0 must have 6 entries");
    if (goal.size() != 2 && goal.size() != 6)
      throw ConfigError("mpc: goal must be a position or a full state");
    if (estimator != "least_squares" && estimator != "inner_product")
      throw ConfigError("mpc: estimator must be least_squares or inner_product");
    if (ridge < 0.0) throw ConfigError("mpc: ridge must be >= 0");
  }
};

struct ExperimentConfig {
  std::filesystem::path out;
  std::uint64_t seed = 0;
  int threads = 1;

  std::string family;            // generating system family
  std::filesystem::path data;    // dataset file consumed by train/eval/ablate/gram
  std::filesystem::path eval_data;   // held-out datasets; eval/ablate fall back to data
  std::filesystem::path model_file;  // model consumed by eval/ablate/mpc/gram/info

  std::optional<GenConfig> generation;
  std::optional<ModelArch> model;
  std::optional<TrainConfig> train;
  int gram_log_every = 0;  // training diagnostic period, 0 = off
  std::optional<EvalConfig> eval;
  std::optional<AblateConfig> ablate;
  std::optional<MpcExperiment> mpc;

  std::string raw;  // the config file's exact text, for echo and hashing
};

namespace detail {

inline GenConfig parse_generation(ObjectReader& r, std::uint64_t default_seed) {
  GenConfig g;
  g.param_draws = static_cast<int>(r.integer("param_draws", g.param_draws));
  g.trajs_per_param = static_cast<int>(r.integer("trajs_per_param", g.trajs_per_param));
  g.steps = static_cast<int>(r.integer("steps", g.steps));
  g.dt = r.number("dt", g.dt);
  g.dt_jitter = r.number("dt_jitter", g.dt_jitter);
  g.substeps = static_cast<int>(r.integer("substeps", g.substeps));
  g.init_lo = r.vec_double("init_lo", g.init_lo);
  g.init_hi = r.vec_double("init_hi", g.init_hi);
  g.control_lo = r.vec_double("control_lo", g.control_lo);
  g.control_hi = r.vec_double("control_hi", g.control_hi);
  g.policy = r.str("policy", g.policy);
  g.waypoint_every = static_cast<int>(r.integer("waypoint_every", g.waypoint_every));
  g.policy_noise = r.number("policy_noise", g.policy_noise);
  g.param_lo = r.number_or_nan("param_lo");
  g.param_hi = r.number_or_nan("param_hi");
  g.fixed_hidden = r.vec_double("fixed_hidden", g.fixed_hidden);
  g.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(default_seed)));
  r.finish();
  return g;
}

inline ModelArch parse_model(ObjectReader& r) {
  ModelArch a;
  a.mode = mode_from_name(r.str("mode", mode_name(a.mode)));
  a.k = static_cast<int>(r.integer("k", a.k));
  a.hidden_layers = r.vec_int("hidden_layers", a.hidden_layers);
  a.freeze_avg = r.boolean("freeze_avg", a.freeze_avg);
  r.finish();
  return a;
}

inline TrainConfig parse_train(ObjectReader& r, std::uint64_t default_seed, int threads) {
  TrainConfig t;
  t.steps = static_cast<int>(r.integer("steps", t.steps));
  t.functions_per_update =
      static_cast<int>(r.integer("functions_per_update", t.functions_per_update));
  t.batch = static_cast<int>(r.integer("batch", t.batch));
  t.lr = r.number("lr", t.lr);
  t.clip_norm = r.number("clip_norm", t.clip_norm);
  t.volume = r.number("volume", t.volume);
  t.substeps = static_cast<int>(r.integer("substeps", t.substeps));
  t.split_examples = r.boolean("split_examples", t.split_examples);
  t.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(default_seed)));
  t.threads = threads;
  r.finish();
  return t;
}

inline EvalConfig parse_eval(ObjectReader& r) {
  EvalConfig e;
  e.horizons = r.vec_int("horizons", e.horizons);
  e.estimator = r.str("estimator", e.estimator);
  e.ridge = r.number("ridge", e.ridge);
  e.example_size = static_cast<std::size_t>(
      r.integer("example_size", static_cast<std::int64_t>(e.example_size)));
  e.substeps = static_cast<int>(r.integer("substeps", e.substeps));
  e.reference_row = r.boolean("reference_row", e.reference_row);
  r.finish();
  e.validate();
  return e;
}

inline AblateConfig parse_ablate(ObjectReader& r) {
  AblateConfig a;
  a.axis = r.str_required("axis");
  a.grid = r.vec_int("grid", {});
  r.finish();
  a.validate();
  return a;
}

inline MpcExperiment parse_mpc(ObjectReader& r, std::uint64_t default_seed) {
  MpcExperiment e;
  e.mpc.horizon = static_cast<int>(r.integer("horizon", e.mpc.horizon));
  e.mpc.samples = static_cast<int>(r.integer("samples", e.mpc.samples));
  e.mpc.iterations = static_cast<int>(r.integer("iterations", e.mpc.iterations));
  e.mpc.episode_steps = static_cast<int>(r.integer("episode_steps", e.mpc.episode_steps));
  e.mpc.warm_start = r.boolean("warm_start", e.mpc.warm_start);
  e.mpc.dt = r.number("dt", e.mpc.dt);
  e.mpc.control_lo = r.number("control_lo", e.mpc.control_lo);
  e.mpc.control_hi = r.number("control_hi", e.mpc.control_hi);
  e.mpc.hover_thrust = r.number("hover_thrust", e.mpc.hover_thrust);
  e.mpc.sample_std_frac = r.number("sample_std_frac", e.mpc.sample_std_frac);
  e.mpc.refine_step = r.number("refine_step", e.mpc.refine_step);
  if (auto w = r.section("weights")) {
    e.mpc.weights.goal = w->number("goal", e.mpc.weights.goal);
    e.mpc.weights.attitude = w->number("attitude", e.mpc.weights.attitude);
    e.mpc.weights.velocity = w->number("velocity", e.mpc.weights.velocity);
    e.mpc.weights.thrust_diff = w->number("thrust_diff", e.mpc.weights.thrust_diff);
    w->finish();
  }
  e.mpc.model_substeps = static_cast<int>(r.integer("model_substeps", e.mpc.model_substeps));
  e.mpc.true_substeps = static_cast<int>(r.integer("true_substeps", e.mpc.true_substeps));
  e.mpc.seed = default_seed;

  e.masses = r.vec_double("masses", e.masses);
  e.episode_seeds = static_cast<int>(r.integer("episode_seeds", e.episode_seeds));
  e.x0 = r.vec_double("x0", e.x0);
  e.goal = r.vec_double("goal", e.goal);
  e.reference_row = r.boolean("reference_row", e.reference_row);
  e.estimator = r.str("estimator", e.estimator);
  e.ridge = r.number("ridge", e.ridge);
  if (auto ident = r.section("ident"))
    e.ident = parse_generation(*ident, default_seed);
  else
    throw ConfigError("mpc.ident: required (identification data for the planner's model)");
  r.finish();
  e.validate();
  return e;
}

}  // namespace detail

/// Command-line overrides; applied before section defaults are captured, so a
/// --seed override flows into generation.seed, train.seed and mpc seeding.
struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

inline ExperimentConfig parse_config_text(const std::string& text,
                                          const ConfigOverrides& over = {}) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid json: ") + e.what());
  }

  detail::ObjectReader r(j, "");
  ExperimentConfig cfg;
  cfg.raw = text;
  const std::string file_out = r.str("out", "");
  cfg.out = over.out ? std::filesystem::path(*over.out) : std::filesystem::path(file_out);
  cfg.seed = static_cast<std::uint64_t>(r.integer("seed", 0));
  if (over.seed) cfg.seed = *over.seed;
  cfg.threads = static_cast<int>(r.integer("threads", 1));
  if (over.threads) cfg.threads = *over.threads;
  if (cfg.threads < 1) throw ConfigError("threads: must be >= 1");
  cfg.family = r.str("family", "");
  cfg.data = r.str("data", "");
  cfg.eval_data = r.str("eval_data", "");
  cfg.model_file = r.str("model_file", "");
  cfg.gram_log_every = static_cast<int>(r.integer("gram_log_every", 0));

  if (auto s = r.section("generation")) cfg.generation = detail::parse_generation(*s, cfg.seed);
  if (auto s = r.section("model")) cfg.model = detail::parse_model(*s);
  if (auto s = r.section("train")) cfg.train = detail::parse_train(*s, cfg.seed, cfg.threads);
  if (auto s = r.section("eval")) cfg.eval = detail::parse_eval(*s);
  if (auto s = r.section("ablate")) cfg.ablate = detail::parse_ablate(*s);
  if (auto s = r.section("mpc")) cfg.mpc = detail::parse_mpc(*s, cfg.seed);
  r.finish();

  if (cfg.generation) cfg.generation->threads = cfg.threads;
  if (cfg.mpc) {
    cfg.mpc->mpc.threads = cfg.threads;
    cfg.mpc->ident.threads = cfg.threads;
  }
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::filesystem::path& path,
                                          const ConfigOverrides& over = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, over);
}

}  // namespace fenode
