// End-to-end checks of the command-line tool: every subcommand is driven as a
// subprocess against small configs, and outputs are inspected as files, the
// way a user would consume them.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "fenode/config.hpp"

namespace fs = std::filesystem;
using namespace fenode;

namespace {

fs::path workspace() {
  static const fs::path root = [] {
    auto p = fs::temp_directory_path() / "fenode_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

fs::path fresh_dir(const std::string& name) {
  auto p = workspace() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  REQUIRE(out.good());
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

struct RunResult {
  int code = -1;
  std::string out, err;
};

/// Runs the tool in `cwd` so the config's relative paths resolve there.
RunResult run_cli(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd \"" + cwd.string() + "\" && \"" + FENODE_CLI_BIN + "\" " + args +
                          " > cli_stdout.txt 2> cli_stderr.txt";
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = (rc == -1) ? -1 : WEXITSTATUS(rc);
  r.out = slurp(cwd / "cli_stdout.txt");
  r.err = slurp(cwd / "cli_stderr.txt");
  return r;
}

/// Data rows of a csv written by the tool (comment and header stripped).
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

/// Small constant-field pipeline config with every path inside the run dir.
std::string pipeline_config(int seed) {
  std::ostringstream ss;
  ss << R"({
  "out": "run",
  "seed": )"
     << seed << R"(,
  "family": "constant_field",
  "data": "run/data.fed",
  "model_file": "run/model.fem",
  "gram_log_every": 200,
  "generation": {
    "param_draws": 10, "trajs_per_param": 1, "steps": 50, "dt": 0.1, "substeps": 1,
    "init_lo": [-1.0, -1.0], "init_hi": [1.0, 1.0]
  },
  "model": { "mode": "fe_node", "k": 2, "hidden_layers": [16] },
  "train": { "steps": 400, "functions_per_update": 10, "batch": 16, "lr": 0.003 },
  "eval": { "horizons": [1, 5], "example_size": 15 },
  "ablate": { "axis": "example_size", "grid": [5, 30] }
})";
  return ss.str();
}

}  // namespace

TEST_CASE("shipped presets parse and match their stated scale", "[cli]") {
  const fs::path dir = FENODE_CONFIG_DIR;

  const auto constant = parse_config_file(dir / "constant_ci.json");
  REQUIRE(constant.family == "constant_field");
  REQUIRE(constant.model.has_value());
  CHECK(constant.model->k == 2);
  REQUIRE(constant.ablate.has_value());
  CHECK(constant.ablate->axis == "example_size");

  const auto vdp = parse_config_file(dir / "vdp_ci.json");
  CHECK(vdp.family == "van_der_pol");
  REQUIRE(vdp.model.has_value());
  CHECK(vdp.model->k == 11);
  CHECK(vdp.model->mode == ModelMode::FeNodeResiduals);
  CHECK(vdp.model->hidden_layers == std::vector<int>{64, 64});

  const auto quad = parse_config_file(dir / "quad2d_ci.json");
  CHECK(quad.family == "quad2d");
  REQUIRE(quad.mpc.has_value());
  CHECK(quad.mpc->masses == std::vector<double>{0.7, 1.0, 1.3});
  CHECK(quad.mpc->mpc.episode_steps == 80);
  CHECK(quad.mpc->ident.policy == "pd_waypoint");

  // full-scale presets are documentation of the real experiment shape; they
  // must at least parse and validate
  const auto vdp_full = parse_config_file(dir / "vdp_full.json");
  CHECK(vdp_full.model->k == 100);
  CHECK(vdp_full.train->steps == 50000);
  const auto quad_full = parse_config_file(dir / "quad2d_full.json");
  CHECK(quad_full.mpc->episode_seeds == 5);
}

TEST_CASE("one config drives the pipeline from data to rollout scores", "[cli]") {
  const auto cwd = fresh_dir("pipeline");
  spit(cwd / "run.json", pipeline_config(42));

  auto gen = run_cli(cwd, "gen --config run.json");
  INFO(gen.err);
  REQUIRE(gen.code == 0);
  CHECK(fs::exists(cwd / "run/data.fed"));
  CHECK(read_csv(cwd / "run/datasets.csv").size() == 10);

  auto train = run_cli(cwd, "train --config run.json");
  INFO(train.err);
  REQUIRE(train.code == 0);
  CHECK(fs::exists(cwd / "run/model.fem"));
  CHECK(read_csv(cwd / "run/loss.csv").size() == 400);
  // correlation diagnostic: init row plus one per period
  CHECK(read_csv(cwd / "run/gram.csv").size() == 3);
  CHECK(train.out.find("fe_node") != std::string::npos);

  auto eval = run_cli(cwd, "eval --config run.json");
  INFO(eval.err);
  REQUIRE(eval.code == 0);
  const auto rows = read_csv(cwd / "run/results.csv");
  // 10 systems x 2 horizons, for the model and for the true-field reference
  REQUIRE(rows.size() == 40);
  std::size_t truth_rows = 0;
  for (const auto& row : rows) {
    REQUIRE(row.size() == 11);
    const double mse = std::stod(row[5]);
    REQUIRE(std::isfinite(mse));
    if (row[0] == "true_field") {
      ++truth_rows;
      // RK4 is exact on a constant field, so the reference predictor is too
      CHECK(mse < 1e-12);
    }
  }
  CHECK(truth_rows == 20);

  auto info = run_cli(cwd, "info --config run.json --echo");
  INFO(info.err);
  REQUIRE(info.code == 0);
  CHECK(info.out.find("mode: fe_node") != std::string::npos);
  CHECK(info.out.find("basis_count: 2") != std::string::npos);
  CHECK(info.out.find("\"gram_log_every\": 200") != std::string::npos);  // stored config echo

  auto ablate = run_cli(cwd, "ablate --config run.json --out run_ablate");
  INFO(ablate.err);
  REQUIRE(ablate.code == 0);
  const auto arows = read_csv(cwd / "run_ablate/ablate.csv");
  REQUIRE(arows.size() == 4);  // 2 budgets x 2 horizons
  // a 6x larger identification budget must help on this easy family
  const double mse_small = std::stod(arows[0][5]);
  const double mse_large = std::stod(arows[2][5]);
  CHECK(mse_large < mse_small);

  auto gram = run_cli(cwd, "gram --config run.json --out run_gram");
  INFO(gram.err);
  REQUIRE(gram.code == 0);
  const auto stats = read_csv(cwd / "run_gram/gram_stats.csv");
  CHECK(stats.size() == 10);
  const auto matrix = read_csv(cwd / "run_gram/gram_matrix.csv");
  REQUIRE(matrix.size() == 2);
  REQUIRE(matrix[0].size() == 3);
  CHECK(matrix[0][2] == matrix[1][1]);  // symmetric, identically formatted
  CHECK(std::stod(matrix[0][1]) > 0.0);
  CHECK(std::stod(matrix[1][2]) > 0.0);
}

TEST_CASE("identical invocations produce byte-identical outputs", "[cli]") {
  const auto a = fresh_dir("repro_a");
  const auto b = fresh_dir("repro_b");
  for (const auto& cwd : {a, b}) {
    spit(cwd / "run.json", pipeline_config(7));
    REQUIRE(run_cli(cwd, "gen --config run.json").code == 0);
    REQUIRE(run_cli(cwd, "train --config run.json").code == 0);
  }
  CHECK(same_bytes(a / "run/data.fed", b / "run/data.fed"));
  CHECK(same_bytes(a / "run/datasets.csv", b / "run/datasets.csv"));
  CHECK(same_bytes(a / "run/model.fem", b / "run/model.fem"));
  CHECK(same_bytes(a / "run/loss.csv", b / "run/loss.csv"));
  CHECK(same_bytes(a / "run/manifest.csv", b / "run/manifest.csv"));

  // the worker count must never leak into results
  const auto c = fresh_dir("repro_threads");
  spit(c / "run.json", pipeline_config(7));
  REQUIRE(run_cli(c, "gen --config run.json --threads 4").code == 0);
  REQUIRE(run_cli(c, "train --config run.json --threads 4").code == 0);
  CHECK(same_bytes(a / "run/data.fed", c / "run/data.fed"));
  CHECK(same_bytes(a / "run/model.fem", c / "run/model.fem"));

  // a seed override must change the data it covers
  const auto d = fresh_dir("repro_seed");
  spit(d / "run.json", pipeline_config(7));
  REQUIRE(run_cli(d, "gen --config run.json --seed 8").code == 0);
  CHECK(!same_bytes(a / "run/data.fed", d / "run/data.fed"));
}

TEST_CASE("misuse maps to distinct exit codes", "[cli]") {
  const auto cwd = fresh_dir("errors");
  spit(cwd / "ok.json", pipeline_config(1));

  spit(cwd / "unknown.json", R"({"out":"x","bogus":1})");
  CHECK(run_cli(cwd, "gen --config unknown.json").code == 2);

  spit(cwd / "badtype.json", R"({"out":"x","train":{"lr":"fast"}})");
  auto r = run_cli(cwd, "train --config badtype.json");
  CHECK(r.code == 2);
  CHECK(r.err.find("train.lr") != std::string::npos);

  spit(cwd / "badjson.json", "{\"out\":");
  CHECK(run_cli(cwd, "gen --config badjson.json").code == 2);

  spit(cwd / "fractional.json", R"({"out":"x","seed":1.5})");
  CHECK(run_cli(cwd, "gen --config fractional.json").code == 2);

  spit(cwd / "nosection.json", R"({"out":"x","family":"constant_field"})");
  CHECK(run_cli(cwd, "gen --config nosection.json").code == 2);

  spit(cwd / "badfamily.json",
       R"({"out":"x","family":"pendulum","generation":{"init_lo":[0.0],"init_hi":[1.0]}})");
  CHECK(run_cli(cwd, "gen --config badfamily.json").code == 2);

  CHECK(run_cli(cwd, "gen --config missing.json").code == 4);

  spit(cwd / "nodata.json",
       R"({"out":"x","data":"nowhere.fed","model":{"k":1},"train":{"steps":1}})");
  CHECK(run_cli(cwd, "train --config nodata.json").code == 4);

  spit(cwd / "zerok.json",
       R"({"out":"x","data":"d.fed","eval":{"example_size":5},"ablate":{"axis":"basis_count","grid":[0]}})");
  CHECK(run_cli(cwd, "ablate --config zerok.json").code == 2);

  CHECK(run_cli(cwd, "--help").code == 0);
  CHECK(run_cli(cwd, "frobnicate --config ok.json").code == 2);
  CHECK(run_cli(cwd, "gen").code == 2);  // --config is required
}

TEST_CASE("the birotor flies through the cli and logs every episode", "[cli]") {
  const auto cwd = fresh_dir("mpc");
  // coarse everything: this exercises plumbing, not tracking quality
  spit(cwd / "run.json", R"({
  "out": "run",
  "seed": 5,
  "family": "quad2d",
  "data": "run/data.fed",
  "model_file": "run/model.fem",
  "generation": {
    "param_draws": 2, "trajs_per_param": 2, "steps": 60, "dt": 0.05, "substeps": 5,
    "init_lo": [-1.0, -1.0, -0.3, -0.5, -0.5, -0.5],
    "init_hi": [1.0, 1.0, 0.3, 0.5, 0.5, 0.5],
    "control_lo": [0.0, 0.0], "control_hi": [8.0, 8.0],
    "policy": "pd_waypoint", "policy_noise": 0.3
  },
  "model": { "mode": "node_baseline", "k": 1, "hidden_layers": [24] },
  "train": { "steps": 120, "functions_per_update": 2, "batch": 32, "lr": 0.003 },
  "mpc": {
    "horizon": 6, "samples": 6, "iterations": 4, "episode_steps": 10,
    "dt": 0.05, "masses": [1.0], "episode_seeds": 2,
    "x0": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0], "goal": [0.0, 1.0],
    "reference_row": false,
    "ident": {
      "param_draws": 1, "trajs_per_param": 2, "steps": 40, "dt": 0.05, "substeps": 5,
      "init_lo": [-1.0, -1.0, -0.3, -0.5, -0.5, -0.5],
      "init_hi": [1.0, 1.0, 0.3, 0.5, 0.5, 0.5],
      "control_lo": [0.0, 0.0], "control_hi": [8.0, 8.0],
      "policy": "pd_waypoint", "policy_noise": 0.3
    }
  }
})");
  REQUIRE(run_cli(cwd, "gen --config run.json --threads 2").code == 0);
  REQUIRE(run_cli(cwd, "train --config run.json --threads 2").code == 0);
  auto mpc = run_cli(cwd, "mpc --config run.json --threads 2");
  INFO(mpc.err);
  REQUIRE(mpc.code == 0);

  const auto episodes = read_csv(cwd / "run/episodes.csv");
  REQUIRE(episodes.size() == 2);
  for (const auto& row : episodes) {
    CHECK(row[0] == "node_baseline");
    CHECK(row[4] == "0");                       // not aborted
    CHECK(std::isfinite(std::stod(row[5])));    // final distance
    CHECK(std::stod(row[7]) >= 0.0);            // slew rate
  }
  const auto summary = read_csv(cwd / "run/summary.csv");
  REQUIRE(summary.size() == 1);
  CHECK(summary[0][2] == "2");
  CHECK(summary[0][3] == "0");

  const auto steps = read_csv(cwd / "run/ep_node_baseline_m0_s0.csv");
  REQUIRE(steps.size() == 10);
  REQUIRE(steps[0].size() == 11);
  CHECK(steps[0][10] == "0");  // no previous control, no slew increment

  // replanning from the same state with the same seed is deterministic
  auto again = run_cli(cwd, "mpc --config run.json --out rerun --threads 1");
  REQUIRE(again.code == 0);
  CHECK(same_bytes(cwd / "run/episodes.csv", cwd / "rerun/episodes.csv"));
  CHECK(same_bytes(cwd / "run/ep_node_baseline_m0_s1.csv", cwd / "rerun/ep_node_baseline_m0_s1.csv"));
}
