#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "fenode/binio.hpp"
#include "fenode/dataset.hpp"
#include "fenode/encoder.hpp"
#include "fenode/error.hpp"
#include "fenode/mpc.hpp"
#include "fenode/nn.hpp"

namespace fenode {

// Versioned little-endian artifacts. Round trips are bit-exact: weights and
// normalizer statistics are stored as raw IEEE doubles, so save -> load ->
// save reproduces the file byte for byte.

inline constexpr char kModelMagic[9] = "FENMODEL";
inline constexpr std::uint32_t kModelVersion = 1;
inline constexpr char kDataMagic[9] = "FENDATA\0";
inline constexpr std::uint32_t kDataVersion = 1;

namespace detail {

inline void write_net(BinWriter& w, const MlpParams& p) {
  w.i32(static_cast<std::int32_t>(p.spec.dims.size()));
  for (int d : p.spec.dims) w.i32(d);
  w.u64(p.w.size());
  w.f64_span(p.w);
}

inline MlpParams read_net(BinReader& r) {
  const auto n_dims = r.i32();
  if (n_dims < 2 || n_dims > 64) throw IoError("corrupt model file: implausible layer count");
  MlpSpec spec;
  spec.dims.resize(static_cast<std::size_t>(n_dims));
  for (auto& d : spec.dims) d = r.i32();
  MlpParams p{spec, std::vector<double>(r.u64())};
  if (p.w.size() != static_cast<std::size_t>(param_count(spec)))
    throw IoError("corrupt model file: weight count does not match the layer sizes");
  r.f64_span(p.w);
  return p;
}

inline void check_magic(BinReader& r, const char* magic, const char* what) {
  if (r.bytes(8) != std::string(magic, 8))
    throw IoError(std::string("corrupt file: not a ") + what + " file");
}

inline void check_version(std::uint32_t got, std::uint32_t want, const char* what) {
  if (got != want)
    throw IoError(std::string(what) + " file version " + std::to_string(got) +
                  " unsupported; this build reads version " + std::to_string(want));
}

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const EncoderModel& m) {
  m.validate();
  BinWriter w;
  w.bytes(std::string(kModelMagic, 8));
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(m.mode));
  w.i32(m.state_dim);
  w.i32(m.control_dim);
  w.i32(m.hidden_dim);
  w.i32(m.k);
  w.f64(m.volume);
  w.i32(m.norm.dim());
  w.f64_span(m.norm.mean);
  w.f64_span(m.norm.stddev);
  w.u8(m.avg.has_value() ? 1 : 0);
  if (m.avg) detail::write_net(w, *m.avg);
  for (const auto& net : m.basis) detail::write_net(w, net);
  w.u64(m.config_echo.size());
  w.bytes(m.config_echo);
  w.write_file(path);
}

inline EncoderModel load_model(const std::filesystem::path& path) {
  auto r = BinReader::from_file(path);
  detail::check_magic(r, kModelMagic, "model");
  detail::check_version(r.u32(), kModelVersion, "model");

  EncoderModel m;
  m.mode = mode_from_value(r.u32());
  m.state_dim = r.i32();
  m.control_dim = r.i32();
  m.hidden_dim = r.i32();
  m.k = r.i32();
  m.volume = r.f64();
  const auto norm_dim = r.i32();
  if (norm_dim < 1 || norm_dim > 1 << 20)
    throw IoError("corrupt model file: implausible normalizer size");
  m.norm.mean.resize(static_cast<std::size_t>(norm_dim));
  m.norm.stddev.resize(static_cast<std::size_t>(norm_dim));
  r.f64_span(m.norm.mean);
  r.f64_span(m.norm.stddev);
  if (r.u8()) m.avg = detail::read_net(r);
  if (m.k < 1 || m.k > 1 << 20) throw IoError("corrupt model file: implausible basis count");
  m.basis.reserve(static_cast<std::size_t>(m.k));
  for (int i = 0; i < m.k; ++i) m.basis.push_back(detail::read_net(r));
  m.config_echo = r.bytes(r.u64());
  if (!r.at_end()) throw IoError("corrupt model file: trailing bytes: " + path.string());
  m.validate();
  return m;
}

inline void save_datasets(const std::filesystem::path& path,
                          std::span<const TrajectoryDataset> datasets) {
  BinWriter w;
  w.bytes(std::string(kDataMagic, 8));
  w.u32(kDataVersion);
  w.u64(datasets.size());
  for (const auto& ds : datasets) {
    ds.validate();
    w.u64(ds.family.size());
    w.bytes(ds.family);
    w.i32(ds.state_dim);
    w.i32(ds.control_dim);
    w.u64(ds.hidden.size());
    w.f64_span(ds.hidden);
    w.u64(ds.size());
    w.f64_span(ds.x);
    w.f64_span(ds.u);
    w.f64_span(ds.x_next);
    w.f64_span(ds.dt);
  }
  w.write_file(path);
}

inline std::vector<TrajectoryDataset> load_datasets(const std::filesystem::path& path) {
  auto r = BinReader::from_file(path);
  detail::check_magic(r, kDataMagic, "dataset");
  detail::check_version(r.u32(), kDataVersion, "dataset");

  const auto count = r.u64();
  if (count > 1u << 24) throw IoError("corrupt dataset file: implausible dataset count");
  std::vector<TrajectoryDataset> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TrajectoryDataset ds;
    const auto name_len = r.u64();
    if (name_len > 4096) throw IoError("corrupt dataset file: implausible name length");
    ds.family = r.bytes(name_len);
    ds.state_dim = r.i32();
    ds.control_dim = r.i32();
    if (ds.state_dim < 1 || ds.state_dim > 1 << 16 || ds.control_dim < 0 ||
        ds.control_dim > 1 << 16)
      throw IoError("corrupt dataset file: implausible dimensions");
    ds.hidden.resize(r.u64());
    r.f64_span(ds.hidden);
    const auto m = r.u64();
    const auto need =
        m * static_cast<std::uint64_t>(2 * ds.state_dim + ds.control_dim + 1) * sizeof(double);
    if (need > r.remaining()) throw IoError("corrupt or truncated file: " + path.string());
    ds.x.resize(m * static_cast<std::size_t>(ds.state_dim));
    ds.u.resize(m * static_cast<std::size_t>(ds.control_dim));
    ds.x_next.resize(m * static_cast<std::size_t>(ds.state_dim));
    ds.dt.resize(m);
    r.f64_span(ds.x);
    r.f64_span(ds.u);
    r.f64_span(ds.x_next);
    r.f64_span(ds.dt);
    ds.validate();
    out.push_back(std::move(ds));
  }
  if (!r.at_end()) throw IoError("corrupt dataset file: trailing bytes: " + path.string());
  return out;
}

// --- CSV emission ---------------------------------------------------------------

/// Shortest decimal that round-trips a double.
inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with a provenance comment and a header row. Cells are caller-formatted;
/// csv_num keeps doubles exact.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& header,
            std::uint64_t config_hash)
      : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path.string());
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx",
                  static_cast<unsigned long long>(config_hash));
    out_ << "# config_hash=" << hash << "\n" << header << "\n";
  }

  void row(std::span<const std::string> cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  void close() {
    out_.close();
    if (!out_) throw IoError("short write on csv");
  }

 private:
  std::ofstream out_;
};

/// Per-step episode dump: state, applied control, predicted plan cost, and
/// the control change that feeds the slew metric.
inline void write_episode_csv(const std::filesystem::path& path, const EpisodeLog& log,
                              std::uint64_t config_hash) {
  CsvWriter csv(path, "step,px,pz,theta,vx,vz,omega,T1,T2,plan_cost,slew_increment",
                config_hash);
  const auto n = static_cast<std::size_t>(log.state_dim);
  const auto c = static_cast<std::size_t>(log.control_dim);
  std::vector<std::string> cells;
  for (std::size_t t = 0; t < log.steps(); ++t) {
    cells.clear();
    cells.push_back(std::to_string(t));
    const double* s = log.states.data() + (t + 1) * n;  // state reached by step t
    for (std::size_t d = 0; d < n; ++d) cells.push_back(csv_num(s[d]));
    const double* u = log.controls.data() + t * c;
    for (std::size_t d = 0; d < c; ++d) cells.push_back(csv_num(u[d]));
    cells.push_back(csv_num(log.plan_cost[t]));
    double slew = 0.0;
    if (t > 0) {
      const double* prev = log.controls.data() + (t - 1) * c;
      for (std::size_t d = 0; d < c; ++d) slew += (u[d] - prev[d]) * (u[d] - prev[d]);
      slew = std::sqrt(slew);
    }
    cells.push_back(csv_num(slew));
    csv.row(cells);
  }
  csv.close();
}

}  // namespace fenode
