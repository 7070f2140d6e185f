#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftlab/error.hpp"
#include "driftlab/harness/config.hpp"
#include "driftlab/harness/experiments.hpp"
#include "driftlab/instrumentation.hpp"

namespace driftlab {

inline constexpr const char* csv_header = "step,seed,layer,metric,value";

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_row(const MetricRecord& r) {
  return std::to_string(r.step) + ',' + std::to_string(r.seed) + ',' + std::to_string(r.layer) + ',' +
         to_string(r.metric) + ',' + format_value(r.value);
}

// Records are written grouped by seed, then step, layer and metric, so a
// file is identical however the seeds were scheduled.
inline void write_csv(std::ostream& out, std::vector<MetricRecord> records) {
  std::stable_sort(records.begin(), records.end());
  out << csv_header << '\n';
  for (const auto& r : records) out << csv_row(r) << '\n';
}

inline void write_csv(const std::filesystem::path& p, const std::vector<MetricRecord>& records) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(errc::io_error, "cannot write " + p.string());
  write_csv(out, records);
  out.flush();
  if (!out) fail(errc::io_error, "write failed for " + p.string());
}

// Adds one seed's rows to an existing file (header written if the file is new or empty).
inline void append_csv(const std::filesystem::path& p, std::vector<MetricRecord> records) {
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(p, ec) || std::filesystem::file_size(p, ec) == 0;
  std::ofstream out(p, std::ios::binary | std::ios::app);
  if (!out) fail(errc::io_error, "cannot append to " + p.string());
  std::stable_sort(records.begin(), records.end());
  if (fresh) out << csv_header << '\n';
  for (const auto& r : records) out << csv_row(r) << '\n';
  out.flush();
  if (!out) fail(errc::io_error, "write failed for " + p.string());
}

namespace detail {

template <class T>
T parse_int_field(const std::string& s, std::size_t line) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    fail(errc::format_error, "line " + std::to_string(line) + ": bad integer '" + s + "'");
  return v;
}

inline double parse_double_field(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(errc::format_error, "line " + std::to_string(line) + ": bad value '" + s + "'");
}

}  // namespace detail

inline std::vector<MetricRecord> parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(errc::format_error, "empty metrics file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != csv_header) fail(errc::format_error, "unexpected header '" + line + "'");
  std::vector<MetricRecord> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) fail(errc::format_error, "line " + std::to_string(n) + ": expected 5 fields");
    MetricRecord r;
    r.step = detail::parse_int_field<std::int64_t>(f[0], n);
    r.seed = detail::parse_int_field<std::uint64_t>(f[1], n);
    r.layer = detail::parse_int_field<int>(f[2], n);
    r.metric = parse_metric(f[3]);
    r.value = detail::parse_double_field(f[4], n);
    out.push_back(r);
  }
  return out;
}

inline std::vector<MetricRecord> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(errc::io_error, "cannot open " + p.string());
  return parse_csv(in);
}

inline std::vector<MetricRecord> all_records(const RunLog& log) {
  std::vector<MetricRecord> out;
  for (const auto& s : log.seeds) out.insert(out.end(), s.records.begin(), s.records.end());
  return out;
}

inline json sidecar(const RunLog& log) {
  json seeds = json::array();
  for (const auto& s : log.seeds) {
    json finals = json::object();
    for (const auto& [k, v] : s.finals) finals[k] = detail::json_safe(v);
    double total = 0.0;
    for (double t : s.step_seconds) total += t;
    seeds.push_back({{"seed", s.seed},
                     {"status", s.diverged ? "diverged" : "ok"},
                     {"message", s.message},
                     {"records", s.records.size()},
                     {"finals", finals},
                     {"train_seconds", total}});
  }
  json j{{"name", log.name},
         {"config", to_json(log.config)},
         {"config_hash", config_hash(log.config)},
         {"seeds", seeds},
         {"reports", log.reports},
         {"wall_seconds", log.wall_seconds}};
  if (!log.arms.empty()) {
    json arms = json::array();
    for (const auto& a : log.arms) arms.push_back({{"name", a.name}, {"config_hash", config_hash(a.config)}});
    j["arms"] = arms;
  }
  return j;
}

inline void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(errc::io_error, "cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out) fail(errc::io_error, "write failed for " + p.string());
}

// dir/metrics.csv + dir/run.json; sweeps write one subdirectory per arm and dir/sweep.json.
inline void emit_metrics(const RunLog& log, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(errc::io_error, "cannot create " + dir.string() + ": " + ec.message());
  if (!log.arms.empty()) {
    for (const auto& a : log.arms) emit_metrics(a, dir / a.name);
    write_json(dir / "sweep.json", sidecar(log));
    return;
  }
  write_csv(dir / "metrics.csv", all_records(log));
  write_json(dir / "run.json", sidecar(log));
}

}  // namespace driftlab
