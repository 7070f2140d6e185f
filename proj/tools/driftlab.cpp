#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>

#include "driftlab/driftlab.hpp"

namespace dl = driftlab;

namespace {

int exit_code(dl::errc c) {
  switch (c) {
    case dl::errc::invalid_argument: return 2;
    case dl::errc::io_error: return 3;
    case dl::errc::format_error: return 4;
    case dl::errc::numeric_error: return 5;
    case dl::errc::fit_error: return 6;
    case dl::errc::state_error:
    case dl::errc::unsupported: return 7;
  }
  return 7;
}

struct RunArgs {
  std::string config, out, seeds;
  std::vector<std::string> overrides;
};

void add_run_flags(CLI::App* app, RunArgs& a) {
  app->add_option("--config", a.config, "TOML or JSON experiment config");
  app->add_option("--out", a.out, "output directory (defaults to the config's output key)");
  app->add_option("--seeds", a.seeds, "seed list such as 0-9 or 1,3,5");
  app->add_option("--override", a.overrides, "key=value, repeatable")->take_all();
}

dl::ExperimentConfig resolve(const RunArgs& a, const char* forced_experiment = nullptr) {
  dl::ConfigMap m;
  if (!a.config.empty()) m = dl::load_config_file(a.config);
  for (const auto& kv : a.overrides) dl::apply_override(m, kv);
  if (forced_experiment) m["experiment"] = forced_experiment;
  dl::ExperimentConfig c = dl::experiment_config_from(m);
  if (!a.seeds.empty()) c.seeds = dl::parse_seed_list(a.seeds);
  if (!a.out.empty()) c.output = a.out;
  if (c.output.empty()) c.output = "runs/" + dl::config_hash(c);
  return c;
}

void print_summary(const dl::RunLog& log, const std::string& indent = "") {
  if (!log.name.empty()) std::cout << indent << "[" << log.name << "]\n";
  for (const auto& s : log.seeds) {
    std::cout << indent << "seed " << s.seed << ": " << (s.diverged ? s.message : "ok") << ", " << s.records.size()
              << " records";
    for (const auto& [k, v] : s.finals) std::cout << ", " << k << "=" << v;
    std::cout << "\n";
  }
  for (const auto& a : log.arms) print_summary(a, indent + "  ");
}

int cmd_run(const RunArgs& a, const char* forced) {
  const dl::ExperimentConfig c = resolve(a, forced);
  const dl::RunLog log = dl::run_experiment(c);
  dl::emit_metrics(log, c.output);
  print_summary(log);
  if (log.reports.contains("theorems")) std::cout << log.reports["theorems"].dump(2) << "\n";
  std::cout << "wrote " << c.output << " (" << log.wall_seconds << " s)\n";
  return 0;
}

int cmd_verify(std::size_t n, std::uint64_t seed, const std::string& out) {
  dl::TheoremCheckOptions o;
  o.n = n;
  o.seed = seed;
  const dl::json r = dl::verify_all(o);
  for (const auto& c : r["checks"]) std::cout << c["check"].get<std::string>() << ": " << (c["pass"].get<bool>() ? "PASS" : "FAIL") << "\n";
  if (!out.empty()) dl::write_json(out, r);
  else std::cout << r.dump(2) << "\n";
  return r["pass"].get<bool>() ? 0 : 1;
}

// Points file: header s,a or s,a,group.
std::vector<dl::SparsityPoint> read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) dl::fail(dl::errc::io_error, "cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<dl::SparsityPoint> pts;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> f;
    while (std::getline(ss, cell, ',')) f.push_back(dl::detail::parse_double_field(cell, n));
    if (f.size() < 2 || f.size() > 3) dl::fail(dl::errc::format_error, "line " + std::to_string(n) + ": expected s,a[,group]");
    pts.push_back({f[0], f[1], f.size() == 3 ? static_cast<int>(f[2]) : 0});
  }
  return pts;
}

int cmd_fit(const std::string& input, bool indicator, const std::string& out) {
  const auto pts = read_points(input);
  const dl::PowerLawFit f = indicator ? dl::fit_power_law_with_indicator(pts) : dl::fit_power_law(pts);
  dl::json j{{"A", f.A},
             {"B", f.B},
             {"N", f.N},
             {"r_squared", f.r_squared},
             {"iterations", f.iterations},
             {"converged", f.converged},
             {"points", pts.size()},
             {"final_sse", f.sse_history.empty() ? 0.0 : f.sse_history.back()},
             {"damping", {{"lambda_init", 1e-3}, {"on_reject", 10.0}, {"on_accept", 0.1}, {"lambda_final", f.lambda_final}}}};
  if (indicator) j["offset"] = f.offset;
  if (!out.empty()) dl::write_json(out, j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

// Seed-mean aggregation of a metrics CSV for plotting.
int cmd_plot_data(const std::string& input, const std::string& out, const std::string& metric) {
  const auto recs = dl::read_csv(input);
  std::map<std::tuple<std::int64_t, int, std::string>, std::vector<double>> groups;
  for (const auto& r : recs) {
    const std::string m = dl::to_string(r.metric);
    if (!metric.empty() && m != metric) continue;
    groups[{r.step, r.layer, m}].push_back(r.value);
  }
  std::ofstream file;
  if (!out.empty()) {
    file.open(out, std::ios::binary | std::ios::trunc);
    if (!file) dl::fail(dl::errc::io_error, "cannot write " + out);
  }
  std::ostream& os = out.empty() ? std::cout : file;
  os << "step,layer,metric,mean,std,n\n";
  for (const auto& [key, v] : groups) {
    const double m = dl::mean(v);
    os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ',' << dl::format_value(m) << ','
       << dl::format_value(dl::population_std(v)) << ',' << v.size() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"driftlab: weight-drift experiments and checks"};
  app.require_subcommand(1);

  RunArgs run_args, relufy_args;
  auto* run = app.add_subcommand("run", "train an experiment and write metrics.csv + run.json");
  add_run_flags(run, run_args);
  auto* relufy = app.add_subcommand("relufy", "train, swap the activation, fine-tune");
  add_run_flags(relufy, relufy_args);

  std::size_t n = 10000;
  std::uint64_t seed = 0;
  std::string verify_out;
  auto* verify = app.add_subcommand("verify-theorems", "Monte Carlo checks of the gradient-sign results");
  verify->add_option("--n", n, "draws per estimate");
  verify->add_option("--seed", seed);
  verify->add_option("--out", verify_out, "report JSON path");

  std::string fit_in, fit_out;
  bool indicator = false;
  auto* fit = app.add_subcommand("fit", "fit a = A - B s^N to a CSV of s,a[,group] points");
  fit->add_option("--input", fit_in, "CSV of s,a[,group] rows")->required();
  fit->add_option("--out", fit_out, "fit JSON path");
  fit->add_flag("--indicator", indicator, "add a per-group offset");

  std::string plot_in, plot_out, plot_metric;
  auto* plot = app.add_subcommand("plot-data", "seed-averaged series from a metrics CSV");
  plot->add_option("--input", plot_in, "metrics CSV written by run")->required();
  plot->add_option("--out", plot_out, "series CSV path (stdout when omitted)");
  plot->add_option("--metric", plot_metric, "keep only this metric");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args, nullptr);
    if (*relufy) return cmd_run(relufy_args, "relufication");
    if (*verify) return cmd_verify(n, seed, verify_out);
    if (*fit) return cmd_fit(fit_in, indicator, fit_out);
    if (*plot) return cmd_plot_data(plot_in, plot_out, plot_metric);
  } catch (const dl::error& e) {
    std::cerr << "driftlab: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "driftlab: " << e.what() << "\n";
    return 7;
  }
  return 0;
}
