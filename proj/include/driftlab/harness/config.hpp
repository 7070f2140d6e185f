#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "driftlab/activations.hpp"
#include "driftlab/error.hpp"
#include "driftlab/network.hpp"
#include "driftlab/normalization.hpp"
#include "driftlab/optim.hpp"

namespace driftlab {

using json = nlohmann::json;

// Flat key -> value map; every config file is reduced to one of these.
using ConfigMap = std::map<std::string, json>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Strips a trailing '#' comment that is not inside a string.
inline std::string strip_comment(const std::string& line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == '\\' && quote == '"') ++i;
      else if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

// Rewrites a TOML scalar or single-line array as JSON text.
inline std::string toml_value_to_json(const std::string& v, int lineno) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const char c = v[i];
    if (c == '\'') {
      const auto end = v.find('\'', i + 1);
      if (end == std::string::npos) fail(errc::format_error, "unterminated string on line " + std::to_string(lineno));
      out += json(v.substr(i + 1, end - i - 1)).dump();
      i = end;
    } else if (c == '"') {
      std::size_t j = i + 1;
      for (; j < v.size() && v[j] != '"'; ++j)
        if (v[j] == '\\') ++j;
      if (j >= v.size()) fail(errc::format_error, "unterminated string on line " + std::to_string(lineno));
      out += v.substr(i, j - i + 1);
      i = j;
    } else if (c == '_' && i > 0 && std::isdigit(static_cast<unsigned char>(v[i - 1]))) {
      continue;
    } else if (c == '+' && (i == 0 || v[i - 1] == '[' || v[i - 1] == ',' || v[i - 1] == ' ')) {
      continue;
    } else {
      out += c;
    }
  }
  return out;
}

}  // namespace detail

// Subset of TOML: `key = value` lines with strings, numbers, booleans and
// single-line arrays. `[table]` headers only group lines; keys stay flat and
// must be unique across the whole file.
inline ConfigMap parse_toml(const std::string& text) {
  ConfigMap m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::trim(detail::strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(errc::format_error, "bad table header on line " + std::to_string(lineno));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(errc::format_error, "expected key = value on line " + std::to_string(lineno));
    std::string key = detail::trim(s.substr(0, eq));
    if (key.size() >= 2 && key.front() == '"' && key.back() == '"') key = key.substr(1, key.size() - 2);
    const std::string raw = detail::trim(s.substr(eq + 1));
    if (key.empty() || raw.empty()) fail(errc::format_error, "empty key or value on line " + std::to_string(lineno));
    json v = json::parse(detail::toml_value_to_json(raw, lineno), nullptr, false);
    if (v.is_discarded()) fail(errc::format_error, "cannot parse value of '" + key + "' on line " + std::to_string(lineno));
    if (!m.emplace(key, std::move(v)).second) fail(errc::format_error, "duplicate key '" + key + "'");
  }
  return m;
}

inline ConfigMap parse_json_config(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(errc::format_error, "config JSON must be an object");
  ConfigMap m;
  for (auto& [k, v] : j.items()) {
    if (v.is_object()) {
      for (auto& [k2, v2] : v.items())
        if (!m.emplace(k2, v2).second) fail(errc::format_error, "duplicate key '" + k2 + "'");
    } else if (!m.emplace(k, v).second) {
      fail(errc::format_error, "duplicate key '" + k + "'");
    }
  }
  return m;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(errc::io_error, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ConfigMap load_config_file(const std::filesystem::path& p) {
  const std::string text = read_file(p);
  const std::string ext = p.extension().string();
  if (ext == ".json") return parse_json_config(text);
  if (ext == ".toml") return parse_toml(text);
  const auto first = text.find_first_not_of(" \t\r\n");
  return first != std::string::npos && text[first] == '{' ? parse_json_config(text) : parse_toml(text);
}

// `key=value`; the value is read as JSON when possible and as a bare string otherwise.
inline void apply_override(ConfigMap& m, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) fail(errc::invalid_argument, "override must look like key=value: " + kv);
  const std::string key = detail::trim(kv.substr(0, eq));
  const std::string raw = detail::trim(kv.substr(eq + 1));
  json v = json::parse(raw, nullptr, false);
  m[key] = v.is_discarded() ? json(raw) : v;
}

// 0,1,2 or 0-9 or a mix such as 0-3,7.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = detail::trim(part);
    if (part.empty()) continue;
    try {
      const auto dash = part.find('-');
      if (dash != std::string::npos) {
        const auto a = std::stoull(part.substr(0, dash)), b = std::stoull(part.substr(dash + 1));
        if (b < a) fail(errc::invalid_argument, "bad seed range " + part);
        for (auto v = a; v <= b; ++v) out.push_back(v);
      } else {
        out.push_back(std::stoull(part));
      }
    } catch (const std::logic_error&) {
      fail(errc::invalid_argument, "bad seed list '" + s + "'");
    }
  }
  if (out.empty()) fail(errc::invalid_argument, "seed list is empty");
  return out;
}

enum class experiment_kind { random_mse, classification, topk_sweep, pc_sweep, theorem_check, relufication, as_benchmark };

inline experiment_kind parse_experiment(const std::string& s) {
  if (s == "random_mse") return experiment_kind::random_mse;
  if (s == "classification") return experiment_kind::classification;
  if (s == "topk_sweep") return experiment_kind::topk_sweep;
  if (s == "pc_sweep") return experiment_kind::pc_sweep;
  if (s == "theorem_check") return experiment_kind::theorem_check;
  if (s == "relufication") return experiment_kind::relufication;
  if (s == "as_benchmark") return experiment_kind::as_benchmark;
  fail(errc::invalid_argument, "unknown experiment '" + s + "'");
}

inline std::string to_string(experiment_kind k) {
  switch (k) {
    case experiment_kind::random_mse: return "random_mse";
    case experiment_kind::classification: return "classification";
    case experiment_kind::topk_sweep: return "topk_sweep";
    case experiment_kind::pc_sweep: return "pc_sweep";
    case experiment_kind::theorem_check: return "theorem_check";
    case experiment_kind::relufication: return "relufication";
    case experiment_kind::as_benchmark: return "as_benchmark";
  }
  return "random_mse";
}

enum class dataset_kind { random, synthetic_classes, cifar10 };

inline dataset_kind parse_dataset(const std::string& s) {
  if (s == "random") return dataset_kind::random;
  if (s == "synthetic_classes" || s == "synthetic") return dataset_kind::synthetic_classes;
  if (s == "cifar10") return dataset_kind::cifar10;
  fail(errc::invalid_argument, "unknown dataset '" + s + "'");
}

inline std::string to_string(dataset_kind k) {
  switch (k) {
    case dataset_kind::random: return "random";
    case dataset_kind::synthetic_classes: return "synthetic_classes";
    case dataset_kind::cifar10: return "cifar10";
  }
  return "random";
}

// Fully resolved experiment settings. Defaults are the desk-scale versions.
struct ExperimentConfig {
  experiment_kind experiment = experiment_kind::random_mse;
  std::size_t input_dim = 128, hidden_dim = 128, output_dim = 0, depth = 5;
  std::string activation = "relu";
  std::string norm = "none";
  std::string norm_position = "pre_linear";
  std::string norm_affine = "default";
  double pc_q = 0.5;
  std::string pc_grad = "stop_gradient";
  double norm_eps = 1e-5;
  bool as_enabled = false;
  std::size_t as_warm_steps = 100;
  double as_gamma = 0.9999;
  double bn_gamma = 0.9;
  bool skip = false, bias = false;
  std::string init = "kaiming";
  double head_scale = 1.0;
  double topk = 1.0;
  std::string topk_granularity = "per_row";
  std::string opt = "sgd";
  double lr = 0.01, momentum = 0.9, wd = 0.0;
  std::vector<double> betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::string loss = "default";
  std::size_t steps = 500;
  std::size_t epochs = 0;
  std::size_t batch_size = 128;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::string dataset = "random";
  std::size_t dataset_n = 6000;
  std::size_t dataset_classes = 10;
  double dataset_margin = 2.0;
  std::uint64_t dataset_seed = 0;
  std::string cifar_path;
  std::size_t subset_size = 5000;
  std::size_t test_size = 1000;
  std::size_t cadence_dense = 200, cadence_stride = 10;
  std::vector<double> topk_values{0.1, 0.75};
  std::vector<double> pc_q_values{0.25, 0.5, 0.75};
  std::size_t ft_steps = 39;
  std::string new_activation = "relu";
  std::size_t theorem_n = 10000;
  std::string output;

  loss_kind resolved_loss() const {
    if (loss != "default") return parse_loss(loss);
    const bool classify = experiment == experiment_kind::classification || experiment == experiment_kind::relufication;
    return classify ? loss_kind::cross_entropy : loss_kind::mse;
  }
  bool classification_task() const { return resolved_loss() == loss_kind::cross_entropy; }
};

namespace detail {

template <class T>
void take(const ConfigMap& m, const char* key, T& out, std::vector<std::string>& used) {
  auto it = m.find(key);
  if (it == m.end()) return;
  used.emplace_back(key);
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (it->second.is_number_float()) {
        const double d = it->second.get<double>();
        if (d < 0 || d != std::floor(d)) throw std::invalid_argument("not a count");
        out = static_cast<T>(d);
      } else {
        if (it->second.is_number_integer() && it->second.get<long long>() < 0) throw std::invalid_argument("negative");
        out = it->second.get<T>();
      }
    } else {
      out = it->second.get<T>();
    }
  } catch (const std::exception&) {
    fail(errc::invalid_argument, std::string("bad value for config key '") + key + "': " + it->second.dump());
  }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from(const ConfigMap& m) {
  ExperimentConfig c;
  std::vector<std::string> used;
  std::string exp = to_string(c.experiment);
  detail::take(m, "experiment", exp, used);
  c.experiment = parse_experiment(exp);
  detail::take(m, "input_dim", c.input_dim, used);
  detail::take(m, "hidden_dim", c.hidden_dim, used);
  detail::take(m, "output_dim", c.output_dim, used);
  detail::take(m, "depth", c.depth, used);
  detail::take(m, "activation", c.activation, used);
  detail::take(m, "norm", c.norm, used);
  detail::take(m, "norm_position", c.norm_position, used);
  detail::take(m, "norm_affine", c.norm_affine, used);
  detail::take(m, "pc_q", c.pc_q, used);
  detail::take(m, "pc_grad", c.pc_grad, used);
  detail::take(m, "norm_eps", c.norm_eps, used);
  detail::take(m, "as_enabled", c.as_enabled, used);
  detail::take(m, "as_warm_steps", c.as_warm_steps, used);
  detail::take(m, "as_gamma", c.as_gamma, used);
  detail::take(m, "bn_gamma", c.bn_gamma, used);
  detail::take(m, "skip", c.skip, used);
  detail::take(m, "bias", c.bias, used);
  detail::take(m, "init", c.init, used);
  detail::take(m, "head_scale", c.head_scale, used);
  detail::take(m, "topk", c.topk, used);
  detail::take(m, "topk_granularity", c.topk_granularity, used);
  detail::take(m, "opt", c.opt, used);
  detail::take(m, "lr", c.lr, used);
  detail::take(m, "momentum", c.momentum, used);
  detail::take(m, "wd", c.wd, used);
  detail::take(m, "betas", c.betas, used);
  detail::take(m, "adam_eps", c.adam_eps, used);
  detail::take(m, "loss", c.loss, used);
  detail::take(m, "steps", c.steps, used);
  detail::take(m, "epochs", c.epochs, used);
  detail::take(m, "batch_size", c.batch_size, used);
  if (auto it = m.find("seeds"); it != m.end()) {
    used.emplace_back("seeds");
    if (it->second.is_string()) c.seeds = parse_seed_list(it->second.get<std::string>());
    else if (it->second.is_number_unsigned()) c.seeds = {it->second.get<std::uint64_t>()};
    else detail::take(m, "seeds", c.seeds, used);
  }
  detail::take(m, "dataset", c.dataset, used);
  detail::take(m, "dataset_n", c.dataset_n, used);
  detail::take(m, "dataset_classes", c.dataset_classes, used);
  detail::take(m, "dataset_margin", c.dataset_margin, used);
  detail::take(m, "dataset_seed", c.dataset_seed, used);
  detail::take(m, "cifar_path", c.cifar_path, used);
  detail::take(m, "subset_size", c.subset_size, used);
  detail::take(m, "test_size", c.test_size, used);
  detail::take(m, "cadence_dense", c.cadence_dense, used);
  detail::take(m, "cadence_stride", c.cadence_stride, used);
  detail::take(m, "topk_values", c.topk_values, used);
  detail::take(m, "pc_q_values", c.pc_q_values, used);
  detail::take(m, "ft_steps", c.ft_steps, used);
  detail::take(m, "new_activation", c.new_activation, used);
  detail::take(m, "theorem_n", c.theorem_n, used);
  detail::take(m, "output", c.output, used);
  for (const auto& [k, v] : m)
    if (std::find(used.begin(), used.end(), k) == used.end()) fail(errc::invalid_argument, "unknown config key '" + k + "'");

  if (c.seeds.empty()) fail(errc::invalid_argument, "seeds must be non-empty");
  if (c.steps < 1 && c.epochs == 0) fail(errc::invalid_argument, "steps must be >= 1");
  if (c.batch_size < 1) fail(errc::invalid_argument, "batch_size must be >= 1");
  if (c.betas.size() != 2) fail(errc::invalid_argument, "betas must have two entries");
  if (c.cadence_stride < 1) fail(errc::invalid_argument, "cadence_stride must be >= 1");
  parse_dataset(c.dataset);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  return json{{"experiment", to_string(c.experiment)},
              {"input_dim", c.input_dim},
              {"hidden_dim", c.hidden_dim},
              {"output_dim", c.output_dim},
              {"depth", c.depth},
              {"activation", c.activation},
              {"norm", c.norm},
              {"norm_position", c.norm_position},
              {"norm_affine", c.norm_affine},
              {"pc_q", c.pc_q},
              {"pc_grad", c.pc_grad},
              {"norm_eps", c.norm_eps},
              {"as_enabled", c.as_enabled},
              {"as_warm_steps", c.as_warm_steps},
              {"as_gamma", c.as_gamma},
              {"bn_gamma", c.bn_gamma},
              {"skip", c.skip},
              {"bias", c.bias},
              {"init", c.init},
              {"head_scale", c.head_scale},
              {"topk", c.topk},
              {"topk_granularity", c.topk_granularity},
              {"opt", c.opt},
              {"lr", c.lr},
              {"momentum", c.momentum},
              {"wd", c.wd},
              {"betas", c.betas},
              {"adam_eps", c.adam_eps},
              {"loss", c.loss},
              {"steps", c.steps},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seeds", c.seeds},
              {"dataset", c.dataset},
              {"dataset_n", c.dataset_n},
              {"dataset_classes", c.dataset_classes},
              {"dataset_margin", c.dataset_margin},
              {"dataset_seed", c.dataset_seed},
              {"cifar_path", c.cifar_path},
              {"subset_size", c.subset_size},
              {"test_size", c.test_size},
              {"cadence_dense", c.cadence_dense},
              {"cadence_stride", c.cadence_stride},
              {"topk_values", c.topk_values},
              {"pc_q_values", c.pc_q_values},
              {"ft_steps", c.ft_steps},
              {"new_activation", c.new_activation},
              {"theorem_n", c.theorem_n},
              {"output", c.output}};
}

inline ExperimentConfig experiment_config_from(const json& j) {
  ConfigMap m;
  for (auto& [k, v] : j.items()) m.emplace(k, v);
  return experiment_config_from(m);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

// Network and optimizer settings derived from an experiment config.
inline NetworkConfig network_config(const ExperimentConfig& c) {
  NetworkConfig n;
  n.input_dim = c.input_dim;
  n.hidden_dim = c.hidden_dim;
  n.output_dim = c.output_dim != 0 ? c.output_dim : (c.classification_task() ? c.dataset_classes : c.input_dim);
  n.depth = c.depth;
  n.activation = parse_activation(c.activation);
  n.norm = make_norm(parse_norm(c.norm), c.norm_eps, c.pc_q);
  if (c.norm_affine == "none") n.norm.affine = norm_affine::none;
  else if (c.norm_affine == "scale") n.norm.affine = norm_affine::scale;
  else if (c.norm_affine == "scale_shift") n.norm.affine = norm_affine::scale_shift;
  else if (c.norm_affine != "default") fail(errc::invalid_argument, "unknown norm_affine '" + c.norm_affine + "'");
  if (c.pc_grad == "stop_gradient") n.norm.pc_grad = pc_gradient::stop_gradient;
  else if (c.pc_grad == "quantile_passthrough") n.norm.pc_grad = pc_gradient::quantile_passthrough;
  else fail(errc::invalid_argument, "unknown pc_grad '" + c.pc_grad + "'");
  if (c.norm_position == "pre_linear") n.norm_pos = norm_position::pre_linear;
  else if (c.norm_position == "pre_activation") n.norm_pos = norm_position::pre_activation;
  else fail(errc::invalid_argument, "unknown norm_position '" + c.norm_position + "'");
  n.skip = c.skip;
  n.bias = c.bias;
  if (c.init == "kaiming") n.init = init_scheme::kaiming;
  else if (c.init == "torch_default") n.init = init_scheme::torch_default;
  else fail(errc::invalid_argument, "unknown init '" + c.init + "'");
  n.head_scale = c.head_scale;
  if (c.topk < 1.0) {
    TopKConfig t;
    t.retention = c.topk;
    if (c.topk_granularity == "per_row") t.granularity = topk_granularity::per_row;
    else if (c.topk_granularity == "per_tensor") t.granularity = topk_granularity::per_tensor;
    else fail(errc::invalid_argument, "unknown topk_granularity '" + c.topk_granularity + "'");
    n.topk = t;
  }
  n.ema_gamma = c.as_gamma;
  n.bn_gamma = c.bn_gamma;
  n.as_warm_steps = c.as_warm_steps;
  n.as_enabled = c.as_enabled;
  validate(n);
  return n;
}

inline OptimizerConfig optimizer_config(const ExperimentConfig& c) {
  OptimizerConfig o;
  o.kind = parse_optimizer(c.opt);
  o.lr = c.lr;
  o.momentum = c.momentum;
  o.beta1 = c.betas[0];
  o.beta2 = c.betas[1];
  o.eps = c.adam_eps;
  o.wd = c.wd;
  validate(o);
  return o;
}

}  // namespace driftlab
