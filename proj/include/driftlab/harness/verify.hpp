#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <json.hpp>

#include "driftlab/network.hpp"
#include "driftlab/theory.hpp"

namespace driftlab {

struct TheoremCheckOptions {
  std::size_t n = 10000;
  std::uint64_t seed = 0;
  std::vector<std::size_t> depths{2, 3, 4, 5};
  std::vector<std::size_t> widths{8, 16, 32, 64};
  std::size_t output_dim = 4;
  // softmax / projection checks
  std::size_t ce_width = 16, ce_depth = 3, ce_classes = 5;
  std::vector<double> logit_scales{1.0, 0.3, 0.1};
  std::vector<std::size_t> projection_classes{2, 5, 10};
  std::size_t projection_width = 16, projection_depth = 3;
  std::size_t eq2_width = 32, eq2_depth = 5, eq2_batch = 8;
  double se_multiple = 3.0;
};

namespace detail {

inline NetworkConfig plain_relu(std::size_t width, std::size_t depth, std::size_t out) {
  NetworkConfig c;
  c.input_dim = width;
  c.hidden_dim = width;
  c.output_dim = out;
  c.depth = depth;
  c.activation = make_relu();
  return c;
}

inline Matrix gaussian_row(std::size_t d, RngStream rng) {
  Matrix x(1, d);
  for (double& v : x.values()) v = rng.normal();
  return x;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// JSON cannot hold infinities; large finite stand-ins keep reports parseable.
inline double json_safe(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? std::numeric_limits<double>::max() : -std::numeric_limits<double>::max();
}

}  // namespace detail

// Row means of V_eff within k SE of 0 and row Gram entries above -k SE.
inline nlohmann::json verify_theorem1(const TheoremCheckOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const RngStream root(o.seed);
  nlohmann::json cases = nlohmann::json::array();
  bool all_pass = true;
  std::size_t idx = 0;
  for (std::size_t depth : o.depths)
    for (std::size_t w : o.widths) {
      const RngStream r = root.split(0x7100 + idx++);
      const NetworkConfig cfg = detail::plain_relu(w, depth, o.output_dim);
      const Matrix x = detail::gaussian_row(w, r.split(1));
      const VeffStats st = mc_veff_stats(cfg, x, o.n, r.split(2), 0);
      double worst_mean_z = 0.0, worst_gram_z = std::numeric_limits<double>::infinity();
      bool pass = true;
      for (std::size_t i = 0; i < st.row_mean.mean.size(); ++i) {
        const double z = std::abs(st.row_mean.mean[i]) / st.row_mean.std_error[i];
        worst_mean_z = std::max(worst_mean_z, z);
        pass = pass && std::abs(st.row_mean.mean[i]) <= o.se_multiple * st.row_mean.std_error[i];
      }
      for (std::size_t i = 0; i < st.gram.mean.size(); ++i) {
        const double z = st.gram.mean[i] / st.gram.std_error[i];
        worst_gram_z = std::min(worst_gram_z, z);
        pass = pass && st.gram.mean[i] >= -o.se_multiple * st.gram.std_error[i];
      }
      all_pass = all_pass && pass;
      cases.push_back({{"depth", depth},
                       {"width", w},
                       {"n", o.n},
                       {"max_row_mean_z", worst_mean_z},
                       {"min_gram_z", detail::json_safe(worst_gram_z)},
                       {"pass", pass}});
    }
  return {{"check", "theorem1"}, {"pass", all_pass}, {"seconds", detail::seconds_since(t0)}, {"cases", cases}};
}

// Expected MSE gradient at the first stage: every active neuron more than
// k SE above zero, every inactive neuron exactly zero.
inline nlohmann::json verify_theorem2(const TheoremCheckOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const RngStream root(o.seed);
  nlohmann::json cases = nlohmann::json::array();
  bool all_pass = true;
  std::size_t idx = 0;
  for (std::size_t depth : o.depths)
    for (std::size_t w : o.widths) {
      const RngStream r = root.split(0x7200 + idx++);
      const NetworkConfig cfg = detail::plain_relu(w, depth, o.output_dim);
      const Matrix x = detail::gaussian_row(w, r.split(1));
      const Matrix y = detail::gaussian_row(o.output_dim, r.split(2));
      const ExpectedGradient eg = mc_expected_gradient(cfg, x, y, loss_kind::mse, 0, o.n, r.split(3));
      std::size_t active = 0, below = 0;
      bool zeros_exact = true;
      double min_z = std::numeric_limits<double>::infinity();
      double min_z_pre = 0.0;
      for (std::size_t i = 0; i < eg.active.size(); ++i) {
        if (!eg.active[i]) {
          zeros_exact = zeros_exact && eg.grad.mean[i] == 0.0 && eg.grad.std_error[i] == 0.0;
          continue;
        }
        ++active;
        const double z = eg.grad.mean[i] / eg.grad.std_error[i];
        if (!(eg.grad.mean[i] > o.se_multiple * eg.grad.std_error[i])) ++below;
        if (z < min_z) {
          min_z = z;
          min_z_pre = eg.pre[i];
        }
      }
      const bool pass = below == 0 && zeros_exact;
      all_pass = all_pass && pass;
      cases.push_back({{"depth", depth},
                       {"width", w},
                       {"n", o.n},
                       {"active", active},
                       {"active_below_threshold", below},
                       {"min_active_z", detail::json_safe(min_z)},
                       {"pre_activation_at_min_z", min_z_pre},
                       {"inactive_exactly_zero", zeros_exact},
                       {"pass", pass}});
    }
  return {{"check", "theorem2"}, {"pass", all_pass}, {"seconds", detail::seconds_since(t0)}, {"cases", cases}};
}

// Centering-projection ratio within k SE of (C-1)/C, and the part of the CE
// expected gradient beyond the linear softmax term shrinking with logit scale.
inline nlohmann::json verify_theorem3(const TheoremCheckOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const RngStream root(o.seed);
  nlohmann::json proj = nlohmann::json::array();
  bool proj_pass = true;
  for (std::size_t c : o.projection_classes) {
    const NetworkConfig cfg = detail::plain_relu(o.projection_width, o.projection_depth, c);
    const ProjectionIdentity pi = mc_projection_identity(cfg, o.n, root.split(0x7300 + c));
    const bool pass = std::abs(pi.ratio - pi.target) <= o.se_multiple * pi.ratio_se;
    proj_pass = proj_pass && pass;
    proj.push_back({{"classes", c},
                    {"ratio", pi.ratio},
                    {"ratio_se", pi.ratio_se},
                    {"target", pi.target},
                    {"lhs", pi.lhs.mean[0]},
                    {"rhs", pi.rhs.mean[0]},
                    {"pass", pass}});
  }

  const RngStream r = root.split(0x7400);
  const Matrix x = detail::gaussian_row(o.ce_width, r.split(1));
  Matrix y(1, o.ce_classes);
  y(0, 0) = 1.0;
  nlohmann::json scales = nlohmann::json::array();
  std::vector<double> residuals;
  for (double s : o.logit_scales) {
    NetworkConfig cfg = detail::plain_relu(o.ce_width, o.ce_depth, o.ce_classes);
    cfg.head_scale = s;
    // identical draw streams across scales, so only the scale differs
    const ExpectedGradient eg = mc_expected_gradient(cfg, x, y, loss_kind::cross_entropy, 0, o.n, r.split(2));
    const double res = ce_residual(eg);
    residuals.push_back(res);
    double worst_lin_z = 0.0;
    for (std::size_t i = 0; i < eg.active.size(); ++i) {
      if (!eg.active[i]) continue;
      const double se = eg.linear.std_error[i];
      if (se > 0) worst_lin_z = std::max(worst_lin_z, std::abs(eg.linear.mean[i] - eg.prediction.mean[i]) / se);
    }
    scales.push_back({{"logit_scale", s}, {"residual", res}, {"max_linear_term_z", worst_lin_z}});
  }
  bool shrinking = residuals.size() >= 2;
  for (std::size_t i = 1; i < residuals.size(); ++i) shrinking = shrinking && residuals[i] < residuals[i - 1];
  return {{"check", "theorem3"},
          {"pass", proj_pass && shrinking},
          {"projection_pass", proj_pass},
          {"residual_shrinks", shrinking},
          {"seconds", detail::seconds_since(t0)},
          {"projection", proj},
          {"ce", scales}};
}

inline nlohmann::json verify_eq2(const TheoremCheckOptions& o) {
  const RngStream root(o.seed);
  RngStream init = root.split(0x7500);
  const NetworkConfig cfg = detail::plain_relu(o.eq2_width, o.eq2_depth, o.output_dim);
  Network net = build_network(cfg, init);
  RngStream data = root.split(0x7501);
  Matrix x(o.eq2_batch, o.eq2_width);
  for (double& v : x.values()) v = data.normal();
  TrainingTrace t;
  forward_trace(net, x, mode::eval, &t);
  nlohmann::json layers = nlohmann::json::array();
  bool pass = true;
  for (std::size_t l = 0; l <= cfg.depth; ++l) {
    const double err = eq2_max_relative_error(net, t, l);
    pass = pass && err < 1e-10;
    layers.push_back({{"layer", l}, {"max_relative_error", err}});
  }
  return {{"check", "eq2"}, {"pass", pass}, {"layers", layers}};
}

inline nlohmann::json verify_all(const TheoremCheckOptions& o) {
  nlohmann::json checks = nlohmann::json::array({verify_eq2(o), verify_theorem1(o), verify_theorem2(o), verify_theorem3(o)});
  bool pass = true;
  for (const auto& c : checks) pass = pass && c["pass"].get<bool>();
  return {{"pass", pass}, {"se_multiple", o.se_multiple}, {"n", o.n}, {"seed", o.seed}, {"checks", checks}};
}

}  // namespace driftlab
