#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "driftlab/error.hpp"
#include "driftlab/network.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

enum class opt_kind { sgd, momentum, adam, adamw };

inline opt_kind parse_optimizer(const std::string& s) {
  if (s == "sgd") return opt_kind::sgd;
  if (s == "momentum") return opt_kind::momentum;
  if (s == "adam") return opt_kind::adam;
  if (s == "adamw") return opt_kind::adamw;
  fail(errc::invalid_argument, "unknown optimizer '" + s + "'");
}

inline std::string to_string(opt_kind k) {
  switch (k) {
    case opt_kind::sgd: return "sgd";
    case opt_kind::momentum: return "momentum";
    case opt_kind::adam: return "adam";
    case opt_kind::adamw: return "adamw";
  }
  return "sgd";
}

struct OptimizerConfig {
  opt_kind kind = opt_kind::sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double wd = 0.0;  // coupled (added to the gradient) except for adamw
};

inline void validate(const OptimizerConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) fail(errc::invalid_argument, "lr must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail(errc::invalid_argument, "momentum must lie in [0, 1)");
  if (!(c.beta1 > 0.0 && c.beta1 < 1.0) || !(c.beta2 > 0.0 && c.beta2 < 1.0))
    fail(errc::invalid_argument, "betas must lie in (0, 1)");
  if (!(c.eps > 0.0)) fail(errc::invalid_argument, "adam eps must be > 0");
  if (!(c.wd >= 0.0)) fail(errc::invalid_argument, "weight decay must be >= 0");
}

struct OptimizerState {
  OptimizerConfig cfg;
  std::vector<Matrix> m;  // momentum buffer or Adam first moment
  std::vector<Matrix> v;  // Adam second moment
  std::size_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(OptimizerConfig c) : cfg(c) { validate(cfg); }
};

inline void optimizer_step(OptimizerState& st, std::vector<Parameter>& params, const std::vector<Matrix>& grads) {
  if (grads.size() != params.size()) fail(errc::invalid_argument, "gradient count does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i].value)) fail(errc::invalid_argument, "gradient shape mismatch for " + params[i].name);
    if (!all_finite(grads[i])) fail(errc::numeric_error, "non-finite gradient for " + params[i].name);
  }
  const OptimizerConfig& c = st.cfg;
  const bool adam = c.kind == opt_kind::adam || c.kind == opt_kind::adamw;
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value.rows(), p.value.cols());
      if (adam) st.v.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.values();
    auto g = grads[i].values();
    auto m = st.m[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      double gj = g[j];
      if (c.kind != opt_kind::adamw) gj += c.wd * w[j];
      switch (c.kind) {
        case opt_kind::sgd: w[j] -= c.lr * gj; break;
        case opt_kind::momentum:
          m[j] = c.momentum * m[j] + gj;
          w[j] -= c.lr * m[j];
          break;
        case opt_kind::adam:
        case opt_kind::adamw: {
          if (c.kind == opt_kind::adamw) w[j] -= c.lr * c.wd * w[j];
          auto v = st.v[i].values();
          m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
          v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
          w[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
          break;
        }
      }
    }
  }
}

}  // namespace driftlab
