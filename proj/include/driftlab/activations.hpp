#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "driftlab/error.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

enum class act_variant {
  relu,
  gelu,
  silu,
  relu_squared,
  gelu_squared,
  clipped_relu_squared,
  clipped_gelu_squared,
  noisy_relu,
  sugar_bsilu,
};

enum class mode { train, eval };

struct ActivationKind {
  act_variant variant = act_variant::relu;
  double threshold = 0.0;  // clip level for the clipped variants
  double alpha = 1.0;      // NoisyReLU mixing weight, or the B-SiLU shift
  double c = 1.0;          // NoisyReLU noise scale
  mode run_mode = mode::train;

  bool learnable_v() const noexcept { return variant == act_variant::noisy_relu; }
};

inline void validate(const ActivationKind& k) {
  switch (k.variant) {
    case act_variant::clipped_relu_squared:
    case act_variant::clipped_gelu_squared:
      if (!(k.threshold > 0.0)) fail(errc::invalid_argument, "clip threshold must be > 0");
      break;
    case act_variant::noisy_relu:
      if (!(k.alpha >= 0.0 && k.alpha <= 1.0)) fail(errc::invalid_argument, "noisy_relu alpha must lie in [0, 1]");
      if (!(k.c > 0.0)) fail(errc::invalid_argument, "noisy_relu c must be > 0");
      break;
    default: break;
  }
}

inline ActivationKind make_relu() { return {}; }
inline ActivationKind make_activation(act_variant v) {
  ActivationKind k;
  k.variant = v;
  if (v == act_variant::sugar_bsilu) k.alpha = 1.67;
  return k;
}
inline ActivationKind make_clipped(act_variant v, double threshold) {
  ActivationKind k;
  k.variant = v;
  k.threshold = threshold;
  validate(k);
  return k;
}

// Config names: relu, gelu, silu, relu2, gelu2, relu2_clip<t>, gelu2_clip<t>,
// noisy_relu, sugar_bsilu.
inline ActivationKind parse_activation(const std::string& name) {
  auto clip_suffix = [&](const std::string& prefix, act_variant v) -> std::optional<ActivationKind> {
    if (name.rfind(prefix, 0) != 0) return std::nullopt;
    const std::string tail = name.substr(prefix.size());
    char* end = nullptr;
    const double t = std::strtod(tail.c_str(), &end);
    if (tail.empty() || end != tail.c_str() + tail.size())
      fail(errc::invalid_argument, "bad clip threshold in activation '" + name + "'");
    return make_clipped(v, t);
  };
  if (name == "relu") return make_activation(act_variant::relu);
  if (name == "gelu") return make_activation(act_variant::gelu);
  if (name == "silu") return make_activation(act_variant::silu);
  if (name == "relu2") return make_activation(act_variant::relu_squared);
  if (name == "gelu2") return make_activation(act_variant::gelu_squared);
  if (name == "noisy_relu") return make_activation(act_variant::noisy_relu);
  if (name == "sugar_bsilu") return make_activation(act_variant::sugar_bsilu);
  if (auto k = clip_suffix("relu2_clip", act_variant::clipped_relu_squared)) return *k;
  if (auto k = clip_suffix("gelu2_clip", act_variant::clipped_gelu_squared)) return *k;
  fail(errc::invalid_argument, "unknown activation '" + name + "'");
}

inline std::string to_string(const ActivationKind& k) {
  auto num = [](double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  };
  switch (k.variant) {
    case act_variant::relu: return "relu";
    case act_variant::gelu: return "gelu";
    case act_variant::silu: return "silu";
    case act_variant::relu_squared: return "relu2";
    case act_variant::gelu_squared: return "gelu2";
    case act_variant::clipped_relu_squared: return "relu2_clip" + num(k.threshold);
    case act_variant::clipped_gelu_squared: return "gelu2_clip" + num(k.threshold);
    case act_variant::noisy_relu: return "noisy_relu";
    case act_variant::sugar_bsilu: return "sugar_bsilu";
  }
  return "unknown";
}

namespace scalar {

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }
inline double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_grad(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}
inline double silu(double x) noexcept { return x * sigmoid(x); }
inline double silu_grad(double x) noexcept {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}
inline double bsilu_surrogate(double x, double alpha) noexcept {
  const double s = sigmoid(x);
  return s + (x + alpha) * s * (1.0 - s);
}
inline double noise_scale(double x, double c, double v) noexcept {
  const double t = sigmoid(v * std::max(0.0, -x)) - 0.5;
  return c * t * t;
}

inline double forward(const ActivationKind& k, double x) noexcept {
  switch (k.variant) {
    case act_variant::relu:
    case act_variant::sugar_bsilu:
    case act_variant::noisy_relu: return relu(x);
    case act_variant::gelu: return gelu(x);
    case act_variant::silu: return silu(x);
    case act_variant::relu_squared: return relu(x) * relu(x);
    case act_variant::gelu_squared: return gelu(x) * gelu(x);
    case act_variant::clipped_relu_squared: return std::min(relu(x) * relu(x), k.threshold);
    case act_variant::clipped_gelu_squared: return std::min(gelu(x) * gelu(x), k.threshold);
  }
  return 0.0;
}

inline double derivative(const ActivationKind& k, double x) noexcept {
  switch (k.variant) {
    case act_variant::relu: return x > 0.0 ? 1.0 : 0.0;
    case act_variant::gelu: return gelu_grad(x);
    case act_variant::silu: return silu_grad(x);
    case act_variant::relu_squared: return 2.0 * relu(x);
    case act_variant::gelu_squared: return 2.0 * gelu(x) * gelu_grad(x);
    case act_variant::clipped_relu_squared: {
      const double r = relu(x);
      return r * r >= k.threshold ? 0.0 : 2.0 * r;
    }
    case act_variant::clipped_gelu_squared: {
      const double g = gelu(x);
      return g * g >= k.threshold ? 0.0 : 2.0 * g * gelu_grad(x);
    }
    case act_variant::noisy_relu:
      if (k.run_mode == mode::eval) return x > 0.0 ? 1.0 : 0.0;
      return k.alpha * (x > 0.0 ? 1.0 : 0.0) + (1.0 - k.alpha);
    case act_variant::sugar_bsilu: return bsilu_surrogate(x, k.alpha);
  }
  return 0.0;
}

}  // namespace scalar

// Result of a forward pass. `noise` holds the half-normal draws used by
// NoisyReLU in train mode (empty otherwise); backward needs them for dv.
struct ActForward {
  Matrix y;
  Matrix noise;
};

inline ActForward act_forward_cached(const ActivationKind& k, const Matrix& x, RngStream& rng, double v = 0.0) {
  require_finite(x, "activation input");
  ActForward out{Matrix(x.rows(), x.cols()), {}};
  auto xs = x.values();
  auto ys = out.y.values();
  if (k.variant == act_variant::noisy_relu && k.run_mode == mode::train) {
    out.noise = Matrix(x.rows(), x.cols());
    auto ns = out.noise.values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double xi = xs[i];
      double y = k.alpha * scalar::relu(xi) + (1.0 - k.alpha) * xi;
      if (xi < 0.0) {
        ns[i] = std::abs(rng.normal());
        y += scalar::noise_scale(xi, k.c, v) * ns[i];
      }
      ys[i] = y;
    }
    return out;
  }
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = scalar::forward(k, xs[i]);
  return out;
}

inline Matrix act_forward(const ActivationKind& k, const Matrix& x, RngStream& rng, double v = 0.0) {
  return act_forward_cached(k, x, rng, v).y;
}

inline Matrix act_backward(const ActivationKind& k, const Matrix& x, const Matrix& upstream) {
  if (!x.same_shape(upstream)) fail(errc::invalid_argument, "act_backward: shape mismatch");
  Matrix g(x.rows(), x.cols());
  auto xs = x.values();
  auto us = upstream.values();
  auto gs = g.values();
  for (std::size_t i = 0; i < xs.size(); ++i) gs[i] = us[i] * scalar::derivative(k, xs[i]);
  return g;
}

// d(sum of upstream * y)/dv for NoisyReLU, using the noise drawn in forward.
inline double noisy_v_grad(const ActivationKind& k, const Matrix& x, const Matrix& noise, const Matrix& upstream,
                           double v) {
  if (k.variant != act_variant::noisy_relu || k.run_mode == mode::eval || noise.empty()) return 0.0;
  if (!x.same_shape(upstream) || !x.same_shape(noise)) fail(errc::invalid_argument, "noisy_v_grad: shape mismatch");
  double total = 0.0;
  auto xs = x.values();
  auto ns = noise.values();
  auto us = upstream.values();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] < 0.0)) continue;
    const double m = -xs[i];
    const double s = scalar::sigmoid(v * m);
    total += us[i] * ns[i] * k.c * 2.0 * (s - 0.5) * s * (1.0 - s) * m;
  }
  return total;
}

enum class topk_granularity { per_row, per_tensor };

struct TopKConfig {
  double retention = 1.0;
  topk_granularity granularity = topk_granularity::per_row;
};

inline std::size_t topk_count(double retention, std::size_t n) {
  if (!(retention > 0.0 && retention <= 1.0)) fail(errc::invalid_argument, "top-k retention must lie in (0, 1]");
  // The small offset keeps products such as 0.7 * 10 = 7.000000000000001 from rounding up.
  const double raw = retention * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(k, 1, n);
}

namespace detail {

inline void topk_mark(std::span<const double> vals, std::size_t keep, std::span<double> mask) {
  std::vector<std::size_t> idx(vals.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto larger = [&](std::size_t a, std::size_t b) {
    const double fa = std::abs(vals[a]), fb = std::abs(vals[b]);
    return fa > fb || (fa == fb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(), larger);
  for (std::size_t i = 0; i < keep; ++i) mask[idx[i]] = 1.0;
}

}  // namespace detail

inline std::pair<Matrix, Matrix> topk_apply(const Matrix& y, const TopKConfig& cfg) {
  Matrix mask(y.rows(), y.cols());
  if (y.empty()) return {y, mask};
  if (cfg.granularity == topk_granularity::per_row) {
    const std::size_t keep = topk_count(cfg.retention, y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) detail::topk_mark(y.row(r), keep, mask.row(r));
  } else {
    detail::topk_mark(y.values(), topk_count(cfg.retention, y.size()), mask.values());
  }
  Matrix out = y;
  auto os = out.values();
  auto ms = mask.values();
  for (std::size_t i = 0; i < os.size(); ++i)
    if (ms[i] == 0.0) os[i] = 0.0;
  return {std::move(out), std::move(mask)};
}

}  // namespace driftlab
