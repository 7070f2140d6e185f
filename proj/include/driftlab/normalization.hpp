#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "driftlab/activations.hpp"
#include "driftlab/error.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

enum class norm_variant { none, layer_norm, rms_norm, batch_norm, percentile_centering };
enum class norm_affine { none, scale, scale_shift };
// How backward treats the percentile shift of PC.
enum class pc_gradient { stop_gradient, quantile_passthrough };

struct NormKind {
  norm_variant variant = norm_variant::none;
  double eps = 1e-5;
  double q = 0.5;
  norm_affine affine = norm_affine::scale_shift;
  pc_gradient pc_grad = pc_gradient::stop_gradient;

  bool per_channel() const noexcept {
    return variant == norm_variant::batch_norm || variant == norm_variant::percentile_centering;
  }
};

inline norm_affine default_affine(norm_variant v) {
  switch (v) {
    case norm_variant::layer_norm:
    case norm_variant::batch_norm: return norm_affine::scale_shift;
    case norm_variant::rms_norm:
    case norm_variant::percentile_centering: return norm_affine::scale;
    case norm_variant::none: return norm_affine::none;
  }
  return norm_affine::none;
}

inline void validate(const NormKind& k) {
  if (!(k.eps > 0.0)) fail(errc::invalid_argument, "norm eps must be > 0");
  if (k.variant == norm_variant::percentile_centering && !(k.q > 0.0 && k.q < 1.0))
    fail(errc::invalid_argument, "pc_q must lie in (0, 1)");
}

inline NormKind make_norm(norm_variant v, double eps = 1e-5, double q = 0.5) {
  NormKind k;
  k.variant = v;
  k.eps = eps;
  k.q = q;
  k.affine = default_affine(v);
  validate(k);
  return k;
}

inline norm_variant parse_norm(const std::string& s) {
  if (s == "none") return norm_variant::none;
  if (s == "ln") return norm_variant::layer_norm;
  if (s == "rms") return norm_variant::rms_norm;
  if (s == "bn") return norm_variant::batch_norm;
  if (s == "pc") return norm_variant::percentile_centering;
  fail(errc::invalid_argument, "unknown norm '" + s + "'");
}

inline std::string to_string(norm_variant v) {
  switch (v) {
    case norm_variant::none: return "none";
    case norm_variant::layer_norm: return "ln";
    case norm_variant::rms_norm: return "rms";
    case norm_variant::batch_norm: return "bn";
    case norm_variant::percentile_centering: return "pc";
  }
  return "none";
}

// Running per-channel statistics. Buffers start at zero; `count` EMA updates
// have been folded in, and reads divide by 1 - gamma^count so that a short
// warm-up does not leave the statistics shrunk towards zero.
struct RunningStats {
  std::vector<double> shift;
  std::vector<double> var;
  double gamma = 0.9999;
  std::size_t warm_steps = 100;
  bool frozen = false;
  std::size_t count = 0;

  RunningStats() = default;
  RunningStats(std::size_t channels, double gamma_, std::size_t warm)
      : shift(channels, 0.0), var(channels, 0.0), gamma(gamma_), warm_steps(warm) {
    if (!(gamma > 0.0 && gamma < 1.0)) fail(errc::invalid_argument, "EMA gamma must lie in (0, 1)");
  }

  bool populated() const noexcept { return frozen || count > 0; }
  double debias() const noexcept { return 1.0 - std::pow(gamma, static_cast<double>(count)); }
};

inline void ema_update(std::vector<double>& buffer, std::span<const double> observed, double gamma) {
  require(buffer.size() == observed.size(), errc::invalid_argument, "ema_update: channel count mismatch");
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = gamma * buffer[i] + (1.0 - gamma) * observed[i];
}

inline RunningStats& ema_update(RunningStats& stats, std::span<const double> shift_obs, std::span<const double> var_obs) {
  if (stats.frozen) fail(errc::state_error, "ema_update after accumulation stop");
  ema_update(stats.shift, shift_obs, stats.gamma);
  ema_update(stats.var, var_obs, stats.gamma);
  ++stats.count;
  return stats;
}

inline RunningStats& accumulation_stop(RunningStats& stats, std::size_t current_step) {
  if (current_step >= stats.warm_steps) stats.frozen = true;
  return stats;
}

// Everything backward needs from one normalization call.
struct NormCache {
  Matrix xhat;
  std::vector<double> inv_std;  // per row (ln, rms) or per column (bn, pc)
  bool batch_stats = false;     // false when running statistics were used
  // percentile interpolation per column: rows of the two order statistics and the weight of the upper one
  std::vector<std::size_t> q_lo, q_hi;
  std::vector<double> q_frac;
};

namespace detail {

struct QuantileRef {
  double value;
  std::size_t lo, hi;
  double frac;
};

inline QuantileRef column_quantile(const Matrix& x, std::size_t col, double q, std::vector<std::size_t>& scratch) {
  const std::size_t n = x.rows();
  scratch.resize(n);
  std::iota(scratch.begin(), scratch.end(), std::size_t{0});
  auto less = [&](std::size_t a, std::size_t b) {
    const double va = x(a, col), vb = x(b, col);
    return va < vb || (va == vb && a < b);
  };
  const double h = q * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(lo), scratch.end(), less);
  const std::size_t r_lo = scratch[lo];
  if (frac == 0.0 || lo + 1 >= n) return {x(r_lo, col), r_lo, r_lo, 0.0};
  const std::size_t r_hi = *std::min_element(scratch.begin() + static_cast<std::ptrdiff_t>(lo) + 1, scratch.end(), less);
  return {x(r_lo, col) + frac * (x(r_hi, col) - x(r_lo, col)), r_lo, r_hi, frac};
}

}  // namespace detail

// Pre-affine normalization. In train mode BatchNorm and PC use batch statistics
// and fold them into `stats`, unless the stats are frozen, in which case the
// buffers are applied directly and no statistic is computed.
inline Matrix norm_forward(const NormKind& k, const Matrix& x, RunningStats* stats, mode m, NormCache* cache) {
  require_finite(x, "norm input");
  const std::size_t n = x.rows(), d = x.cols();
  Matrix y(n, d);
  NormCache local;
  NormCache& c = cache ? *cache : local;
  c = NormCache{};

  switch (k.variant) {
    case norm_variant::none: {
      y = x;
      break;
    }
    case norm_variant::layer_norm:
    case norm_variant::rms_norm: {
      c.inv_std.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = x.row(r);
        double mu = 0.0;
        if (k.variant == norm_variant::layer_norm) mu = mean(row);
        double ss = 0.0;
        for (double v : row) ss += (v - mu) * (v - mu);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + k.eps);
        c.inv_std[r] = inv;
        auto out = y.row(r);
        for (std::size_t j = 0; j < d; ++j) out[j] = (row[j] - mu) * inv;
      }
      c.batch_stats = true;
      break;
    }
    case norm_variant::batch_norm:
    case norm_variant::percentile_centering: {
      require(stats != nullptr, errc::invalid_argument, "per-channel norm requires running stats");
      require(stats->shift.size() == d, errc::invalid_argument, "running stats channel count mismatch");
      const bool use_batch = m == mode::train && !stats->frozen;
      std::vector<double> shift(d), inv(d);
      if (use_batch) {
        require(n >= 1, errc::invalid_argument, "empty batch");
        std::vector<double> var(d);
        std::vector<std::size_t> scratch;
        const bool pc = k.variant == norm_variant::percentile_centering;
        if (pc) {
          c.q_lo.resize(d);
          c.q_hi.resize(d);
          c.q_frac.resize(d);
        }
        for (std::size_t j = 0; j < d; ++j) {
          double mu = 0.0;
          for (std::size_t r = 0; r < n; ++r) mu += x(r, j);
          mu /= static_cast<double>(n);
          double ss = 0.0;
          for (std::size_t r = 0; r < n; ++r) ss += (x(r, j) - mu) * (x(r, j) - mu);
          var[j] = ss / static_cast<double>(n);
          if (pc) {
            const auto qr = detail::column_quantile(x, j, k.q, scratch);
            shift[j] = qr.value;
            c.q_lo[j] = qr.lo;
            c.q_hi[j] = qr.hi;
            c.q_frac[j] = qr.frac;
          } else {
            shift[j] = mu;
          }
          inv[j] = 1.0 / std::sqrt(var[j] + k.eps);
        }
        ema_update(*stats, shift, var);
        c.batch_stats = true;
      } else {
        if (!stats->populated()) fail(errc::state_error, "eval-mode normalization before any statistics were accumulated");
        // Frozen buffers are used as stored; a frozen-from-birth buffer has count 0.
        const double db = stats->count > 0 ? stats->debias() : 1.0;
        for (std::size_t j = 0; j < d; ++j) {
          shift[j] = stats->shift[j] / db;
          inv[j] = 1.0 / std::sqrt(stats->var[j] / db + k.eps);
        }
      }
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = x.row(r);
        auto out = y.row(r);
        for (std::size_t j = 0; j < d; ++j) out[j] = (row[j] - shift[j]) * inv[j];
      }
      c.inv_std = std::move(inv);
      break;
    }
  }
  c.xhat = y;
  return y;
}

inline Matrix norm_apply(const NormKind& k, const Matrix& x, RunningStats* stats, mode m) {
  return norm_forward(k, x, stats, m, nullptr);
}

// Gradient w.r.t. the norm input given the gradient w.r.t. the pre-affine output.
inline Matrix norm_backward(const NormKind& k, const NormCache& c, const Matrix& g) {
  if (k.variant == norm_variant::none) return g;
  require(c.xhat.same_shape(g), errc::invalid_argument, "norm_backward: shape mismatch");
  const std::size_t n = g.rows(), d = g.cols();
  Matrix dx(n, d);
  switch (k.variant) {
    case norm_variant::none: break;
    case norm_variant::layer_norm:
    case norm_variant::rms_norm: {
      const bool centred = k.variant == norm_variant::layer_norm;
      for (std::size_t r = 0; r < n; ++r) {
        const auto gr = g.row(r);
        const auto xr = c.xhat.row(r);
        double gm = 0.0, gx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          gm += gr[j];
          gx += gr[j] * xr[j];
        }
        gm /= static_cast<double>(d);
        gx /= static_cast<double>(d);
        if (!centred) gm = 0.0;
        auto out = dx.row(r);
        for (std::size_t j = 0; j < d; ++j) out[j] = c.inv_std[r] * (gr[j] - gm - xr[j] * gx);
      }
      break;
    }
    case norm_variant::batch_norm:
    case norm_variant::percentile_centering: {
      if (!c.batch_stats) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) dx(r, j) = g(r, j) * c.inv_std[j];
        break;
      }
      const bool pc = k.variant == norm_variant::percentile_centering;
      for (std::size_t j = 0; j < d; ++j) {
        const double inv = c.inv_std[j];
        double gsum = 0.0, gx = 0.0, xm = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          gsum += g(r, j);
          gx += g(r, j) * c.xhat(r, j);
          xm += c.xhat(r, j);
        }
        const double nn = static_cast<double>(n);
        gx /= nn;
        xm /= nn;  // mean of xhat; equals 0 for bn and (mu - Q) * inv for pc
        for (std::size_t r = 0; r < n; ++r) {
          // variance path: d var / d x_r = 2 (x_r - mu) / n, with x_r - mu = (xhat_r - xm) / inv
          double v = inv * (g(r, j) - (c.xhat(r, j) - xm) * gx);
          if (!pc) v -= inv * gsum / nn;
          dx(r, j) = v;
        }
        if (pc && k.pc_grad == pc_gradient::quantile_passthrough) {
          dx(c.q_lo[j], j) -= inv * gsum * (1.0 - c.q_frac[j]);
          if (c.q_frac[j] != 0.0) dx(c.q_hi[j], j) -= inv * gsum * c.q_frac[j];
        }
      }
      break;
    }
  }
  return dx;
}

}  // namespace driftlab
