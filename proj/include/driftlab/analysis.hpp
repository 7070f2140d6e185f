#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "driftlab/error.hpp"

namespace driftlab {

struct SparsityPoint {
  double s = 0.0;  // post-activation sparsity
  double a = 0.0;  // scaled performance
  int group = 0;   // indicator for the offset model, ignored by the plain fit
};

struct PowerLawFit {
  double A = 0.0, B = 0.0, N = 0.0;
  double offset = 0.0;  // only for fit_power_law_with_indicator
  double r_squared = 0.0;
  std::vector<double> residuals;
  std::vector<double> sse_history;  // residual sum of squares after each accepted step
  int iterations = 0;
  bool converged = false;
  double lambda_final = 0.0;

  double predict(double s, int group = 0) const { return A + offset * group - B * std::pow(s, N); }
};

inline double r_squared(const std::vector<double>& observed, const std::vector<double>& predicted) {
  if (observed.size() != predicted.size() || observed.size() < 2)
    fail(errc::invalid_argument, "r_squared needs two equal-length lists of at least 2 values");
  double mu = 0.0;
  for (double v : observed) mu += v;
  mu /= static_cast<double>(observed.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    ss_tot += (observed[i] - mu) * (observed[i] - mu);
    ss_res += (observed[i] - predicted[i]) * (observed[i] - predicted[i]);
  }
  if (ss_tot == 0.0) {
    if (ss_res == 0.0) return 1.0;
    fail(errc::fit_error, "zero total variance with nonzero residual");
  }
  return 1.0 - ss_res / ss_tot;
}

namespace detail {

// Solves the k x k system a x = b by Gaussian elimination with partial pivoting.
inline bool solve_dense(std::vector<double> a, std::vector<double> b, std::size_t k, std::vector<double>& x) {
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < k; ++r)
      if (std::abs(a[r * k + c]) > std::abs(a[piv * k + c])) piv = r;
    if (!(std::abs(a[piv * k + c]) > 1e-300)) return false;
    if (piv != c) {
      for (std::size_t j = 0; j < k; ++j) std::swap(a[c * k + j], a[piv * k + j]);
      std::swap(b[c], b[piv]);
    }
    for (std::size_t r = c + 1; r < k; ++r) {
      const double f = a[r * k + c] / a[c * k + c];
      for (std::size_t j = c; j < k; ++j) a[r * k + j] -= f * a[c * k + j];
      b[r] -= f * b[c];
    }
  }
  x.assign(k, 0.0);
  for (std::size_t c = k; c-- > 0;) {
    double s = b[c];
    for (std::size_t j = c + 1; j < k; ++j) s -= a[c * k + j] * x[j];
    x[c] = s / a[c * k + c];
  }
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline double sse_of(const std::vector<double>& r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return s;
}

// theta = (A, B, N[, offset]). Residual r_i = a_i - model_i.
inline PowerLawFit levenberg_marquardt(const std::vector<SparsityPoint>& pts, std::vector<double> theta, bool with_offset) {
  const std::size_t k = theta.size(), m = pts.size();
  auto residuals = [&](const std::vector<double>& th) {
    std::vector<double> r(m);
    for (std::size_t i = 0; i < m; ++i) {
      double pred = th[0] - th[1] * std::pow(pts[i].s, th[2]);
      if (with_offset) pred += th[3] * pts[i].group;
      r[i] = pts[i].a - pred;
    }
    return r;
  };
  // Jacobian of the model (not of the residual).
  auto jacobian = [&](const std::vector<double>& th) {
    std::vector<double> j(m * k);
    for (std::size_t i = 0; i < m; ++i) {
      const double s = pts[i].s;
      const double sn = std::pow(s, th[2]);
      j[i * k + 0] = 1.0;
      j[i * k + 1] = -sn;
      j[i * k + 2] = s > 0.0 ? -th[1] * sn * std::log(s) : 0.0;
      if (with_offset) j[i * k + 3] = pts[i].group;
    }
    return j;
  };

  PowerLawFit fit;
  double lambda = 1e-3;
  std::vector<double> r = residuals(theta);
  double sse = sse_of(r);
  fit.sse_history.push_back(sse);
  constexpr int max_iter = 500;
  int it = 0;
  for (; it < max_iter; ++it) {
    if (sse == 0.0) {
      fit.converged = true;
      break;
    }
    const std::vector<double> j = jacobian(theta);
    std::vector<double> jtj(k * k, 0.0), jtr(k, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        jtr[p] += j[i * k + p] * r[i];
        for (std::size_t q = 0; q < k; ++q) jtj[p * k + q] += j[i * k + p] * j[i * k + q];
      }
    bool accepted = false;
    bool done = false;
    while (!accepted) {
      std::vector<double> damped = jtj;
      for (std::size_t p = 0; p < k; ++p) damped[p * k + p] += lambda * (jtj[p * k + p] + 1e-12);
      std::vector<double> step;
      std::vector<double> cand = theta;
      bool ok = solve_dense(damped, jtr, k, step);
      if (ok) {
        for (std::size_t p = 0; p < k; ++p) cand[p] += step[p];
        cand[2] = std::max(0.0, cand[2]);
        const std::vector<double> rc = residuals(cand);
        const double sc = sse_of(rc);
        if (std::isfinite(sc) && sc < sse) {
          double dn = 0.0, tn = 0.0;
          for (std::size_t p = 0; p < k; ++p) {
            dn += (cand[p] - theta[p]) * (cand[p] - theta[p]);
            tn += theta[p] * theta[p];
          }
          theta = cand;
          r = rc;
          sse = sc;
          fit.sse_history.push_back(sse);
          lambda = std::max(lambda / 10.0, 1e-15);
          accepted = true;
          if (std::sqrt(dn) < 1e-10 * std::max(std::sqrt(tn), 1e-300)) done = true;
          break;
        }
      }
      lambda *= 10.0;
      if (lambda > 1e16) {
        // No downhill step exists at this resolution: a stationary point.
        done = true;
        break;
      }
    }
    if (done) {
      fit.converged = true;
      ++it;
      break;
    }
  }
  fit.iterations = it;
  fit.lambda_final = lambda;
  fit.A = theta[0];
  fit.B = theta[1];
  fit.N = theta[2];
  if (with_offset) fit.offset = theta[3];
  fit.residuals = r;
  std::vector<double> obs(m), pred(m);
  for (std::size_t i = 0; i < m; ++i) {
    obs[i] = pts[i].a;
    pred[i] = pts[i].a - r[i];
  }
  fit.r_squared = r_squared(obs, pred);
  return fit;
}

inline void check_points(const std::vector<SparsityPoint>& pts) {
  if (pts.size() < 4) fail(errc::invalid_argument, "power-law fit needs at least 4 points");
  for (const auto& p : pts) {
    if (!(p.s >= 0.0 && p.s <= 1.0)) fail(errc::invalid_argument, "sparsity values must lie in [0, 1]");
    if (!std::isfinite(p.a)) fail(errc::invalid_argument, "non-finite performance value");
  }
  const bool same_s = std::all_of(pts.begin(), pts.end(), [&](const SparsityPoint& p) { return p.s == pts[0].s; });
  if (same_s) fail(errc::fit_error, "degenerate fit: all sparsity values are equal");
}

}  // namespace detail

// a(s) = A - B s^N by damped Gauss-Newton from A0 = max a, B0 = max a - min a, N0 = 8.
inline PowerLawFit fit_power_law(const std::vector<SparsityPoint>& pts) {
  detail::check_points(pts);
  const auto [lo, hi] = std::minmax_element(pts.begin(), pts.end(),
                                            [](const SparsityPoint& x, const SparsityPoint& y) { return x.a < y.a; });
  return detail::levenberg_marquardt(pts, {hi->a, hi->a - lo->a, 8.0}, false);
}

inline PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& sa) {
  std::vector<SparsityPoint> pts;
  for (const auto& [s, a] : sa) pts.push_back({s, a, 0});
  return fit_power_law(pts);
}

// Same model plus an additive offset for points whose group indicator is 1.
inline PowerLawFit fit_power_law_with_indicator(const std::vector<SparsityPoint>& pts) {
  detail::check_points(pts);
  const auto [lo, hi] = std::minmax_element(pts.begin(), pts.end(),
                                            [](const SparsityPoint& x, const SparsityPoint& y) { return x.a < y.a; });
  return detail::levenberg_marquardt(pts, {hi->a, hi->a - lo->a, 8.0, 0.0}, true);
}

struct ScaleInput {
  std::string group;
  double value = 0.0;
  bool is_loss = false;
};

struct ScaledMetric {
  double raw = 0.0;
  std::string group;
  double scaled = 0.0;
};

// Divides every value by its group maximum. Losses are inverted first as
// min_loss / loss, so the best loss maps to 1 and the order is reversed.
inline std::vector<ScaledMetric> scale_metrics(const std::vector<ScaleInput>& records) {
  std::map<std::string, double> min_loss, max_val;
  for (const auto& r : records) {
    if (r.is_loss) {
      if (!(r.value > 0.0)) fail(errc::invalid_argument, "loss values must be positive to invert");
      auto [it, fresh] = min_loss.emplace(r.group, r.value);
      if (!fresh) it->second = std::min(it->second, r.value);
    }
  }
  auto transformed = [&](const ScaleInput& r) { return r.is_loss ? min_loss.at(r.group) / r.value : r.value; };
  for (const auto& r : records) {
    const double v = transformed(r);
    auto [it, fresh] = max_val.emplace(r.group, v);
    if (!fresh) it->second = std::max(it->second, v);
  }
  std::vector<ScaledMetric> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const double mx = max_val.at(r.group);
    if (!(mx > 0.0)) fail(errc::invalid_argument, "group '" + r.group + "' has no positive value to scale by");
    out.push_back({r.value, r.group, transformed(r) / mx});
  }
  return out;
}

}  // namespace driftlab
