#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "driftlab/error.hpp"
#include "driftlab/network.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

enum class metric_kind {
  zscore_drift,
  weight_mean,
  grad_mean,
  grad_std,
  neg_fraction,
  sparsity,
  cov_term,
  cov_term_abs,
  input_range_max,
  input_range_min,
  loss,
  accuracy,
};

inline constexpr metric_kind all_metrics[] = {
    metric_kind::zscore_drift,    metric_kind::weight_mean,     metric_kind::grad_mean, metric_kind::grad_std,
    metric_kind::neg_fraction,    metric_kind::sparsity,        metric_kind::cov_term,  metric_kind::cov_term_abs,
    metric_kind::input_range_max, metric_kind::input_range_min, metric_kind::loss,      metric_kind::accuracy,
};

inline std::string to_string(metric_kind k) {
  switch (k) {
    case metric_kind::zscore_drift: return "zscore_drift";
    case metric_kind::weight_mean: return "weight_mean";
    case metric_kind::grad_mean: return "grad_mean";
    case metric_kind::grad_std: return "grad_std";
    case metric_kind::neg_fraction: return "neg_fraction";
    case metric_kind::sparsity: return "sparsity";
    case metric_kind::cov_term: return "cov_term";
    case metric_kind::cov_term_abs: return "cov_term_abs";
    case metric_kind::input_range_max: return "input_range_max";
    case metric_kind::input_range_min: return "input_range_min";
    case metric_kind::loss: return "loss";
    case metric_kind::accuracy: return "accuracy";
  }
  return "unknown";
}

inline metric_kind parse_metric(const std::string& s) {
  for (metric_kind k : all_metrics)
    if (to_string(k) == s) return k;
  fail(errc::format_error, "unknown metric '" + s + "'");
}

// layer = -1 marks whole-network metrics such as the loss.
struct MetricRecord {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  int layer = 0;
  metric_kind metric = metric_kind::weight_mean;
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
  friend auto operator<=>(const MetricRecord& a, const MetricRecord& b) {
    if (auto c = a.seed <=> b.seed; c != 0) return c;
    if (auto c = a.step <=> b.step; c != 0) return c;
    if (auto c = a.layer <=> b.layer; c != 0) return c;
    if (auto c = a.metric <=> b.metric; c != 0) return c;
    if (a.value < b.value) return std::strong_ordering::less;
    if (b.value < a.value) return std::strong_ordering::greater;
    return std::strong_ordering::equal;
  }
};

inline double population_std(std::span<const double> v) {
  const double mu = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return v.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(v.size()));
}

struct WeightSnapshot {
  std::vector<Matrix> weights;
  std::vector<double> stds;
};

inline WeightSnapshot capture_snapshot(const Network& net) {
  WeightSnapshot s;
  for (std::size_t l = 0; l < net.num_weight_layers(); ++l) {
    s.weights.push_back(net.weight(l));
    s.stds.push_back(population_std(s.weights.back().values()));
  }
  return s;
}

inline std::vector<double> zscore_drift(const WeightSnapshot& snap, const Network& net) {
  if (snap.weights.size() != net.num_weight_layers()) fail(errc::invalid_argument, "snapshot does not match network");
  std::vector<double> z(snap.weights.size());
  for (std::size_t l = 0; l < z.size(); ++l) {
    const Matrix& w = net.weight(l);
    if (!w.same_shape(snap.weights[l])) fail(errc::invalid_argument, "snapshot layer shape mismatch");
    if (!(snap.stds[l] > 0.0)) fail(errc::state_error, "degenerate init: std(w0) = 0 in layer " + std::to_string(l));
    double s = 0.0;
    auto a = w.values();
    auto b = snap.weights[l].values();
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    z[l] = s / static_cast<double>(a.size()) / snap.stds[l];
  }
  return z;
}

inline double neg_fraction(const Matrix& pre) {
  if (pre.empty()) fail(errc::invalid_argument, "neg_fraction of empty tensor");
  std::size_t k = 0;
  for (double v : pre.values()) k += v < 0.0;
  return static_cast<double>(k) / static_cast<double>(pre.size());
}

inline double sparsity(const Matrix& post, double eps = 1e-7) {
  if (post.empty()) return 0.0;
  std::size_t k = 0;
  for (double v : post.values()) k += std::abs(v) < eps;
  return static_cast<double>(k) / static_cast<double>(post.size());
}

struct CovTerm {
  double signed_mean = 0.0;
  double abs_mean = 0.0;
};

// Unbiased batch covariance between every gradient unit i and input coordinate k,
// aggregated over the (i, k) pairs.
inline CovTerm cov_term(const Matrix& grad_pre, const Matrix& layer_input) {
  const std::size_t n = grad_pre.rows();
  if (layer_input.rows() != n) fail(errc::invalid_argument, "cov_term: batch sizes differ");
  if (n < 2) fail(errc::invalid_argument, "cov_term needs a batch of at least 2");
  auto centred = [n](const Matrix& a) {
    Matrix c = a;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double mu = 0.0;
      for (std::size_t r = 0; r < n; ++r) mu += a(r, j);
      mu /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) c(r, j) -= mu;
    }
    return c;
  };
  const Matrix cov = matmul_tn(centred(grad_pre), centred(layer_input));
  CovTerm out;
  for (double v : cov.values()) {
    out.signed_mean += v;
    out.abs_mean += std::abs(v);
  }
  const double denom = static_cast<double>(cov.size()) * static_cast<double>(n - 1);
  out.signed_mean /= denom;
  out.abs_mean /= denom;
  return out;
}

struct Range {
  double max = 0.0;
  double min = 0.0;
  double span() const noexcept { return max - min; }
};

inline Range input_range(const Matrix& x) {
  if (x.empty()) fail(errc::invalid_argument, "input_range of empty tensor");
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  return {*hi, *lo};
}

}  // namespace driftlab
