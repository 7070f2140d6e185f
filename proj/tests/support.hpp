#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "driftlab/network.hpp"

namespace driftlab::testing {

struct GradCheck {
  double worst = 0.0;  // max over parameters of ||analytic - fd|| / ||fd||
  std::string worst_param;
};

inline Matrix gaussian_matrix(std::size_t r, std::size_t c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline double loss_of(Network& net, const Matrix& x, const Matrix& y, loss_kind k) {
  return compute_loss(forward_trace(net, x, mode::train, nullptr), y, k).loss;
}

// Central differences of the batch loss against backward_trace for every
// parameter of a freshly built network.
inline GradCheck check_gradients(const NetworkConfig& cfg, std::uint64_t seed, loss_kind loss, std::size_t batch = 6,
                                 double h = 1e-6) {
  RngStream rng(seed);
  Network net = build_network(cfg, rng);
  // move norm affines off their identity values so their gradients are exercised
  for (auto& p : net.mutable_parameters())
    if (p.kind == param_kind::norm_scale || p.kind == param_kind::norm_shift || p.kind == param_kind::bias)
      for (double& v : p.value.values()) v += 0.3 * rng.normal();
  const Matrix x = gaussian_matrix(batch, cfg.input_dim, rng);
  Matrix y;
  if (loss == loss_kind::cross_entropy) {
    y = Matrix(batch, 1);
    for (std::size_t i = 0; i < batch; ++i) y(i, 0) = static_cast<double>(rng.uniform_index(cfg.output_dim));
  } else {
    y = gaussian_matrix(batch, cfg.output_dim, rng);
  }
  TrainingTrace t;
  const Matrix f = forward_trace(net, x, mode::train, &t);
  const Gradients g = backward_trace(net, t, compute_loss(f, y, loss).grad);

  std::vector<double> num(net.parameters().size()), den(net.parameters().size());
  for (std::size_t pi = 0; pi < net.parameters().size(); ++pi) {
    const std::size_t n = net.parameters()[pi].value.size();
    for (std::size_t j = 0; j < n; ++j) {
      const double orig = net.parameters()[pi].value.values()[j];
      net.mutable_parameters()[pi].value.values()[j] = orig + h;
      const double lp = loss_of(net, x, y, loss);
      net.mutable_parameters()[pi].value.values()[j] = orig - h;
      const double lm = loss_of(net, x, y, loss);
      net.mutable_parameters()[pi].value.values()[j] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double a = g.params[pi].values()[j];
      num[pi] += (a - fd) * (a - fd);
      den[pi] += fd * fd;
    }
  }
  // A parameter whose gradient is identically zero (a bias cancelled by a
  // per-channel centering norm) leaves only FD noise in den; its error is
  // measured against the largest parameter gradient instead.
  const double scale = std::sqrt(*std::max_element(den.begin(), den.end()));
  GradCheck out;
  for (std::size_t pi = 0; pi < num.size(); ++pi) {
    const double d = std::sqrt(den[pi]);
    const double rel = std::sqrt(num[pi]) / (d > 1e-6 * scale ? d : scale);
    if (rel > out.worst) {
      out.worst = rel;
      out.worst_param = net.parameters()[pi].name;
    }
  }
  return out;
}

}  // namespace driftlab::testing
