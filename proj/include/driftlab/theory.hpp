#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "driftlab/error.hpp"
#include "driftlab/network.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

struct VeffSample {
  Matrix v_eff;                            // output_dim x width of stage l
  std::vector<std::vector<double>> gates;  // D for stages l+1 .. depth
  std::vector<std::size_t> weight_layers;  // source weights l+1 .. head
};

inline void require_plain_relu(const NetworkConfig& c) {
  if (c.activation.variant != act_variant::relu) fail(errc::unsupported, "effective weights need a ReLU network");
  if (c.norm.variant != norm_variant::none) fail(errc::unsupported, "effective weights need a network without norm layers");
  if (c.skip || c.bias || (c.topk && c.topk->retention < 1.0))
    fail(errc::unsupported, "effective weights need a network without skips, biases or top-k");
}

// Folds the network tail after stage l into one matrix using the gates of
// the traced sample.
inline VeffSample build_v_eff(const Network& net, const TrainingTrace& t, std::size_t l, std::size_t sample = 0) {
  require_plain_relu(net.config());
  const std::size_t last = net.stages().size() - 1;
  if (l > last) fail(errc::invalid_argument, "layer index beyond the last hidden stage");
  if (t.stages.size() != net.stages().size()) fail(errc::invalid_argument, "trace does not match network");
  VeffSample out;
  Matrix v = net.weight(last + 1);
  out.weight_layers.push_back(last + 1);
  for (std::size_t s = last; s > l; --s) {
    auto gate = t.gates(s, sample);
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) *= gate[c];
    v = matmul(v, net.weight(s));
    out.gates.insert(out.gates.begin(), std::move(gate));
    out.weight_layers.insert(out.weight_layers.begin(), s);
  }
  out.v_eff = std::move(v);
  return out;
}

// f = V_eff * relu(p^(l)) for one traced sample.
inline std::vector<double> reconstruct_output(const VeffSample& v, const TrainingTrace& t, std::size_t l, std::size_t sample = 0) {
  const auto post = t.stages.at(l).post.row(sample);
  std::vector<double> f(v.v_eff.rows(), 0.0);
  for (std::size_t r = 0; r < v.v_eff.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < post.size(); ++c) s += v.v_eff(r, c) * post[c];
    f[r] = s;
  }
  return f;
}

// Largest relative reconstruction error over all samples of a trace.
inline double eq2_max_relative_error(const Network& net, const TrainingTrace& t, std::size_t l) {
  double worst = 0.0;
  for (std::size_t b = 0; b < t.output.rows(); ++b) {
    const VeffSample v = build_v_eff(net, t, l, b);
    const auto f = reconstruct_output(v, t, l, b);
    double num = 0.0, den = 0.0;
    for (std::size_t r = 0; r < f.size(); ++r) {
      const double e = t.output(b, r) - f[r];
      num += e * e;
      den += t.output(b, r) * t.output(b, r);
    }
    const double rel = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
    worst = std::max(worst, rel);
  }
  return worst;
}

struct MCEstimate {
  std::vector<double> mean;
  std::vector<double> std_error;
  std::size_t n_samples = 0;
  std::size_t rows = 0, cols = 0;
};

// Sufficient statistics of an elementwise Monte Carlo mean.
class MCAccumulator {
 public:
  MCAccumulator() = default;
  MCAccumulator(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), sum_(rows * cols), sumsq_(rows * cols) {}

  void add(std::span<const double> x) {
    require(x.size() == sum_.size(), errc::invalid_argument, "accumulator size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) {
      sum_[i] += x[i];
      sumsq_[i] += x[i] * x[i];
    }
    ++n_;
  }
  void merge(const MCAccumulator& o) {
    require(o.sum_.size() == sum_.size(), errc::invalid_argument, "accumulator size mismatch");
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      sum_[i] += o.sum_[i];
      sumsq_[i] += o.sumsq_[i];
    }
    n_ += o.n_;
  }
  std::size_t count() const noexcept { return n_; }

  MCEstimate finish() const {
    if (n_ < 2) fail(errc::invalid_argument, "an estimate needs at least 2 samples");
    MCEstimate e;
    e.rows = rows_;
    e.cols = cols_;
    e.n_samples = n_;
    e.mean.resize(sum_.size());
    e.std_error.resize(sum_.size());
    const double n = static_cast<double>(n_);
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      const double m = sum_[i] / n;
      const double var = std::max(0.0, (sumsq_[i] - n * m * m) / (n - 1.0));
      e.mean[i] = m;
      e.std_error[i] = std::sqrt(var / n);
    }
    return e;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> sum_, sumsq_;
  std::size_t n_ = 0;
};

inline std::size_t worker_threads() {
  if (const char* env = std::getenv("DRIFTLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs draw(k, accs) for k in [0, n). Draws are cut into a fixed number of
// chunks that are merged in order, so results do not depend on thread count.
template <class MakeAccs, class Draw>
auto monte_carlo(std::size_t n, MakeAccs make, Draw draw) {
  constexpr std::size_t chunks = 64;
  using Accs = decltype(make());
  std::vector<Accs> parts(chunks, make());
  auto run_chunk = [&](std::size_t c) {
    const std::size_t lo = n * c / chunks, hi = n * (c + 1) / chunks;
    for (std::size_t k = lo; k < hi; ++k) draw(k, parts[c]);
  };
  const std::size_t threads = std::min(worker_threads(), chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex mu;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t c = w; c < chunks; c += threads) run_chunk(c);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
  }
  Accs total = make();
  for (auto& p : parts) total.merge(p);
  return total;
}

struct VeffStats {
  MCEstimate row_mean;  // one entry per row of V_eff
  MCEstimate gram;      // output_dim x output_dim row inner products
};

inline Matrix single_input(const Matrix& input, std::size_t dim) {
  if (input.rows() != 1 || input.cols() != dim) fail(errc::invalid_argument, "expected a single input row of the network input width");
  return input;
}

// Row-mean and row-Gram statistics of V_eff over n independent initializations of every weight,
// with gates recomputed from the forward pass of each draw.
inline VeffStats mc_veff_stats(const NetworkConfig& cfg, const Matrix& input, std::size_t n, const RngStream& rng, std::size_t l = 0) {
  require_plain_relu(cfg);
  if (n < 100) fail(errc::invalid_argument, "mc_veff_stats needs n >= 100");
  const Matrix x = single_input(input, cfg.input_dim);
  const std::size_t c = cfg.output_dim;
  struct Accs {
    MCAccumulator mean, gram;
    void merge(const Accs& o) {
      mean.merge(o.mean);
      gram.merge(o.gram);
    }
  };
  auto make = [&] { return Accs{MCAccumulator(c, 1), MCAccumulator(c, c)}; };
  Accs acc = monte_carlo(n, make, [&](std::size_t k, Accs& a) {
    RngStream r = rng.split(k);
    Network net = build_network(cfg, r);
    TrainingTrace t;
    forward_trace(net, x, mode::eval, &t);
    const Matrix v = build_v_eff(net, t, l).v_eff;
    std::vector<double> rm(c);
    for (std::size_t i = 0; i < c; ++i) rm[i] = mean(v.row(i));
    a.mean.add(rm);
    a.gram.add(matmul_nt(v, v).values());
  });
  return {acc.mean.finish(), acc.gram.finish()};
}

struct ExpectedGradient {
  MCEstimate grad;           // E[dl/dp_i]
  MCEstimate prediction;     // factor * sum_j <v_i, v_j> relu(p_j), per draw
  MCEstimate linear;         // CE only: first-order softmax expansion of the gradient
  MCEstimate nonlinear_gap;  // CE only: gradient minus its linear expansion
  std::vector<bool> active;  // p_i > 0
  std::vector<double> pre;   // the fixed p^(l)
  double factor = 1.0;       // 1 for MSE, (C-1)/C^2 for CE
  double logit_scale = 1.0;
};

// Expected gradient at stage l over n redraws of the weights after stage l,
// with the upstream weights (hence p^(l)) held fixed. Columns of V_eff are the
// per-neuron vectors v_i here.
inline ExpectedGradient mc_expected_gradient(const NetworkConfig& cfg, const Matrix& input, const Matrix& target, loss_kind loss,
                                             std::size_t l, std::size_t n, const RngStream& rng) {
  require_plain_relu(cfg);
  if (l > cfg.depth) fail(errc::invalid_argument, "layer index beyond the last hidden stage");
  if (loss == loss_kind::mse_mean) fail(errc::invalid_argument, "use mse or ce for the expected-gradient check");
  const Matrix x = single_input(input, cfg.input_dim);
  const std::size_t c = cfg.output_dim, d = cfg.hidden_dim;
  if (target.rows() != 1 || target.cols() != c) fail(errc::invalid_argument, "target must be one row of output width");
  const bool ce = loss == loss_kind::cross_entropy;

  RngStream up_rng = rng.split(~std::uint64_t{0});
  Network base = build_network(cfg, up_rng);
  TrainingTrace bt;
  forward_trace(base, x, mode::eval, &bt);

  ExpectedGradient out;
  out.logit_scale = cfg.head_scale;
  out.factor = ce ? (static_cast<double>(c) - 1.0) / (static_cast<double>(c) * static_cast<double>(c)) : 1.0;
  const auto pre = bt.stages[l].pre.row(0);
  const auto post = bt.stages[l].post.row(0);
  out.pre.assign(pre.begin(), pre.end());
  for (double p : pre) out.active.push_back(p > 0.0);

  struct Accs {
    MCAccumulator grad, pred, lin, gap;
    void merge(const Accs& o) {
      grad.merge(o.grad);
      pred.merge(o.pred);
      lin.merge(o.lin);
      gap.merge(o.gap);
    }
  };
  auto make = [&] { return Accs{MCAccumulator(d, 1), MCAccumulator(d, 1), MCAccumulator(d, 1), MCAccumulator(d, 1)}; };
  const double cc = static_cast<double>(c);
  Accs acc = monte_carlo(n, make, [&](std::size_t k, Accs& a) {
    RngStream r = rng.split(k);
    Network net = build_network(cfg, r);
    {
      auto& ps = net.mutable_parameters();
      for (std::size_t s = 0; s <= l; ++s) ps[net.weight_index(s)].value = base.weight(s);
    }
    TrainingTrace t;
    const Matrix f = forward_trace(net, x, mode::eval, &t);
    const LossResult lr = compute_loss(f, target, loss);
    const Gradients g = backward_trace(net, t, lr.grad);
    a.grad.add(g.pre[l].values());

    const Matrix v = build_v_eff(net, t, l).v_eff;  // c x d
    std::vector<double> va(c, 0.0);
    for (std::size_t r2 = 0; r2 < c; ++r2)
      for (std::size_t j = 0; j < d; ++j) va[r2] += v(r2, j) * post[j];
    std::vector<double> pred(d, 0.0), lin(d, 0.0), gap(d, 0.0);
    // first-order softmax: s ~ 1/C + (f - mean(f)) / C
    std::vector<double> e(c, 0.0);
    if (ce) {
      double fm = 0.0;
      for (std::size_t r2 = 0; r2 < c; ++r2) fm += va[r2];
      fm /= cc;
      for (std::size_t r2 = 0; r2 < c; ++r2) e[r2] = 1.0 / cc + (va[r2] - fm) / cc - target(0, r2);
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (!(pre[i] > 0.0)) continue;
      double s = 0.0, li = 0.0;
      for (std::size_t r2 = 0; r2 < c; ++r2) {
        s += v(r2, i) * va[r2];
        li += v(r2, i) * e[r2];
      }
      pred[i] = out.factor * s;
      lin[i] = li;
      gap[i] = g.pre[l](0, i) - li;
    }
    a.pred.add(pred);
    a.lin.add(lin);
    a.gap.add(gap);
  });
  out.grad = acc.grad.finish();
  out.prediction = acc.pred.finish();
  if (ce) {
    out.linear = acc.lin.finish();
    out.nonlinear_gap = acc.gap.finish();
  }
  return out;
}

// Relative size of the part of E[dl/dp] not captured by the linear softmax
// expansion, over active neurons.
inline double ce_residual(const ExpectedGradient& e) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < e.active.size(); ++i) {
    if (!e.active[i]) continue;
    num += std::abs(e.nonlinear_gap.mean.at(i));
    den += std::abs(e.prediction.mean[i]);
  }
  return den > 0.0 ? num / den : 0.0;
}

struct ProjectionIdentity {
  MCEstimate lhs;  // E[tr(V^T P V)]
  MCEstimate rhs;  // E[||V||_F^2]
  double ratio = 0.0;
  double ratio_se = 0.0;
  double target = 0.0;  // (C-1)/C
};

// Centering-projection identity over n fresh networks fed one fixed Gaussian input.
inline ProjectionIdentity mc_projection_identity(const NetworkConfig& cfg, std::size_t n, const RngStream& rng, std::size_t l = 0) {
  require_plain_relu(cfg);
  const std::size_t c = cfg.output_dim;
  if (c < 2) fail(errc::invalid_argument, "projection identity needs C >= 2");
  if (n < 2) fail(errc::invalid_argument, "projection identity needs n >= 2");
  RngStream in_rng = rng.split(~std::uint64_t{1});
  Matrix x(1, cfg.input_dim);
  for (double& v : x.values()) v = in_rng.normal();
  struct Accs {
    MCAccumulator ab;     // (lhs, rhs) per draw
    MCAccumulator cross;  // lhs * rhs, for the ratio standard error
    void merge(const Accs& o) {
      ab.merge(o.ab);
      cross.merge(o.cross);
    }
  };
  auto make = [&] { return Accs{MCAccumulator(2, 1), MCAccumulator(1, 1)}; };
  Accs acc = monte_carlo(n, make, [&](std::size_t k, Accs& a) {
    RngStream r = rng.split(k);
    Network net = build_network(cfg, r);
    TrainingTrace t;
    forward_trace(net, x, mode::eval, &t);
    const Matrix v = build_v_eff(net, t, l).v_eff;
    double fro = 0.0, colsum2 = 0.0;
    for (std::size_t j = 0; j < v.cols(); ++j) {
      double cs = 0.0;
      for (std::size_t i = 0; i < c; ++i) {
        fro += v(i, j) * v(i, j);
        cs += v(i, j);
      }
      colsum2 += cs * cs;
    }
    const double lhs = fro - colsum2 / static_cast<double>(c);
    const double pair[2] = {lhs, fro};
    a.ab.add(pair);
    const double prod = lhs * fro;
    a.cross.add(std::span<const double>(&prod, 1));
  });
  const MCEstimate ab = acc.ab.finish();
  const MCEstimate cr = acc.cross.finish();
  ProjectionIdentity out;
  out.lhs = {{ab.mean[0]}, {ab.std_error[0]}, ab.n_samples, 1, 1};
  out.rhs = {{ab.mean[1]}, {ab.std_error[1]}, ab.n_samples, 1, 1};
  out.target = (static_cast<double>(c) - 1.0) / static_cast<double>(c);
  out.ratio = ab.mean[0] / ab.mean[1];
  // delta method: Var(a - R b) / (n b_bar^2)
  const double nn = static_cast<double>(ab.n_samples);
  const double var_a = ab.std_error[0] * ab.std_error[0] * nn;
  const double var_b = ab.std_error[1] * ab.std_error[1] * nn;
  const double cov_ab = (cr.mean[0] - ab.mean[0] * ab.mean[1]) * nn / (nn - 1.0);
  const double R = out.ratio;
  const double var_lin = std::max(0.0, var_a - 2.0 * R * cov_ab + R * R * var_b);
  out.ratio_se = std::sqrt(var_lin / nn) / ab.mean[1];
  return out;
}

struct ClosedFormProjection {
  double lhs, rhs;
};

// V = W with i.i.d. N(0, s^2) entries of shape C x d.
inline ClosedFormProjection projection_closed_form(std::size_t c, std::size_t d, double s) {
  const double cd = static_cast<double>(c), dd = static_cast<double>(d);
  return {(cd - 1.0) * dd * s * s, cd * dd * s * s};
}

}  // namespace driftlab
