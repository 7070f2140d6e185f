#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "driftlab/activations.hpp"
#include "driftlab/error.hpp"
#include "driftlab/normalization.hpp"
#include "driftlab/numerics.hpp"

namespace driftlab {

enum class norm_position { pre_linear, pre_activation };
enum class init_scheme { kaiming, torch_default };

struct NetworkConfig {
  std::size_t input_dim = 128;
  std::size_t hidden_dim = 128;
  std::size_t output_dim = 128;
  std::size_t depth = 5;
  ActivationKind activation{};
  NormKind norm{};
  norm_position norm_pos = norm_position::pre_linear;
  bool skip = false;
  bool bias = false;
  init_scheme init = init_scheme::kaiming;
  double head_scale = 1.0;  // multiplies the head weights after init
  std::optional<TopKConfig> topk;
  double ema_gamma = 0.9999;  // PC running statistics
  double bn_gamma = 0.9;
  std::size_t as_warm_steps = 100;
  bool as_enabled = false;
};

inline void validate(const NetworkConfig& c) {
  if (c.depth < 1) fail(errc::invalid_argument, "depth must be >= 1");
  if (c.input_dim < 1 || c.hidden_dim < 1 || c.output_dim < 1) fail(errc::invalid_argument, "dimensions must be >= 1");
  if (!(c.head_scale > 0.0)) fail(errc::invalid_argument, "head_scale must be > 0");
  validate(c.activation);
  validate(c.norm);
  if (c.topk) topk_count(c.topk->retention, 1);
}

enum class param_kind { weight, bias, norm_scale, norm_shift, act_v };

struct Parameter {
  std::string name;
  param_kind kind;
  std::size_t layer;
  Matrix value;
};

// Stage s in [0, depth] is Linear -> Act; stage 0 is the input projection and
// has no norm or skip. Stages 1..depth are the repeated blocks. The head is a
// plain Linear and is weight layer depth + 1.
struct Stage {
  std::size_t in_dim = 0, out_dim = 0;
  bool has_norm = false;
  bool skip = false;
  std::size_t weight = 0;
  std::optional<std::size_t> bias, norm_scale, norm_shift, act_v;
  RunningStats stats;
};

struct StageTrace {
  Matrix input;       // x^(l-1), the stage input
  Matrix linear_in;   // input to the Linear (after a pre-linear norm)
  Matrix linear_out;  // W x (+ b)
  Matrix pre;         // input to the activation function
  Matrix post;        // activation output after Top-K, before the skip add
  Matrix output;      // stage output
  Matrix noise;
  Matrix topk_mask;
  NormCache norm_cache;
  Matrix norm_in;  // value fed into the norm
};

struct TrainingTrace {
  std::vector<StageTrace> stages;
  Matrix head_in;
  Matrix output;
  mode run_mode = mode::train;
  double norm_seconds = 0.0;  // wall time spent inside normalization layers
  std::uint64_t version = 0;
  const void* owner = nullptr;

  // ReLU gate pattern of stage s for one sample.
  std::vector<double> gates(std::size_t s, std::size_t sample = 0) const {
    const auto row = stages.at(s).pre.row(sample);
    std::vector<double> g(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) g[i] = row[i] > 0.0 ? 1.0 : 0.0;
    return g;
  }
};

struct Gradients {
  std::vector<Matrix> params;       // aligned with Network::parameters()
  std::vector<Matrix> pre;          // dl/d pre-activation per stage
  std::vector<Matrix> linear_out;   // dl/d linear output per stage, head last
  std::vector<Matrix> input;        // dl/d stage input
};

class Network {
 public:
  Network() = default;

  const NetworkConfig& config() const noexcept { return cfg_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<Parameter>& mutable_parameters() noexcept {
    ++version_;
    return params_;
  }
  std::uint64_t version() const noexcept { return version_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  std::vector<Stage>& mutable_stages() noexcept { return stages_; }
  std::size_t head_weight() const noexcept { return head_weight_; }
  std::optional<std::size_t> head_bias() const noexcept { return head_bias_; }
  std::size_t num_weight_layers() const noexcept { return stages_.size() + 1; }

  // Index of the weight parameter of weight layer l (stages first, head last).
  std::size_t weight_index(std::size_t l) const {
    if (l < stages_.size()) return stages_[l].weight;
    require(l == stages_.size(), errc::invalid_argument, "weight layer out of range");
    return head_weight_;
  }
  const Matrix& weight(std::size_t l) const { return params_[weight_index(l)].value; }

  // Swap the activation in place; parameters are preserved.
  void set_activation(const ActivationKind& k) {
    validate(k);
    if (k.learnable_v()) {
      for (const auto& s : stages_)
        if (!s.act_v) fail(errc::invalid_argument, "cannot swap in a parameterized activation without its parameter");
    }
    cfg_.activation = k;
    ++version_;
  }

  void set_topk(std::optional<TopKConfig> t) {
    cfg_.topk = t;
    ++version_;
  }

  void set_accumulation_stop(bool enabled) { cfg_.as_enabled = enabled; }

  friend Network build_network(const NetworkConfig& cfg, RngStream& rng);

 private:
  std::size_t add_param(std::string name, param_kind kind, std::size_t layer, Matrix value) {
    params_.push_back({std::move(name), kind, layer, std::move(value)});
    return params_.size() - 1;
  }

  NetworkConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<Stage> stages_;
  std::size_t head_weight_ = 0;
  std::optional<std::size_t> head_bias_;
  std::uint64_t version_ = 0;
};

inline double init_std(init_scheme s, std::size_t fan_in) {
  const double f = static_cast<double>(fan_in);
  return s == init_scheme::kaiming ? std::sqrt(2.0 / f) : 1.0 / std::sqrt(3.0 * f);
}

inline Network build_network(const NetworkConfig& cfg, RngStream& rng) {
  validate(cfg);
  Network net;
  net.cfg_ = cfg;
  const bool any_norm = cfg.norm.variant != norm_variant::none;
  const std::size_t d = cfg.hidden_dim;
  for (std::size_t s = 0; s <= cfg.depth; ++s) {
    Stage st;
    st.in_dim = s == 0 ? cfg.input_dim : d;
    st.out_dim = d;
    st.has_norm = s > 0 && any_norm;
    st.skip = s > 0 && cfg.skip;
    const std::string tag = std::to_string(s);
    st.weight = net.add_param("W" + tag, param_kind::weight, s,
                              gaussian_init(st.out_dim, st.in_dim, init_std(cfg.init, st.in_dim), rng));
    if (cfg.bias) st.bias = net.add_param("b" + tag, param_kind::bias, s, Matrix(1, st.out_dim));
    if (st.has_norm) {
      const std::size_t ch = cfg.norm_pos == norm_position::pre_linear ? st.in_dim : st.out_dim;
      if (cfg.norm.affine != norm_affine::none)
        st.norm_scale = net.add_param("g" + tag, param_kind::norm_scale, s, Matrix(1, ch, 1.0));
      if (cfg.norm.affine == norm_affine::scale_shift)
        st.norm_shift = net.add_param("beta" + tag, param_kind::norm_shift, s, Matrix(1, ch));
      if (cfg.norm.per_channel()) {
        const double g = cfg.norm.variant == norm_variant::batch_norm ? cfg.bn_gamma : cfg.ema_gamma;
        st.stats = RunningStats(ch, g, cfg.as_warm_steps);
      }
    }
    if (cfg.activation.learnable_v()) st.act_v = net.add_param("v" + tag, param_kind::act_v, s, Matrix(1, 1, rng.normal()));
    net.stages_.push_back(std::move(st));
  }
  Matrix head = gaussian_init(cfg.output_dim, d, init_std(cfg.init, d), rng);
  for (double& v : head.values()) v *= cfg.head_scale;
  net.head_weight_ = net.add_param("W" + std::to_string(cfg.depth + 1), param_kind::weight, cfg.depth + 1, std::move(head));
  if (cfg.bias) net.head_bias_ = net.add_param("b" + std::to_string(cfg.depth + 1), param_kind::bias, cfg.depth + 1, Matrix(1, cfg.output_dim));
  return net;
}

namespace detail {

inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix* b) {
  Matrix y = matmul_nt(x, w);
  if (b) {
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += (*b)(0, j);
    }
  }
  return y;
}

inline Matrix affine(const Matrix& xhat, const Matrix* scale, const Matrix* shift) {
  if (!scale && !shift) return xhat;
  Matrix y = xhat;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (scale) row[j] *= (*scale)(0, j);
      if (shift) row[j] += (*shift)(0, j);
    }
  }
  return y;
}

inline Matrix column_sums(const Matrix& g) {
  Matrix s(1, g.cols());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t j = 0; j < g.cols(); ++j) s(0, j) += g(r, j);
  return s;
}

// Gradients of y = xhat * scale + shift; returns dl/dxhat.
inline Matrix affine_backward(const Matrix& g, const Matrix& xhat, const Matrix* scale, Matrix* dscale, Matrix* dshift) {
  if (dshift) *dshift = column_sums(g);
  if (!scale) return g;
  Matrix ds(1, g.cols());
  Matrix dxhat = g;
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t j = 0; j < g.cols(); ++j) {
      ds(0, j) += g(r, j) * xhat(r, j);
      dxhat(r, j) = g(r, j) * (*scale)(0, j);
    }
  if (dscale) *dscale = std::move(ds);
  return dxhat;
}

}  // namespace detail

// Forward pass recording everything backward and the instrumentation need.
// Train mode mutates running statistics of BatchNorm / PC stages; `rng` feeds
// NoisyReLU and may be null otherwise.
inline Matrix forward_trace(Network& net, const Matrix& batch, mode m, TrainingTrace* trace, RngStream* rng = nullptr) {
  const NetworkConfig& cfg = net.config();
  if (batch.cols() != cfg.input_dim)
    fail(errc::invalid_argument, "batch has " + std::to_string(batch.cols()) + " columns, expected " +
                                     std::to_string(cfg.input_dim));
  require_finite(batch, "batch");
  ActivationKind act = cfg.activation;
  act.run_mode = m;
  RngStream fallback(0);
  RngStream& r = rng ? *rng : fallback;
  if (act.variant == act_variant::noisy_relu && m == mode::train && !rng)
    fail(errc::invalid_argument, "noisy_relu in train mode needs an rng");

  const auto& params = net.parameters();
  auto& stages = net.mutable_stages();
  TrainingTrace local;
  TrainingTrace& t = trace ? *trace : local;
  t = TrainingTrace{};
  t.stages.resize(stages.size());
  t.run_mode = m;

  auto pmat = [&](const std::optional<std::size_t>& i) -> const Matrix* { return i ? &params[*i].value : nullptr; };

  Matrix h = batch;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    Stage& st = stages[s];
    StageTrace& tr = t.stages[s];
    tr.input = h;
    Matrix u = h;
    if (st.has_norm && cfg.norm_pos == norm_position::pre_linear) {
      tr.norm_in = u;
      const auto t0 = std::chrono::steady_clock::now();
      u = detail::affine(norm_forward(cfg.norm, u, &st.stats, m, &tr.norm_cache), pmat(st.norm_scale), pmat(st.norm_shift));
      t.norm_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    tr.linear_in = u;
    tr.linear_out = detail::linear(u, params[st.weight].value, pmat(st.bias));
    if (!all_finite(tr.linear_out)) fail(errc::numeric_error, "non-finite pre-activations at stage " + std::to_string(s));
    Matrix p = tr.linear_out;
    if (st.has_norm && cfg.norm_pos == norm_position::pre_activation) {
      tr.norm_in = p;
      const auto t0 = std::chrono::steady_clock::now();
      p = detail::affine(norm_forward(cfg.norm, p, &st.stats, m, &tr.norm_cache), pmat(st.norm_scale), pmat(st.norm_shift));
      t.norm_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    tr.pre = p;
    const double v = st.act_v ? params[*st.act_v].value(0, 0) : 0.0;
    ActForward a = act_forward_cached(act, p, r, v);
    tr.noise = std::move(a.noise);
    if (cfg.topk && cfg.topk->retention < 1.0) {
      auto [y, mask] = topk_apply(a.y, *cfg.topk);
      a.y = std::move(y);
      tr.topk_mask = std::move(mask);
    }
    tr.post = std::move(a.y);
    if (st.skip) {
      Matrix o = tr.post;
      auto os = o.values();
      auto is = h.values();
      for (std::size_t i = 0; i < os.size(); ++i) os[i] += is[i];
      tr.output = std::move(o);
    } else {
      tr.output = tr.post;
    }
    if (!all_finite(tr.output)) fail(errc::numeric_error, "non-finite activations at stage " + std::to_string(s));
    h = tr.output;
  }
  t.head_in = h;
  t.output = detail::linear(h, params[net.head_weight()].value, pmat(net.head_bias()));
  if (!all_finite(t.output)) fail(errc::numeric_error, "non-finite network output");
  t.version = net.version();
  t.owner = &net;
  return t.output;
}

// Backward through a trace. Parameter gradients follow the batch-mean
// convention because the loss gradient already carries the 1/batch factor.
inline Gradients backward_trace(const Network& net, const TrainingTrace& t, const Matrix& loss_grad) {
  if (t.owner != &net || t.version != net.version())
    fail(errc::state_error, "trace is stale: parameters changed since the forward pass");
  if (!loss_grad.same_shape(t.output)) fail(errc::invalid_argument, "loss gradient shape does not match output");
  const NetworkConfig& cfg = net.config();
  const auto& params = net.parameters();
  const auto& stages = net.stages();
  ActivationKind act = cfg.activation;
  act.run_mode = t.run_mode;

  Gradients g;
  g.params.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g.params[i] = Matrix(params[i].value.rows(), params[i].value.cols());
  g.pre.resize(stages.size());
  g.linear_out.resize(stages.size() + 1);
  g.input.resize(stages.size());

  auto pmat = [&](const std::optional<std::size_t>& i) -> const Matrix* { return i ? &params[*i].value : nullptr; };
  auto gslot = [&](const std::optional<std::size_t>& i) -> Matrix* { return i ? &g.params[*i] : nullptr; };

  g.linear_out[stages.size()] = loss_grad;
  g.params[net.head_weight()] = matmul_tn(loss_grad, t.head_in);
  if (net.head_bias()) g.params[*net.head_bias()] = detail::column_sums(loss_grad);
  Matrix dh = matmul(loss_grad, params[net.head_weight()].value);

  for (std::size_t si = stages.size(); si-- > 0;) {
    const Stage& st = stages[si];
    const StageTrace& tr = t.stages[si];
    Matrix dpost = dh;
    if (!tr.topk_mask.empty()) {
      auto ds = dpost.values();
      auto ms = tr.topk_mask.values();
      for (std::size_t i = 0; i < ds.size(); ++i) ds[i] *= ms[i];
    }
    if (st.act_v) {
      const double v = params[*st.act_v].value(0, 0);
      g.params[*st.act_v](0, 0) = noisy_v_grad(act, tr.pre, tr.noise, dpost, v);
    }
    Matrix dp = act_backward(act, tr.pre, dpost);
    g.pre[si] = dp;
    Matrix dz = dp;
    if (st.has_norm && cfg.norm_pos == norm_position::pre_activation) {
      Matrix dxhat = detail::affine_backward(dp, tr.norm_cache.xhat, pmat(st.norm_scale), gslot(st.norm_scale), gslot(st.norm_shift));
      dz = norm_backward(cfg.norm, tr.norm_cache, dxhat);
    }
    g.linear_out[si] = dz;
    g.params[st.weight] = matmul_tn(dz, tr.linear_in);
    if (st.bias) g.params[*st.bias] = detail::column_sums(dz);
    Matrix du = matmul(dz, params[st.weight].value);
    if (st.has_norm && cfg.norm_pos == norm_position::pre_linear) {
      Matrix dxhat = detail::affine_backward(du, tr.norm_cache.xhat, pmat(st.norm_scale), gslot(st.norm_scale), gslot(st.norm_shift));
      du = norm_backward(cfg.norm, tr.norm_cache, dxhat);
    }
    if (st.skip) {
      auto us = du.values();
      auto hs = dh.values();
      for (std::size_t i = 0; i < us.size(); ++i) us[i] += hs[i];
    }
    g.input[si] = du;
    dh = std::move(du);
  }
  return g;
}

// Update running-statistic freezes after `step` completed updates.
inline void apply_accumulation_stop(Network& net, std::size_t step) {
  if (!net.config().as_enabled) return;
  for (auto& st : net.mutable_stages())
    if (st.has_norm && net.config().norm.per_channel()) accumulation_stop(st.stats, step);
}

enum class loss_kind { mse, mse_mean, cross_entropy };

inline loss_kind parse_loss(const std::string& s) {
  if (s == "mse") return loss_kind::mse;
  if (s == "mse_mean") return loss_kind::mse_mean;
  if (s == "ce") return loss_kind::cross_entropy;
  fail(errc::invalid_argument, "unknown loss '" + s + "'");
}

inline std::string to_string(loss_kind k) {
  switch (k) {
    case loss_kind::mse: return "mse";
    case loss_kind::mse_mean: return "mse_mean";
    case loss_kind::cross_entropy: return "ce";
  }
  return "mse";
}

struct LossResult {
  double loss = 0.0;
  Matrix grad;
};

// Class-index targets (one column) are expanded to one-hot rows.
inline Matrix one_hot_targets(const Matrix& target, std::size_t classes) {
  Matrix y(target.rows(), classes);
  for (std::size_t r = 0; r < target.rows(); ++r) {
    const double c = target(r, 0);
    if (!(c >= 0.0 && c < static_cast<double>(classes)) || c != std::floor(c))
      fail(errc::invalid_argument, "class index out of range");
    y(r, static_cast<std::size_t>(c)) = 1.0;
  }
  return y;
}

// mse: 0.5 * ||f - y||^2 averaged over the batch. mse_mean: mean over all
// entries of (f - y)^2. ce: softmax cross-entropy averaged over the batch.
inline LossResult compute_loss(const Matrix& output, const Matrix& target, loss_kind kind) {
  const std::size_t n = output.rows(), c = output.cols();
  if (n == 0) fail(errc::invalid_argument, "empty batch");
  LossResult res{0.0, Matrix(n, c)};
  const double bn = static_cast<double>(n);
  if (kind == loss_kind::cross_entropy) {
    Matrix y = target;
    if (target.rows() == n && target.cols() == 1 && c > 1) y = one_hot_targets(target, c);
    if (!y.same_shape(output)) fail(errc::invalid_argument, "cross-entropy target shape mismatch");
    for (std::size_t r = 0; r < n; ++r) {
      const auto f = output.row(r);
      const double mx = *std::max_element(f.begin(), f.end());
      double z = 0.0;
      for (double v : f) z += std::exp(v - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < c; ++j) {
        const double s = std::exp(f[j] - lz);
        res.loss -= y(r, j) * (f[j] - lz);
        res.grad(r, j) = (s - y(r, j)) / bn;
      }
    }
    res.loss /= bn;
    return res;
  }
  if (!target.same_shape(output)) fail(errc::invalid_argument, "mse target shape mismatch");
  const double denom = kind == loss_kind::mse ? bn : bn * static_cast<double>(c);
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double e = output.values()[i] - target.values()[i];
    res.loss += kind == loss_kind::mse ? 0.5 * e * e : e * e;
    res.grad.values()[i] = (kind == loss_kind::mse ? e : 2.0 * e) / denom;
  }
  res.loss /= denom;
  return res;
}

inline double accuracy(const Matrix& output, const std::vector<int>& labels) {
  require(labels.size() == output.rows(), errc::invalid_argument, "label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < output.rows(); ++r) {
    const auto f = output.row(r);
    const auto best = static_cast<int>(std::max_element(f.begin(), f.end()) - f.begin());
    hit += best == labels[r];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace driftlab
