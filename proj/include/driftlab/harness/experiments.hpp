#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "driftlab/harness/config.hpp"
#include "driftlab/harness/datasets.hpp"
#include "driftlab/harness/verify.hpp"
#include "driftlab/instrumentation.hpp"
#include "driftlab/network.hpp"
#include "driftlab/optim.hpp"

namespace driftlab {

struct SeedLog {
  std::uint64_t seed = 0;
  std::vector<MetricRecord> records;
  bool diverged = false;
  std::string message;
  std::map<std::string, double> finals;
  std::vector<double> step_seconds;  // one entry per update, metrics excluded
  std::vector<double> norm_seconds;  // time inside normalization layers per update
};

struct RunLog {
  std::string name;  // arm name inside a sweep
  ExperimentConfig config;
  std::vector<SeedLog> seeds;
  json reports = json::object();
  std::vector<RunLog> arms;
  double wall_seconds = 0.0;

  const RunLog& arm(const std::string& n) const {
    for (const auto& a : arms)
      if (a.name == n) return a;
    fail(errc::invalid_argument, "no arm named '" + n + "'");
  }
};

inline bool on_cadence(const ExperimentConfig& c, std::size_t step, std::size_t last) {
  return step <= c.cadence_dense || step % c.cadence_stride == 0 || step == last;
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  double neg_fraction = 0.0;  // mean over stages
  double sparsity = 0.0;      // mean over stages
};

inline EvalResult evaluate(Network& net, const Dataset& d, std::size_t chunk = 1000) {
  EvalResult r;
  if (d.size() == 0) return r;
  std::size_t hit = 0;
  double loss = 0.0, neg = 0.0, sp = 0.0;
  for (std::size_t b = 0; b < d.size(); b += chunk) {
    const std::size_t e = std::min(d.size(), b + chunk);
    const Dataset part = slice(d, b, e);
    TrainingTrace t;
    const Matrix f = forward_trace(net, part.x, mode::eval, &t);
    Matrix y(part.size(), 1);
    for (std::size_t i = 0; i < part.size(); ++i) y(i, 0) = part.labels[i];
    loss += compute_loss(f, y, loss_kind::cross_entropy).loss * static_cast<double>(part.size());
    hit += static_cast<std::size_t>(std::lround(accuracy(f, part.labels) * static_cast<double>(part.size())));
    double n_s = 0.0, s_s = 0.0;
    for (const auto& st : t.stages) {
      n_s += neg_fraction(st.pre);
      s_s += sparsity(st.post);
    }
    neg += n_s / static_cast<double>(t.stages.size()) * static_cast<double>(part.size());
    sp += s_s / static_cast<double>(t.stages.size()) * static_cast<double>(part.size());
  }
  const double n = static_cast<double>(d.size());
  r.accuracy = static_cast<double>(hit) / n;
  r.loss = loss / n;
  r.neg_fraction = neg / n;
  r.sparsity = sp / n;
  return r;
}

namespace detail {

inline std::uint64_t stats_checksum(const Network& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::vector<double>& v) {
    for (double x : v) {
      unsigned char b[sizeof(double)];
      std::memcpy(b, &x, sizeof x);
      for (unsigned char c : b) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& s : net.stages()) {
    mix(s.stats.shift);
    mix(s.stats.var);
  }
  return h;
}

}  // namespace detail

// One seed of a training run. Streams: 0 init, 1 data, 2 activation noise.
class SeedTrainer {
 public:
  SeedTrainer(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset* train)
      : cfg_(cfg),
        ncfg_(network_config(cfg)),
        loss_(cfg.resolved_loss()),
        train_(train),
        root_(seed),
        data_rng_(root_.split(1)),
        noise_rng_(root_.split(2)) {
    log_.seed = seed;
    RngStream init = root_.split(0);
    net_ = build_network(ncfg_, init);
    opt_ = OptimizerState(optimizer_config(cfg));
    snap_ = capture_snapshot(net_);
    record_weights(0);
  }

  Network& network() noexcept { return net_; }
  SeedLog& log() noexcept { return log_; }
  std::size_t step() const noexcept { return step_; }
  void reset_optimizer() { opt_ = OptimizerState(optimizer_config(cfg_)); }

  // Runs `count` updates; `last` is the final step number of the whole run,
  // which is always recorded. Returns false once the seed has diverged.
  bool train(std::size_t count, std::size_t last) {
    for (std::size_t i = 0; i < count && !log_.diverged; ++i) {
      try {
        one_step(last);
      } catch (const error& e) {
        if (e.code() != errc::numeric_error) throw;
        log_.diverged = true;
        log_.message = std::string("diverged at step ") + std::to_string(step_ + 1) + ": " + e.what();
      }
    }
    return !log_.diverged;
  }

  void add(std::size_t step, int layer, metric_kind k, double v) {
    if (std::isfinite(v)) log_.records.push_back({static_cast<std::int64_t>(step), log_.seed, layer, k, v});
  }

 private:
  std::pair<Matrix, Matrix> next_batch() {
    if (!train_) {
      Matrix x = gaussian_batch(cfg_.batch_size, ncfg_.input_dim, data_rng_);
      Matrix y = gaussian_batch(cfg_.batch_size, ncfg_.output_dim, data_rng_);
      return {std::move(x), std::move(y)};
    }
    return sample_batch(*train_, cfg_.batch_size, data_rng_);
  }

  void record_weights(std::size_t step) {
    const auto z = zscore_drift(snap_, net_);
    for (std::size_t l = 0; l < net_.num_weight_layers(); ++l) {
      add(step, static_cast<int>(l), metric_kind::weight_mean, mean(net_.weight(l).values()));
      add(step, static_cast<int>(l), metric_kind::zscore_drift, z[l]);
    }
  }

  void one_step(std::size_t last) {
    auto [x, y] = next_batch();
    const auto t0 = std::chrono::steady_clock::now();
    TrainingTrace t;
    const Matrix f = forward_trace(net_, x, mode::train, &t, &noise_rng_);
    const LossResult lr = compute_loss(f, y, loss_);
    if (!std::isfinite(lr.loss)) fail(errc::numeric_error, "non-finite loss");
    Gradients g = backward_trace(net_, t, lr.grad);
    optimizer_step(opt_, net_.mutable_parameters(), g.params);
    ++step_;
    apply_accumulation_stop(net_, step_);
    log_.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    log_.norm_seconds.push_back(t.norm_seconds);
    for (const auto& p : net_.parameters())
      if (!all_finite(p.value)) fail(errc::numeric_error, "non-finite parameter " + p.name);
    if (!on_cadence(cfg_, step_, last)) return;

    record_weights(step_);
    const double bsz = static_cast<double>(x.rows());
    for (std::size_t l = 0; l < net_.num_weight_layers(); ++l) {
      const Matrix& gw = g.params[net_.weight_index(l)];
      add(step_, static_cast<int>(l), metric_kind::grad_mean, mean(gw.values()));
      add(step_, static_cast<int>(l), metric_kind::grad_std, population_std(gw.values()));
      // per-sample gradients are batch * (batch-mean convention gradient)
      Matrix per_sample = g.linear_out[l];
      for (double& v : per_sample.values()) v *= bsz;
      const Matrix& input = l < t.stages.size() ? t.stages[l].linear_in : t.head_in;
      if (x.rows() >= 2) {
        const CovTerm c = cov_term(per_sample, input);
        add(step_, static_cast<int>(l), metric_kind::cov_term, c.signed_mean);
        add(step_, static_cast<int>(l), metric_kind::cov_term_abs, c.abs_mean);
      }
    }
    for (std::size_t s = 0; s < t.stages.size(); ++s) {
      const auto& st = t.stages[s];
      add(step_, static_cast<int>(s), metric_kind::neg_fraction, neg_fraction(st.pre));
      add(step_, static_cast<int>(s), metric_kind::sparsity, sparsity(st.post));
      const Range r = input_range(st.post);
      add(step_, static_cast<int>(s), metric_kind::input_range_max, r.max);
      add(step_, static_cast<int>(s), metric_kind::input_range_min, r.min);
    }
    add(step_, -1, metric_kind::loss, lr.loss);
    if (loss_ == loss_kind::cross_entropy) {
      std::vector<int> labels(y.rows());
      for (std::size_t i = 0; i < y.rows(); ++i) labels[i] = static_cast<int>(y(i, 0));
      add(step_, -1, metric_kind::accuracy, accuracy(f, labels));
    }
  }

  const ExperimentConfig& cfg_;
  NetworkConfig ncfg_;
  loss_kind loss_;
  const Dataset* train_;
  RngStream root_, data_rng_, noise_rng_;
  Network net_;
  OptimizerState opt_;
  WeightSnapshot snap_;
  SeedLog log_;
  std::size_t step_ = 0;
};

// Runs job(i) for i in [0, n) on up to DRIFTLAB_THREADS threads.
template <class Job>
void parallel_for_seeds(std::size_t n, Job job) {
  const std::size_t threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex mu;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

struct DataSplit {
  Dataset train, test;
  bool present = false;
};

inline DataSplit prepare_data(const ExperimentConfig& c) {
  DataSplit d;
  const dataset_kind k = parse_dataset(c.dataset);
  if (!c.classification_task()) {
    if (k != dataset_kind::random) fail(errc::invalid_argument, "MSE experiments use the random dataset");
    return d;
  }
  RngStream rng(c.dataset_seed);
  if (k == dataset_kind::synthetic_classes || k == dataset_kind::random) {
    if (c.dataset_n <= c.test_size) fail(errc::invalid_argument, "dataset_n must exceed test_size");
    RngStream g = rng.split(0);
    const Dataset all = synthetic_classes(c.dataset_n, c.input_dim, c.dataset_classes, c.dataset_margin, g);
    d.train = slice(all, 0, c.dataset_n - c.test_size);
    d.test = slice(all, c.dataset_n - c.test_size, c.dataset_n);
  } else {
    if (c.input_dim != cifar_pixels) fail(errc::invalid_argument, "cifar10 needs input_dim = 3072");
    if (c.cifar_path.empty()) fail(errc::io_error, "cifar10 dataset needs cifar_path");
    RngStream a = rng.split(1), b = rng.split(2);
    d.train = load_cifar10(c.cifar_path, c.subset_size, a, false);
    d.test = load_cifar10(c.cifar_path, c.test_size, b, true);
  }
  d.present = true;
  return d;
}

inline std::size_t resolved_steps(const ExperimentConfig& c, const DataSplit& d) {
  if (c.epochs == 0 || !d.present) return c.steps;
  const std::size_t per_epoch = (d.train.size() + c.batch_size - 1) / c.batch_size;
  return c.epochs * std::max<std::size_t>(1, per_epoch);
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// random_mse and classification.
inline RunLog run_training(const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  RunLog log;
  log.config = c;
  const DataSplit data = prepare_data(c);
  const std::size_t steps = resolved_steps(c, data);
  log.seeds.resize(c.seeds.size());
  parallel_for_seeds(c.seeds.size(), [&](std::size_t i) {
    SeedTrainer tr(c, c.seeds[i], data.present ? &data.train : nullptr);
    std::uint64_t frozen_sum = 0;
    bool frozen_seen = false;
    std::size_t frozen_at = 0;
    const bool watch = c.as_enabled && network_config(c).norm.per_channel();
    for (std::size_t s = 0; s < steps; ++s) {
      if (!tr.train(1, steps)) break;
      if (watch && !frozen_seen && tr.step() >= c.as_warm_steps) {
        frozen_seen = true;
        frozen_at = tr.step();
        frozen_sum = detail::stats_checksum(tr.network());
      }
    }
    SeedLog& out = tr.log();
    if (watch && frozen_seen) {
      out.finals["as_freeze_step"] = static_cast<double>(frozen_at);
      out.finals["as_steps_after_freeze"] = static_cast<double>(tr.step() - frozen_at);
      out.finals["as_buffer_unchanged"] = detail::stats_checksum(tr.network()) == frozen_sum ? 1.0 : 0.0;
    }
    if (!out.diverged) {
      if (data.present) {
        const EvalResult e = evaluate(tr.network(), data.test);
        out.finals["test_accuracy"] = e.accuracy;
        out.finals["test_loss"] = e.loss;
        out.finals["test_neg_fraction"] = e.neg_fraction;
        out.finals["test_sparsity"] = e.sparsity;
      }
    }
    out.finals["steps_completed"] = static_cast<double>(tr.step());
    log.seeds[i] = std::move(out);
  });
  log.wall_seconds = elapsed(t0);
  return log;
}

inline RunLog run_relufication(const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  RunLog log;
  log.config = c;
  const DataSplit data = prepare_data(c);
  if (!data.present) fail(errc::invalid_argument, "relufication needs a classification dataset");
  const std::size_t steps = resolved_steps(c, data);
  const ActivationKind target = parse_activation(c.new_activation);
  log.seeds.resize(c.seeds.size());
  parallel_for_seeds(c.seeds.size(), [&](std::size_t i) {
    SeedTrainer tr(c, c.seeds[i], &data.train);
    const std::size_t last = steps + c.ft_steps;
    SeedLog* out = &tr.log();
    if (tr.train(steps, last)) {
      const EvalResult base = evaluate(tr.network(), data.test);
      tr.network().set_activation(target);
      const EvalResult swapped = evaluate(tr.network(), data.test);
      tr.reset_optimizer();
      tr.train(c.ft_steps, last);
      out->finals["baseline_accuracy"] = base.accuracy;
      out->finals["baseline_neg_fraction"] = base.neg_fraction;
      out->finals["baseline_sparsity"] = base.sparsity;
      out->finals["swap_accuracy"] = swapped.accuracy;
      out->finals["swap_neg_fraction"] = swapped.neg_fraction;
      out->finals["swap_sparsity"] = swapped.sparsity;
      if (!out->diverged) {
        const EvalResult fin = evaluate(tr.network(), data.test);
        out->finals["final_accuracy"] = fin.accuracy;
        out->finals["final_neg_fraction"] = fin.neg_fraction;
        out->finals["final_sparsity"] = fin.sparsity;
      }
    }
    out->finals["steps_completed"] = static_cast<double>(tr.step());
    log.seeds[i] = std::move(*out);
  });
  log.wall_seconds = elapsed(t0);
  return log;
}

inline std::string arm_label(const std::string& prefix, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%g", prefix.c_str(), v);
  return buf;
}

inline RunLog run_experiment(const ExperimentConfig& c);

inline RunLog run_sweep(const ExperimentConfig& c, const std::vector<std::pair<std::string, ExperimentConfig>>& arms) {
  const auto t0 = std::chrono::steady_clock::now();
  RunLog log;
  log.config = c;
  for (const auto& [name, cfg] : arms) {
    RunLog a = run_experiment(cfg);
    a.name = name;
    log.arms.push_back(std::move(a));
  }
  log.wall_seconds = elapsed(t0);
  return log;
}

inline ExperimentConfig as_training_arm(ExperimentConfig c) {
  const bool classify = c.classification_task();
  c.experiment = classify ? experiment_kind::classification : experiment_kind::random_mse;
  return c;
}

inline double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  hi = std::min(hi, v.size());
  if (lo >= hi) return 0.0;
  double s = 0.0;
  for (std::size_t i = lo; i < hi; ++i) s += v[i];
  return s / static_cast<double>(hi - lo);
}

inline RunLog run_experiment(const ExperimentConfig& c) {
  switch (c.experiment) {
    case experiment_kind::random_mse:
    case experiment_kind::classification: return run_training(c);
    case experiment_kind::relufication: return run_relufication(c);
    case experiment_kind::topk_sweep: {
      std::vector<std::pair<std::string, ExperimentConfig>> arms;
      for (double k : c.topk_values) {
        ExperimentConfig a = as_training_arm(c);
        a.topk = k;
        arms.emplace_back(arm_label("topk_", k), a);
      }
      return run_sweep(c, arms);
    }
    case experiment_kind::pc_sweep: {
      std::vector<std::pair<std::string, ExperimentConfig>> arms;
      for (double q : c.pc_q_values) {
        ExperimentConfig a = as_training_arm(c);
        a.norm = "pc";
        a.pc_q = q;
        arms.emplace_back(arm_label("pc_q_", q), a);
      }
      return run_sweep(c, arms);
    }
    case experiment_kind::as_benchmark: {
      ExperimentConfig off = as_training_arm(c);
      if (off.norm == "none") off.norm = "pc";
      off.as_enabled = false;
      ExperimentConfig on = off;
      on.as_enabled = true;
      RunLog log = run_sweep(c, {{"as_off", off}, {"as_on", on}});
      json timing = json::array();
      for (const auto& arm : log.arms)
        for (const auto& s : arm.seeds) {
          const std::size_t w = c.as_warm_steps;
          timing.push_back({{"arm", arm.name},
                            {"seed", s.seed},
                            {"norm_seconds_per_step_before", mean_of(s.norm_seconds, 0, w)},
                            {"norm_seconds_per_step_after", mean_of(s.norm_seconds, w, s.norm_seconds.size())},
                            {"step_seconds_before", mean_of(s.step_seconds, 0, w)},
                            {"step_seconds_after", mean_of(s.step_seconds, w, s.step_seconds.size())}});
        }
      log.reports["timing"] = timing;
      return log;
    }
    case experiment_kind::theorem_check: {
      RunLog log;
      log.config = c;
      const auto t0 = std::chrono::steady_clock::now();
      TheoremCheckOptions o;
      o.n = c.theorem_n;
      o.seed = c.seeds.front();
      log.reports["theorems"] = verify_all(o);
      log.wall_seconds = elapsed(t0);
      return log;
    }
  }
  fail(errc::invalid_argument, "unhandled experiment");
}

}  // namespace driftlab
