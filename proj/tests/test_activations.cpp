#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "driftlab/activations.hpp"
#include "driftlab/instrumentation.hpp"

using namespace driftlab;

namespace {

Matrix scalar_matrix(double x) { return Matrix(1, 1, x); }

double fwd(const ActivationKind& k, double x) {
  RngStream rng(0);
  return act_forward(k, scalar_matrix(x), rng)(0, 0);
}

double bwd(const ActivationKind& k, double x) { return act_backward(k, scalar_matrix(x), scalar_matrix(1.0))(0, 0); }

double central_diff(const ActivationKind& k, double x, double h = 1e-5) {
  return (fwd(k, x + h) - fwd(k, x - h)) / (2.0 * h);
}

}  // namespace

TEST(Activation, ReluSquaredValues) {
  const auto k = make_activation(act_variant::relu_squared);
  EXPECT_EQ(fwd(k, 3.0), 9.0);
  EXPECT_EQ(fwd(k, -2.0), 0.0);
}

TEST(Activation, ClippedReluSquaredClamps) {
  const auto k = make_clipped(act_variant::clipped_relu_squared, 15.0);
  EXPECT_EQ(fwd(k, 4.0), 15.0);
  EXPECT_EQ(fwd(k, 3.0), 9.0);
  EXPECT_EQ(bwd(k, 4.0), 0.0);
  EXPECT_EQ(bwd(k, 3.0), 6.0);
}

TEST(Activation, ClippedNeverExceedsThreshold) {
  RngStream rng(4);
  Matrix x(50, 40);
  for (double& v : x.values()) v = 20.0 * rng.normal();
  for (double t : {15.0, 50.0}) {
    for (auto var : {act_variant::clipped_relu_squared, act_variant::clipped_gelu_squared}) {
      const Matrix y = act_forward(make_clipped(var, t), x, rng);
      for (double v : y.values()) EXPECT_LE(v, t);
    }
  }
}

TEST(Activation, GeluAtZeroAndFiniteDifference) {
  const auto k = make_activation(act_variant::gelu);
  EXPECT_EQ(fwd(k, 0.0), 0.0);
  EXPECT_NEAR(bwd(k, 1.3), central_diff(k, 1.3), 1e-6);
}

TEST(Activation, GeluUsesErfForm) {
  const auto k = make_activation(act_variant::gelu);
  const double x = 1.0;
  EXPECT_NEAR(fwd(k, x), 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(fwd(k, x), 0.8413447460685429, 1e-15);
}

TEST(Activation, SugarBackwardAtZero) {
  const auto k = make_activation(act_variant::sugar_bsilu);
  EXPECT_NEAR(bwd(k, 0.0), 0.5 + 1.67 * 0.5 * 0.5, 1e-12);
  EXPECT_NEAR(bwd(k, 0.0), 0.9175, 1e-12);
}

TEST(Activation, SugarForwardIsReluBitwise) {
  RngStream rng(8);
  Matrix x(30, 30);
  for (double& v : x.values()) v = 3.0 * rng.normal();
  x(0, 0) = 0.0;
  x(0, 1) = -0.0;
  EXPECT_EQ(act_forward(make_activation(act_variant::sugar_bsilu), x, rng), act_forward(make_relu(), x, rng));
}

TEST(Activation, SugarBackwardIsSurrogateEverywhere) {
  const auto k = make_activation(act_variant::sugar_bsilu);
  for (double x : {-4.0, -1.0, -0.1, 0.3, 2.0, 6.0}) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    EXPECT_NEAR(bwd(k, x), s + (x + 1.67) * s * (1.0 - s), 1e-12);
  }
  EXPECT_GT(bwd(k, -2.0), 0.0);  // differs from the ReLU derivative below zero
}

TEST(Activation, ReluDerivativeConvention) {
  const auto k = make_relu();
  EXPECT_EQ(bwd(k, -5.0), 0.0);
  EXPECT_EQ(bwd(k, 0.0), 0.0);
  EXPECT_EQ(bwd(k, 2.0), 1.0);
  EXPECT_EQ(act_backward(k, scalar_matrix(-5.0), scalar_matrix(123.0))(0, 0), 0.0);
}

TEST(Activation, NoisyReluEvalEqualsRelu) {
  ActivationKind k = make_activation(act_variant::noisy_relu);
  k.run_mode = mode::eval;
  RngStream rng(2);
  Matrix x(20, 20);
  for (double& v : x.values()) v = rng.normal();
  EXPECT_EQ(act_forward(k, x, rng, 0.7), act_forward(make_relu(), x, rng));
}

TEST(Activation, NoisyReluTrainNoiseIsNonNegative) {
  ActivationKind k = make_activation(act_variant::noisy_relu);
  RngStream rng(3);
  Matrix x(40, 40);
  for (double& v : x.values()) v = rng.normal();
  const Matrix y = act_forward(k, x, rng, 1.5);
  const Matrix r = act_forward(make_relu(), x, rng);
  bool some_noise = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_GE(y.values()[i], r.values()[i]);
    if (x.values()[i] >= 0.0) {
      EXPECT_EQ(y.values()[i], r.values()[i]);
    }
    some_noise = some_noise || y.values()[i] > r.values()[i];
  }
  EXPECT_TRUE(some_noise);
}

TEST(Activation, NoisyReluVGradientMatchesFiniteDifference) {
  ActivationKind k = make_activation(act_variant::noisy_relu);
  RngStream rng(5);
  Matrix x(6, 6), up(6, 6);
  for (double& v : x.values()) v = 2.0 * rng.normal();
  for (double& v : up.values()) v = rng.normal();
  const double v0 = 0.8, h = 1e-6;
  RngStream r1(77), r2(77), r3(77);
  const ActForward base = act_forward_cached(k, x, r1, v0);
  const Matrix yp = act_forward(k, x, r2, v0 + h), ym = act_forward(k, x, r3, v0 - h);
  double fd = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) fd += up.values()[i] * (yp.values()[i] - ym.values()[i]) / (2 * h);
  EXPECT_NEAR(noisy_v_grad(k, x, base.noise, up, v0), fd, 1e-7);
}

TEST(Activation, SmoothVariantsMatchFiniteDifferences) {
  std::vector<ActivationKind> kinds{make_activation(act_variant::gelu), make_activation(act_variant::silu),
                                    make_activation(act_variant::gelu_squared),
                                    make_activation(act_variant::relu_squared),
                                    make_clipped(act_variant::clipped_relu_squared, 15.0),
                                    make_clipped(act_variant::clipped_gelu_squared, 15.0)};
  RngStream rng(42);
  for (const auto& k : kinds) {
    int checked = 0;
    while (checked < 100) {
      const double x = -5.0 + 10.0 * rng.uniform();
      if (std::abs(x) < 1e-3) continue;
      const double y = fwd(k, x);
      if (k.threshold > 0.0 && std::abs(y - k.threshold) < 1e-3) continue;
      if (k.threshold > 0.0 && std::abs(std::sqrt(std::abs(x * x)) - std::sqrt(k.threshold)) < 1e-3) continue;
      EXPECT_NEAR(bwd(k, x), central_diff(k, x), 1e-6) << to_string(k) << " at " << x;
      ++checked;
    }
  }
}

TEST(Activation, ParseRoundTrip) {
  for (const char* name : {"relu", "gelu", "silu", "relu2", "gelu2", "relu2_clip15", "gelu2_clip50", "noisy_relu",
                           "sugar_bsilu"}) {
    EXPECT_EQ(to_string(parse_activation(name)), name);
  }
  EXPECT_EQ(parse_activation("relu2_clip50").threshold, 50.0);
  EXPECT_EQ(parse_activation("sugar_bsilu").alpha, 1.67);
  EXPECT_THROW(parse_activation("tanh"), error);
  EXPECT_THROW(parse_activation("relu2_clip-3"), error);
}

TEST(Activation, ValidateRejectsBadParameters) {
  ActivationKind k = make_activation(act_variant::noisy_relu);
  k.alpha = 1.5;
  EXPECT_THROW(validate(k), error);
  k.alpha = 1.0;
  k.c = 0.0;
  EXPECT_THROW(validate(k), error);
  EXPECT_THROW(make_clipped(act_variant::clipped_relu_squared, 0.0), error);
}

TEST(Activation, NonFiniteInputRejected) {
  RngStream rng(0);
  EXPECT_THROW(act_forward(make_relu(), scalar_matrix(std::nan("")), rng), error);
  EXPECT_THROW(act_backward(make_relu(), Matrix(2, 2), Matrix(2, 3)), error);
}

TEST(TopK, FullRetentionIsIdentity) {
  const Matrix y = Matrix::from_rows({{3, -1, 0.5, 2}, {0, 1, -2, 4}});
  const auto [out, mask] = topk_apply(y, {1.0, topk_granularity::per_row});
  EXPECT_EQ(out, y);
  for (double m : mask.values()) EXPECT_EQ(m, 1.0);
}

TEST(TopK, KeepsLargestMagnitudes) {
  const Matrix y = Matrix::from_rows({{3, -1, 0.5, 2}});
  const auto [out, mask] = topk_apply(y, {0.5, topk_granularity::per_row});
  EXPECT_EQ(out, Matrix::from_rows({{3, 0, 0, 2}}));
  EXPECT_EQ(mask, Matrix::from_rows({{1, 0, 0, 1}}));
}

TEST(TopK, TiesGoToLowerIndex) {
  const Matrix y = Matrix::from_rows({{1, -1, 1, 1}});
  const auto [out, mask] = topk_apply(y, {0.5, topk_granularity::per_row});
  EXPECT_EQ(mask, Matrix::from_rows({{1, 1, 0, 0}}));
}

TEST(TopK, KeptCountAndSparsityExact) {
  RngStream rng(6);
  Matrix y(16, 40);
  for (double& v : y.values()) v = rng.normal();
  for (double k : {0.1, 0.25, 0.33, 0.75}) {
    const std::size_t keep = static_cast<std::size_t>(std::ceil(k * 40 - 1e-12));
    const auto [out, mask] = topk_apply(y, {k, topk_granularity::per_row});
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double kept = 0.0;
      for (double m : mask.row(r)) kept += m;
      EXPECT_EQ(kept, static_cast<double>(keep));
    }
    EXPECT_DOUBLE_EQ(sparsity(out), 1.0 - static_cast<double>(keep) / 40.0);
  }
}

TEST(TopK, PerTensorGranularity) {
  const Matrix y = Matrix::from_rows({{1, 5}, {4, 2}});
  const auto [out, mask] = topk_apply(y, {0.5, topk_granularity::per_tensor});
  EXPECT_EQ(out, Matrix::from_rows({{0, 5}, {4, 0}}));
}

TEST(TopK, CountRounding) {
  EXPECT_EQ(topk_count(0.7, 10), 7u);
  EXPECT_EQ(topk_count(0.25, 4), 1u);
  EXPECT_EQ(topk_count(0.26, 4), 2u);
  EXPECT_EQ(topk_count(0.001, 4), 1u);
  EXPECT_THROW(topk_count(0.0, 4), error);
  EXPECT_THROW(topk_count(1.1, 4), error);
}
