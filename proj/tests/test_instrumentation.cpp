#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "driftlab/activations.hpp"
#include "driftlab/instrumentation.hpp"
#include "support.hpp"

using namespace driftlab;
using driftlab::testing::gaussian_matrix;

namespace {

Network make_net(std::uint64_t seed) {
  NetworkConfig c;
  c.input_dim = c.hidden_dim = c.output_dim = 64;
  c.depth = 2;
  RngStream rng(seed);
  return build_network(c, rng);
}

}  // namespace

TEST(Zscore, UnchangedWeightsGiveZero) {
  const Network net = make_net(1);
  const WeightSnapshot s = capture_snapshot(net);
  for (double z : zscore_drift(s, net)) EXPECT_EQ(z, 0.0);
}

TEST(Zscore, ShiftByOneStdGivesOne) {
  Network net = make_net(2);
  const WeightSnapshot s = capture_snapshot(net);
  for (std::size_t l = 0; l < net.num_weight_layers(); ++l)
    for (double& v : net.mutable_parameters()[net.weight_index(l)].value.values()) v += s.stds[l];
  for (double z : zscore_drift(s, net)) EXPECT_NEAR(z, 1.0, 1e-12);
}

TEST(Zscore, GaussianPerturbationIsHalfNormalMean) {
  Network net = make_net(3);
  const WeightSnapshot s = capture_snapshot(net);
  RngStream rng(4);
  const double eps = 0.2;
  for (std::size_t l = 0; l < net.num_weight_layers(); ++l)
    for (double& v : net.mutable_parameters()[net.weight_index(l)].value.values()) v += eps * s.stds[l] * rng.normal();
  const double expect = eps * std::sqrt(2.0 / std::numbers::pi);
  // 4096 weights per layer: SE of |N| mean is sqrt(1 - 2/pi)/64
  for (double z : zscore_drift(s, net)) EXPECT_NEAR(z, expect, 4.0 * eps * 0.6028 / 64.0);
}

TEST(Zscore, DegenerateInitIsStateError) {
  Network net = make_net(5);
  for (auto& p : net.mutable_parameters()) p.value = Matrix(p.value.rows(), p.value.cols(), 0.5);
  const WeightSnapshot s = capture_snapshot(net);
  EXPECT_THROW(zscore_drift(s, net), error);
}

TEST(NegFraction, Examples) {
  EXPECT_EQ(neg_fraction(Matrix(3, 3, 2.0)), 0.0);
  EXPECT_EQ(neg_fraction(Matrix::from_rows({{-1, 1}})), 0.5);
  RngStream rng(6);
  EXPECT_NEAR(neg_fraction(gaussian_matrix(1000, 1000, rng)), 0.5, 0.002);
  EXPECT_THROW(neg_fraction(Matrix()), error);
}

TEST(NegFraction, ComplementUnderNegation) {
  RngStream rng(7);
  const Matrix x = gaussian_matrix(33, 17, rng);
  Matrix neg = x;
  for (double& v : neg.values()) v = -v;
  EXPECT_DOUBLE_EQ(neg_fraction(x) + neg_fraction(neg), 1.0);
}

TEST(Sparsity, Examples) {
  RngStream rng(8);
  const Matrix neg(10, 10, -1.0);
  EXPECT_EQ(sparsity(act_forward(make_relu(), neg, rng)), 1.0);
  EXPECT_LT(sparsity(act_forward(make_activation(act_variant::gelu), gaussian_matrix(200, 200, rng), rng)), 0.01);
  const auto [out, mask] = topk_apply(gaussian_matrix(8, 64, rng), {0.25, topk_granularity::per_row});
  EXPECT_DOUBLE_EQ(sparsity(out), 0.75);
}

TEST(Sparsity, MonotoneInEps) {
  RngStream rng(9);
  Matrix x = gaussian_matrix(50, 50, rng);
  for (double& v : x.values()) v *= 1e-5 * std::abs(v);
  double prev = 1.0;
  for (double eps : {1e-2, 1e-4, 1e-6, 1e-7, 1e-9, 1e-12}) {
    const double s = sparsity(x, eps);
    EXPECT_LE(s, prev);
    prev = s;
  }
}

TEST(CovTerm, ConstantGradientGivesZero) {
  RngStream rng(10);
  const CovTerm c = cov_term(Matrix(20, 4, 0.3), gaussian_matrix(20, 5, rng));
  EXPECT_NEAR(c.signed_mean, 0.0, 1e-15);
  EXPECT_NEAR(c.abs_mean, 0.0, 1e-15);
}

TEST(CovTerm, IndependentInputsAreSmall) {
  RngStream rng(11);
  const CovTerm c = cov_term(gaussian_matrix(10000, 3, rng), gaussian_matrix(10000, 3, rng));
  EXPECT_LT(c.abs_mean, 3.0 / std::sqrt(10000.0));
}

TEST(CovTerm, MatchesHandComputation) {
  const Matrix g = Matrix::from_rows({{1}, {2}, {3}}), x = Matrix::from_rows({{2}, {4}, {9}});
  // means 2 and 5; products (-1)(-3) + 0 + (1)(4) = 7; unbiased / 2
  EXPECT_DOUBLE_EQ(cov_term(g, x).signed_mean, 3.5);
}

TEST(CovTerm, SmallBatchRejected) {
  EXPECT_THROW(cov_term(Matrix(1, 2), Matrix(1, 2)), error);
  EXPECT_THROW(cov_term(Matrix(3, 2), Matrix(4, 2)), error);
}

TEST(InputRange, Examples) {
  const Range c = input_range(Matrix(2, 2, 3.0));
  EXPECT_EQ(c.span(), 0.0);
  const Range r = input_range(Matrix::from_rows({{-2, 5}}));
  EXPECT_EQ(r.max, 5.0);
  EXPECT_EQ(r.min, -2.0);
  EXPECT_EQ(r.span(), 7.0);
  RngStream rng(12);
  EXPECT_GE(input_range(act_forward(make_relu(), gaussian_matrix(30, 30, rng), rng)).min, 0.0);
}

TEST(Metrics, PureFunctions) {
  RngStream rng(13);
  const Matrix x = gaussian_matrix(40, 40, rng);
  EXPECT_EQ(neg_fraction(x), neg_fraction(x));
  EXPECT_EQ(sparsity(x), sparsity(x));
  EXPECT_EQ(cov_term(x, x).abs_mean, cov_term(x, x).abs_mean);
}

TEST(Metrics, NameRoundTrip) {
  for (metric_kind k : all_metrics) EXPECT_EQ(parse_metric(to_string(k)), k);
  EXPECT_THROW(parse_metric("bogus"), error);
}
