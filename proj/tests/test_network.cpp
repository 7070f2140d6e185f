#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "driftlab/network.hpp"
#include "driftlab/theory.hpp"
#include "support.hpp"

using namespace driftlab;
using driftlab::testing::check_gradients;
using driftlab::testing::gaussian_matrix;

namespace {

NetworkConfig small(std::size_t d, std::size_t depth, ActivationKind act = make_relu(), NormKind norm = {}) {
  NetworkConfig c;
  c.input_dim = c.hidden_dim = c.output_dim = d;
  c.depth = depth;
  c.activation = act;
  c.norm = norm;
  return c;
}

NormKind passthrough_pc() {
  NormKind k = make_norm(norm_variant::percentile_centering, 1e-5, 0.5);
  k.pc_grad = pc_gradient::quantile_passthrough;
  return k;
}

}  // namespace

TEST(BuildNetwork, DepthFiveShapes) {
  NetworkConfig c = small(128, 5);
  RngStream rng(0);
  const Network net = build_network(c, rng);
  ASSERT_EQ(net.num_weight_layers(), 7u);
  EXPECT_EQ(net.stages().size(), 6u);
  for (std::size_t l = 0; l < 7; ++l) {
    EXPECT_EQ(net.weight(l).rows(), 128u);
    EXPECT_EQ(net.weight(l).cols(), 128u);
  }
}

TEST(BuildNetwork, DimsFollowConfig) {
  NetworkConfig c = small(8, 2);
  c.input_dim = 5;
  c.output_dim = 3;
  RngStream rng(0);
  const Network net = build_network(c, rng);
  EXPECT_EQ(net.weight(0).cols(), 5u);
  EXPECT_EQ(net.weight(0).rows(), 8u);
  EXPECT_EQ(net.weight(3).rows(), 3u);
  EXPECT_EQ(net.weight(3).cols(), 8u);
}

TEST(BuildNetwork, SameSeedSameParameters) {
  const NetworkConfig c = small(16, 3, make_relu(), make_norm(norm_variant::layer_norm));
  RngStream a(4), b(4);
  const Network n1 = build_network(c, a), n2 = build_network(c, b);
  ASSERT_EQ(n1.parameters().size(), n2.parameters().size());
  for (std::size_t i = 0; i < n1.parameters().size(); ++i) EXPECT_EQ(n1.parameters()[i].value, n2.parameters()[i].value);
}

TEST(BuildNetwork, NoBiasByDefault) {
  RngStream rng(1);
  const Network net = build_network(small(8, 3), rng);
  for (const auto& p : net.parameters()) EXPECT_NE(p.kind, param_kind::bias);
  NetworkConfig c = small(8, 3);
  c.bias = true;
  RngStream rng2(1);
  const Network nb = build_network(c, rng2);
  std::size_t biases = 0;
  for (const auto& p : nb.parameters()) biases += p.kind == param_kind::bias;
  EXPECT_EQ(biases, 5u);
}

TEST(BuildNetwork, KaimingStd) {
  RngStream rng(2);
  const Network net = build_network(small(256, 1), rng);
  const auto w = net.weight(1).values();
  double ss = 0.0;
  for (double v : w) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.size())), std::sqrt(2.0 / 256.0), 0.01 * std::sqrt(2.0 / 256.0) * 3);
}

TEST(BuildNetwork, InvalidConfigRejected) {
  RngStream rng(0);
  NetworkConfig c = small(8, 0);
  EXPECT_THROW(build_network(c, rng), error);
  c = small(8, 2);
  c.hidden_dim = 0;
  EXPECT_THROW(build_network(c, rng), error);
}

TEST(Forward, SingleLinearIdentity) {
  NetworkConfig c = small(4, 1);
  RngStream rng(0);
  Network net = build_network(c, rng);
  for (auto& p : net.mutable_parameters()) p.value = Matrix::identity(4);
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {0.5, 0.25, 2, 8}});
  const Matrix y = forward_trace(net, x, mode::eval, nullptr);
  EXPECT_EQ(y, x);
}

TEST(Forward, ZeroInputZeroOutput) {
  RngStream rng(0);
  Network net = build_network(small(16, 4), rng);
  const Matrix y = forward_trace(net, Matrix(3, 16), mode::eval, nullptr);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, DimensionMismatchRejected) {
  RngStream rng(0);
  Network net = build_network(small(8, 2), rng);
  EXPECT_THROW(forward_trace(net, Matrix(2, 7), mode::eval, nullptr), error);
}

TEST(Forward, SkipChangesOutputsKeepsShapes) {
  NetworkConfig c = small(12, 3);
  NetworkConfig cs = c;
  cs.skip = true;
  RngStream r1(5), r2(5), rx(6);
  Network a = build_network(c, r1), b = build_network(cs, r2);
  const Matrix x = gaussian_matrix(4, 12, rx);
  TrainingTrace ta, tb;
  const Matrix ya = forward_trace(a, x, mode::eval, &ta), yb = forward_trace(b, x, mode::eval, &tb);
  EXPECT_TRUE(ya.same_shape(yb));
  EXPECT_NE(ya, yb);
  for (std::size_t s = 0; s < ta.stages.size(); ++s) EXPECT_TRUE(ta.stages[s].pre.same_shape(tb.stages[s].pre));
}

TEST(Forward, Eq2ReconstructionEveryLayer) {
  RngStream rng(7);
  Network net = build_network(small(16, 4), rng);
  const Matrix x = gaussian_matrix(5, 16, rng);
  TrainingTrace t;
  forward_trace(net, x, mode::eval, &t);
  for (std::size_t l = 0; l < t.stages.size(); ++l) EXPECT_LT(eq2_max_relative_error(net, t, l), 1e-10);
}

TEST(Forward, NonFiniteActivationsRaiseNumericError) {
  NetworkConfig c = small(4, 2, make_activation(act_variant::relu_squared));
  RngStream rng(0);
  Network net = build_network(c, rng);
  for (auto& p : net.mutable_parameters()) p.value = Matrix(4, 4, 1e120);
  try {
    forward_trace(net, Matrix(1, 4, 1.0), mode::eval, nullptr);
    FAIL() << "expected numeric_error";
  } catch (const error& e) {
    EXPECT_EQ(e.code(), errc::numeric_error);
  }
}

TEST(Backward, ZeroLossGradGivesZeroGradients) {
  RngStream rng(3);
  Network net = build_network(small(8, 3, make_activation(act_variant::gelu), make_norm(norm_variant::layer_norm)), rng);
  TrainingTrace t;
  const Matrix f = forward_trace(net, gaussian_matrix(4, 8, rng), mode::train, &t);
  const Gradients g = backward_trace(net, t, Matrix(f.rows(), f.cols()));
  for (const auto& m : g.params)
    for (double v : m.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, StaleTraceRejected) {
  RngStream rng(3);
  Network net = build_network(small(8, 2), rng);
  TrainingTrace t;
  const Matrix f = forward_trace(net, gaussian_matrix(4, 8, rng), mode::train, &t);
  net.mutable_parameters()[0].value(0, 0) += 1.0;
  try {
    backward_trace(net, t, f);
    FAIL() << "expected state_error";
  } catch (const error& e) {
    EXPECT_EQ(e.code(), errc::state_error);
  }
}

TEST(Backward, TwoLayerReluFiniteDifferences) {
  const auto r = check_gradients(small(4, 1), 11, loss_kind::mse);
  EXPECT_LT(r.worst, 1e-5) << r.worst_param;
}

TEST(Backward, PreActivationGradientEqualsVeffChainRule) {
  RngStream rng(9);
  NetworkConfig c = small(10, 3);
  c.output_dim = 4;
  Network net = build_network(c, rng);
  const Matrix x = gaussian_matrix(1, 10, rng), y = gaussian_matrix(1, 4, rng);
  TrainingTrace t;
  const Matrix f = forward_trace(net, x, mode::train, &t);
  const LossResult lr = compute_loss(f, y, loss_kind::mse);
  const Gradients g = backward_trace(net, t, lr.grad);
  for (std::size_t l = 0; l < t.stages.size(); ++l) {
    const VeffSample v = build_v_eff(net, t, l);
    for (std::size_t i = 0; i < 10; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += v.v_eff(k, i) * lr.grad(0, k);
      const double expect = t.stages[l].pre(0, i) > 0.0 ? s : 0.0;
      EXPECT_NEAR(g.pre[l](0, i), expect, 1e-12);
    }
  }
}

TEST(Backward, AllPairsMatchFiniteDifferences) {
  const std::vector<ActivationKind> acts{make_relu(),
                                         make_activation(act_variant::gelu),
                                         make_activation(act_variant::silu),
                                         make_activation(act_variant::relu_squared),
                                         make_activation(act_variant::gelu_squared),
                                         make_clipped(act_variant::clipped_relu_squared, 15.0),
                                         make_clipped(act_variant::clipped_gelu_squared, 15.0)};
  const std::vector<NormKind> norms{NormKind{}, make_norm(norm_variant::layer_norm), make_norm(norm_variant::rms_norm),
                                    make_norm(norm_variant::batch_norm), passthrough_pc()};
  for (const auto& a : acts)
    for (const auto& n : norms)
      for (auto pos : {norm_position::pre_linear, norm_position::pre_activation}) {
        if (n.variant == norm_variant::none && pos == norm_position::pre_activation) continue;
        NetworkConfig c = small(8, 3, a, n);
        c.norm_pos = pos;
        const auto r = check_gradients(c, 21, loss_kind::mse);
        EXPECT_LT(r.worst, 1e-4) << to_string(a) << " / " << to_string(n.variant) << " pos "
                                 << static_cast<int>(pos) << " worst " << r.worst_param;
      }
}

TEST(Backward, SkipBiasTopKAndCrossEntropy) {
  NetworkConfig c = small(8, 3, make_activation(act_variant::gelu), make_norm(norm_variant::layer_norm));
  c.skip = true;
  c.bias = true;
  c.output_dim = 5;
  EXPECT_LT(check_gradients(c, 31, loss_kind::cross_entropy).worst, 1e-4);
  c.topk = TopKConfig{0.5, topk_granularity::per_row};
  EXPECT_LT(check_gradients(c, 32, loss_kind::mse_mean).worst, 1e-4);
}

TEST(Loss, MseZeroAtTarget) {
  const Matrix f = Matrix::from_rows({{1, 2}, {3, 4}});
  const LossResult r = compute_loss(f, f, loss_kind::mse);
  EXPECT_EQ(r.loss, 0.0);
  for (double v : r.grad.values()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, MseValueAndGradient) {
  const Matrix f = Matrix::from_rows({{1, 2}, {3, 5}}), y = Matrix::from_rows({{0, 2}, {3, 3}});
  const LossResult r = compute_loss(f, y, loss_kind::mse);
  EXPECT_DOUBLE_EQ(r.loss, 0.5 * (1.0 + 4.0) / 2.0);
  EXPECT_EQ(r.grad, Matrix::from_rows({{0.5, 0}, {0, 1}}));
}

TEST(Loss, CrossEntropyUniformLogits) {
  for (std::size_t c : {2u, 5u, 10u}) {
    const LossResult r = compute_loss(Matrix(3, c, 0.7), Matrix(3, 1), loss_kind::cross_entropy);
    EXPECT_NEAR(r.loss, std::log(static_cast<double>(c)), 1e-12);
  }
}

TEST(Loss, CrossEntropyGradientMatchesFiniteDifferences) {
  RngStream rng(5);
  const Matrix f = gaussian_matrix(3, 4, rng, 2.0);
  const Matrix y = Matrix::from_rows({{2}, {0}, {3}});
  const LossResult r = compute_loss(f, y, loss_kind::cross_entropy);
  for (std::size_t i = 0; i < f.size(); ++i) {
    Matrix fp = f, fm = f;
    fp.values()[i] += 1e-6;
    fm.values()[i] -= 1e-6;
    const double fd =
        (compute_loss(fp, y, loss_kind::cross_entropy).loss - compute_loss(fm, y, loss_kind::cross_entropy).loss) / 2e-6;
    EXPECT_NEAR(r.grad.values()[i], fd, 1e-8);
  }
}

TEST(Loss, OneHotAndIndexTargetsAgree) {
  RngStream rng(6);
  const Matrix f = gaussian_matrix(2, 3, rng);
  const LossResult a = compute_loss(f, Matrix::from_rows({{1}, {2}}), loss_kind::cross_entropy);
  const LossResult b = compute_loss(f, Matrix::from_rows({{0, 1, 0}, {0, 0, 1}}), loss_kind::cross_entropy);
  EXPECT_DOUBLE_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(Loss, ShapeMismatchRejected) {
  EXPECT_THROW(compute_loss(Matrix(2, 3), Matrix(2, 2), loss_kind::mse), error);
  EXPECT_THROW(compute_loss(Matrix(2, 3), Matrix::from_rows({{0}, {7}}), loss_kind::cross_entropy), error);
}

TEST(Network, SetActivationPreservesParameters) {
  RngStream rng(8);
  Network net = build_network(small(8, 2, make_activation(act_variant::gelu)), rng);
  const auto before = net.parameters();
  net.set_activation(make_relu());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value, net.parameters()[i].value);
  EXPECT_THROW(net.set_activation(make_activation(act_variant::noisy_relu)), error);
}
