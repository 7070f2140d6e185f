#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "driftlab/optim.hpp"

using namespace driftlab;

namespace {

std::vector<Parameter> one_param(double w, std::size_t n = 1) { return {{"w", param_kind::weight, 0, Matrix(1, n, w)}}; }
std::vector<Matrix> one_grad(double g, std::size_t n = 1) { return {Matrix(1, n, g)}; }

OptimizerState make(opt_kind k, double lr, double wd = 0.0) {
  OptimizerConfig c;
  c.kind = k;
  c.lr = lr;
  c.wd = wd;
  return OptimizerState(c);
}

}  // namespace

TEST(Sgd, SingleStep) {
  auto p = one_param(1.0);
  auto st = make(opt_kind::sgd, 0.1);
  optimizer_step(st, p, one_grad(0.5));
  EXPECT_DOUBLE_EQ(p[0].value(0, 0), 0.95);
}

TEST(Momentum, TwoConstantSteps) {
  auto p = one_param(0.0);
  auto st = make(opt_kind::momentum, 0.1);
  optimizer_step(st, p, one_grad(1.0));
  EXPECT_NEAR(p[0].value(0, 0), -0.1, 1e-15);
  optimizer_step(st, p, one_grad(1.0));
  EXPECT_NEAR(p[0].value(0, 0), -0.1 - 0.19, 1e-15);
}

TEST(Adam, FirstStepIsLr) {
  auto p = one_param(2.0, 4);
  auto st = make(opt_kind::adam, 1e-3);
  optimizer_step(st, p, one_grad(1.0, 4));
  for (double w : p[0].value.values()) EXPECT_NEAR(2.0 - w, 1e-3 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, FirstStepScaleInvariant) {
  for (double g : {1e-4, 3.0, -50.0}) {
    auto p = one_param(0.0);
    auto st = make(opt_kind::adam, 0.01);
    optimizer_step(st, p, one_grad(g));
    EXPECT_NEAR(std::abs(p[0].value(0, 0)), 0.01, 1e-6);
  }
}

TEST(AdamW, DecayIsDecoupled) {
  auto p = one_param(1.0);
  auto st = make(opt_kind::adamw, 0.1, 0.5);
  optimizer_step(st, p, one_grad(0.0));
  EXPECT_DOUBLE_EQ(p[0].value(0, 0), 1.0 - 0.1 * 0.5);
}

TEST(Adam, CoupledDecayEntersGradient) {
  auto p = one_param(1.0);
  auto st = make(opt_kind::adam, 0.1, 0.5);
  optimizer_step(st, p, one_grad(0.0));
  // effective gradient wd * w = 0.5 > 0, normalized to a step of lr
  EXPECT_NEAR(p[0].value(0, 0), 0.9, 1e-7);
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  for (auto k : {opt_kind::sgd, opt_kind::momentum, opt_kind::adam}) {
    auto p = one_param(0.75, 3);
    auto st = make(k, 0.1);
    for (int i = 0; i < 3; ++i) optimizer_step(st, p, one_grad(0.0, 3));
    for (double w : p[0].value.values()) EXPECT_EQ(w, 0.75);
  }
}

TEST(Optimizer, NonFiniteGradientLeavesParameters) {
  std::vector<Parameter> p{{"a", param_kind::weight, 0, Matrix(1, 2, 1.0)}, {"b", param_kind::weight, 1, Matrix(1, 2, 2.0)}};
  std::vector<Matrix> g{Matrix(1, 2, 1.0), Matrix(1, 2, 1.0)};
  g[1](0, 1) = std::numeric_limits<double>::infinity();
  auto st = make(opt_kind::momentum, 0.1);
  try {
    optimizer_step(st, p, g);
    FAIL() << "expected numeric_error";
  } catch (const error& e) {
    EXPECT_EQ(e.code(), errc::numeric_error);
  }
  EXPECT_EQ(p[0].value, Matrix(1, 2, 1.0));
  EXPECT_EQ(p[1].value, Matrix(1, 2, 2.0));
  EXPECT_EQ(st.step, 0u);
}

TEST(Optimizer, ShapeMismatchRejected) {
  auto p = one_param(1.0, 2);
  auto st = make(opt_kind::sgd, 0.1);
  EXPECT_THROW(optimizer_step(st, p, one_grad(1.0, 3)), error);
}

TEST(Optimizer, ConfigValidation) {
  OptimizerConfig c;
  c.lr = 0.0;
  EXPECT_THROW(OptimizerState{c}, error);
  c.lr = 0.1;
  c.beta2 = 1.0;
  c.kind = opt_kind::adam;
  EXPECT_THROW(OptimizerState{c}, error);
  EXPECT_EQ(parse_optimizer("adamw"), opt_kind::adamw);
  EXPECT_THROW(parse_optimizer("lion"), error);
}
