#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "scoregrade/error.hpp"
#include "scoregrade/optim.hpp"

namespace scoregrade {
namespace {

using Td = Tensor<double>;

// Scalar Adam written out from the update rule.
struct ScalarAdam {
  double lr, b1, b2, eps, wd;
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g) {
    g += wd * theta;
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

TEST(AdamStep, ZeroGradientLeavesParamsUnchanged) {
  Td p({3}, {1, -2, 3}, true);
  std::vector<Td> params{p};
  AdamState<double> s(params, AdamHyper{});
  p.mutable_grad();
  adam_step(std::span<Td>(params), s);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), std::vector<double>({1, -2, 3}));
  EXPECT_EQ(s.step, 1u);
}

TEST(AdamStep, FirstStepWithUnitGradient) {
  Td p({1}, {0.5}, true);
  std::vector<Td> params{p};
  AdamState<double> s(params, AdamHyper{});
  p.mutable_grad()[0] = 1.0;
  adam_step(std::span<Td>(params), s);
  EXPECT_NEAR(p.data()[0] - 0.5, -1e-5, 1e-12);
}

TEST(AdamStep, TwoStepsMatchScalarReference) {
  AdamHyper h{1e-2, 0.8, 0.95, 1e-8, 0.1};
  ScalarAdam ref{h.learning_rate, h.beta1, h.beta2, h.epsilon, h.weight_decay};
  Td p({1}, {0.7}, true);
  std::vector<Td> params{p};
  AdamState<double> s(params, h);
  double theta = 0.7;
  for (double g : {0.3, -1.2}) {
    p.mutable_grad()[0] = g;
    adam_step(std::span<Td>(params), s);
    p.zero_grad();
    theta = ref.step(theta, g);
    EXPECT_NEAR(p.data()[0], theta, 1e-12);
  }
  EXPECT_EQ(s.step, 2u);
}

TEST(AdamStep, ZeroLearningRateIsIdentity) {
  Rng rng(1);
  auto p = testing::random_tensor<double>(rng, {4, 4});
  const std::vector<double> before(p.data().begin(), p.data().end());
  std::vector<Td> params{p};
  AdamHyper h;
  h.learning_rate = 0.0;
  AdamState<double> s(params, h);
  for (auto& g : p.mutable_grad()) g = rng.normal();
  adam_step(std::span<Td>(params), s);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), before);
}

TEST(AdamStep, MomentsStartAtZeroAndShapeMismatchThrows) {
  Td p({2, 2}, true);
  std::vector<Td> params{p};
  AdamState<double> s(params, AdamHyper{});
  ASSERT_EQ(s.m.size(), 1u);
  for (double v : s.m[0]) EXPECT_EQ(v, 0.0);
  for (double v : s.v[0]) EXPECT_EQ(v, 0.0);
  std::vector<Td> other{Td({3}, true)};
  EXPECT_THROW(adam_step(std::span<Td>(other), s), DimensionError);
}

TEST(ClipGradients, ScalesUnitNormExactly) {
  Td p({2}, true);
  p.mutable_grad()[0] = 0.6;
  p.mutable_grad()[1] = 0.8;
  std::vector<Td> params{p};
  const double before = clip_gradients(std::span<Td>(params), 1e-4);
  EXPECT_NEAR(before, 1.0, 1e-15);
  EXPECT_NEAR(p.grad()[0], 0.6e-4, 1e-18);
  EXPECT_NEAR(p.grad()[1], 0.8e-4, 1e-18);
}

TEST(ClipGradients, ZeroGradientsUnchanged) {
  Td p({3}, true);
  p.mutable_grad();
  std::vector<Td> params{p};
  EXPECT_EQ(clip_gradients(std::span<Td>(params), 1.0), 0.0);
  for (double g : p.grad()) EXPECT_EQ(g, 0.0);
}

TEST(ClipGradients, RandomGradientsEndWithinBound) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor<float>> params{Tensor<float>({5}, true), Tensor<float>({2, 3}, true)};
    for (auto& p : params) {
      for (auto& g : p.mutable_grad()) g = static_cast<float>(rng.normal() * 10);
    }
    const double max_norm = rng.uniform(1e-5, 2.0);
    clip_gradients(std::span<Tensor<float>>(params), max_norm);
    double sq = 0;
    for (auto& p : params) {
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    EXPECT_LE(std::sqrt(sq), max_norm + 1e-7);
  }
}

TEST(ClipGradients, WithinBoundIsNoOpAndDirectionPreserved) {
  Td p({2}, true);
  p.mutable_grad()[0] = 0.3;
  p.mutable_grad()[1] = -0.4;
  std::vector<Td> params{p};
  clip_gradients(std::span<Td>(params), 1.0);
  EXPECT_EQ(p.grad()[0], 0.3);
  EXPECT_EQ(p.grad()[1], -0.4);
  clip_gradients(std::span<Td>(params), 0.1);
  EXPECT_NEAR(p.grad()[0] / p.grad()[1], -0.75, 1e-15);
  EXPECT_THROW(clip_gradients(std::span<Td>(params), 0.0), ContractError);
}

TEST(L2Gradient, AddsScaledParameters) {
  Td p({2}, {2.0, -4.0}, true);
  std::vector<Td> params{p};
  add_l2_gradient(std::span<Td>(params), 0.5);
  EXPECT_EQ(p.grad()[0], 1.0);
  EXPECT_EQ(p.grad()[1], -2.0);
}

}  // namespace
}  // namespace scoregrade
