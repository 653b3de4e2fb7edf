#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "scoregrade/error.hpp"
#include "scoregrade/tensor.hpp"

namespace scoregrade {
namespace {

using testing::random_tensor;
using Td = Tensor<double>;
using Fn = std::function<Td(const std::vector<Td>&)>;

constexpr double kGradTol64 = 1e-5;

void expect_grad_ok(const Fn& f, std::vector<Td> point, double tol = kGradTol64) {
  const auto r = finite_diff_check<double>(f, std::move(point), 1e-6);
  EXPECT_LE(r.max_rel_error, tol) << "input " << r.worst_input << " index " << r.worst_index << " analytic "
                                  << r.analytic << " numeric " << r.numeric;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Td eye({2, 2}, {1, 0, 0, 1});
  Td m({2, 2}, {3.5, -1, 2, 7});
  auto out = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), std::vector<double>({3.5, -1, 2, 7}));
}

TEST(Matmul, HandSum) {
  auto out = matmul(Td({2, 2}, {1, 2, 3, 4}), Td({2, 1}, {1, 1}));
  ASSERT_EQ(out.shape(), Shape({2, 1}));
  EXPECT_EQ(out.at(0, 0), 3);
  EXPECT_EQ(out.at(1, 0), 7);
}

TEST(Matmul, InnerMismatchIsDimensionError) {
  EXPECT_THROW(matmul(Td({2, 3}), Td({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumMatchesCentralDifferences) {
  Rng rng(1);
  auto a = random_tensor<double>(rng, {5, 7});
  auto b = random_tensor<double>(rng, {7, 3});
  const auto r = finite_diff_check<double>([](const std::vector<Td>& x) { return sum(matmul(x[0], x[1])); }, {a, b},
                                           1e-3);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(Matmul, RecordsGraphOnlyWhenAnInputRequiresGrad) {
  Td a({1, 1}, std::vector<double>{2.0});
  Td b({1, 1}, std::vector<double>{3.0});
  EXPECT_TRUE(matmul(a, b).is_leaf());
  Td c({1, 1}, {3.0}, true);
  EXPECT_FALSE(matmul(a, c).is_leaf());
  NoGradGuard guard;
  EXPECT_TRUE(matmul(a, c).is_leaf());
}

TEST(Softmax, UniformInput) {
  auto out = softmax_lastdim(Td({1, 3}, {0, 0, 0}));
  for (double v : out.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  auto out = softmax_lastdim(Tensor<float>({1, 2}, {1000.0f, 0.0f}));
  EXPECT_FLOAT_EQ(out.at(0, 0), 1.0f);
  EXPECT_GE(out.at(0, 1), 0.0f);
  EXPECT_FALSE(std::isnan(out.at(0, 1)));
}

TEST(Softmax, RowsSumToOneAndArePositive) {
  Rng rng(2);
  auto out = softmax_lastdim(random_tensor<float>(rng, {4, 6}, 3.0));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_GT(out.at(r, c), 0.0f);
      s += out.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  auto out = layer_norm(Td({1, 4}, {2, 2, 2, 2}), Td({4}, {1, 1, 1, 1}), Td({4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoPointStandardization) {
  auto out = layer_norm(Td({1, 2}, {1, 3}), Td({2}, {1, 1}), Td({2}));
  EXPECT_NEAR(out.at(0, 0), -1.0, 1e-4);
  EXPECT_NEAR(out.at(0, 1), 1.0, 1e-4);
}

TEST(LayerNorm, GradientCheck) {
  Rng rng(3);
  expect_grad_ok(
      [](const std::vector<Td>& x) {
        auto y = layer_norm(x[0], x[1], x[2]);
        return sum(mul(y, y));
      },
      {random_tensor<double>(rng, {3, 8}), random_tensor<double>(rng, {8}), random_tensor<double>(rng, {8})});
}

TEST(Conv1dCausal, KernelOneEqualsMatmul) {
  Rng rng(4);
  auto x = random_tensor<double>(rng, {5, 3}, 1.0, false);
  auto k = random_tensor<double>(rng, {1, 3, 2}, 1.0, false);
  auto out = conv1d_causal(x, k, Td({2}));
  auto ref = matmul(x, Td({3, 2}, std::vector<double>(k.data().begin(), k.data().end())));
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], ref.data()[i]);
}

TEST(Conv1dCausal, ImpulseSupport) {
  Td x({6, 1});
  x.mutable_data()[0] = 1.0;
  auto out = conv1d_causal(x, Td({3, 1, 1}, {1, 1, 1}), Td({1}));
  for (std::size_t t = 0; t < 6; ++t) {
    if (t <= 2) {
      EXPECT_NE(out.at(t, 0), 0.0) << t;
    } else {
      EXPECT_EQ(out.at(t, 0), 0.0) << t;
    }
  }
}

TEST(Conv1dCausal, StrictCausalityUnderPerturbation) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor<float>(rng, {6, 4}, 1.0, false);
    auto k = random_tensor<float>(rng, {3, 4, 5}, 1.0, false);
    auto b = random_tensor<float>(rng, {5}, 1.0, false);
    const auto t = static_cast<std::size_t>(rng.below(6));
    auto before = conv1d_causal(x, k, b);
    auto y = Tensor<float>(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
    y.mutable_data()[t * 4 + rng.below(4)] += 1.5f;
    auto after = conv1d_causal(y, k, b);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(before.at(r, c), after.at(r, c));
    }
  }
}

TEST(Conv1dCausal, SegmentsDoNotLeak) {
  Rng rng(6);
  auto x = random_tensor<double>(rng, {7, 2}, 1.0, false);
  auto k = random_tensor<double>(rng, {3, 2, 2}, 1.0, false);
  const std::size_t segs[] = {4, 3};
  auto joint = conv1d_causal(x, k, Td({2}), segs);
  auto tail = conv1d_causal(
      Td({3, 2}, std::vector<double>(x.data().begin() + 8, x.data().end())), k, Td({2}));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(joint.at(4 + r, c), tail.at(r, c));
  }
}

TEST(EmbeddingLookup, GathersRows) {
  Td table({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::size_t ids[] = {0};
  auto out = embedding_lookup(table, ids);
  EXPECT_EQ(out.at(0, 0), 1);
  EXPECT_EQ(out.at(0, 1), 2);
}

TEST(EmbeddingLookup, RepeatedIdsAccumulate) {
  Td table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::size_t ids[] = {1, 1, 2};
  backward(sum(embedding_lookup(table, ids)));
  const std::vector<double> expected = {0, 0, 2, 2, 1, 1};
  EXPECT_EQ(std::vector<double>(table.grad().begin(), table.grad().end()), expected);
}

TEST(EmbeddingLookup, OutOfRangeIsIndexError) {
  Td table({3, 2});
  const std::size_t ids[] = {3};
  EXPECT_THROW(embedding_lookup(table, ids), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Td x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareAtThree) {
  auto x = Td::scalar(3.0, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Td x({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, ReExecutedGraphIsBitIdentical) {
  Rng rng(7);
  auto a = random_tensor<float>(rng, {4, 5});
  auto b = random_tensor<float>(rng, {5, 3});
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    backward(mean(gelu(matmul(a, b))));
    return std::vector<float>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, QuadraticForm) {
  Rng rng(8);
  auto m = random_tensor<double>(rng, {4, 4}, 1.0, false);
  auto r = finite_diff_check<double>(
      [&](const std::vector<Td>& x) { return sum(mul(matmul(x[0], m), x[0])); },
      {random_tensor<double>(rng, {1, 4})}, 1e-4);
  EXPECT_LE(r.max_rel_error, 1e-8);
}

TEST(FiniteDiff, LinearMapIsExact) {
  Rng rng(9);
  auto m = random_tensor<double>(rng, {4, 3}, 1.0, false);
  auto r = finite_diff_check<double>([&](const std::vector<Td>& x) { return sum(matmul(x[0], m)); },
                                     {random_tensor<double>(rng, {2, 4})}, 1e-3);
  EXPECT_LE(r.max_rel_error, 1e-10);
}

// Every differentiable primitive at random points, 64-bit.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  const std::size_t segs[] = {3, 2};
  const std::size_t ids[] = {2, 0, 2, 1};
  const double positions[] = {0.0, 0.4, 1.5, 2.0};
  std::vector<Td> targets = {Td({5, 3})};
  for (auto& v : targets[0].mutable_data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const std::size_t classes[] = {0, 2, 1, 2, 0};

  expect_grad_ok([](auto& x) { return sum(mul(add(x[0], x[1]), x[1])); },
                 {random_tensor<double>(rng, {3, 4}), random_tensor<double>(rng, {3, 4})});
  expect_grad_ok([](auto& x) { return sum(mul(scale(add_bias(x[0], x[1]), 1.7), x[0])); },
                 {random_tensor<double>(rng, {3, 4}), random_tensor<double>(rng, {4})});
  expect_grad_ok([](auto& x) { return mean(mul(gelu(x[0]), x[0])); }, {random_tensor<double>(rng, {3, 5})});
  expect_grad_ok([](auto& x) { return sum(mul(softmax_lastdim(x[0]), x[1])); },
                 {random_tensor<double>(rng, {3, 5}), random_tensor<double>(rng, {3, 5}, 1.0, false)});
  expect_grad_ok([&](auto& x) { return sum(mul(conv1d_causal(x[0], x[1], x[2], segs), x[3])); },
                 {random_tensor<double>(rng, {5, 3}), random_tensor<double>(rng, {2, 3, 4}),
                  random_tensor<double>(rng, {4}), random_tensor<double>(rng, {5, 4}, 1.0, false)});
  expect_grad_ok([&](auto& x) { return sum(mul(embedding_lookup(x[0], ids), x[1])); },
                 {random_tensor<double>(rng, {3, 4}), random_tensor<double>(rng, {4, 4}, 1.0, false)});
  expect_grad_ok([&](auto& x) { return sum(mul(lerp_rows(x[0], positions), x[1])); },
                 {random_tensor<double>(rng, {3, 4}), random_tensor<double>(rng, {4, 4}, 1.0, false)});
  expect_grad_ok([](auto& x) { return sum(mul(concat_rows(x[0], x[1]), concat_rows(x[1], x[0]))); },
                 {random_tensor<double>(rng, {2, 3}), random_tensor<double>(rng, {2, 3})});
  expect_grad_ok([](auto& x) { return sum(mul(slice_cols(x[0], 1, 2), slice_cols(x[0], 2, 2))); },
                 {random_tensor<double>(rng, {3, 5})});
  expect_grad_ok([&](auto& x) { return sum(mul(segment_mean_rows(x[0], segs), x[1])); },
                 {random_tensor<double>(rng, {5, 3}), random_tensor<double>(rng, {2, 3}, 1.0, false)});
  expect_grad_ok(
      [&](auto& x) { return sum(mul(causal_attention(x[0], x[1], x[2], segs, 2), x[3])); },
      {random_tensor<double>(rng, {5, 4}), random_tensor<double>(rng, {5, 4}), random_tensor<double>(rng, {5, 4}),
       random_tensor<double>(rng, {5, 4}, 1.0, false)});
  expect_grad_ok([&](auto& x) { return cross_entropy(x[0], classes); }, {random_tensor<double>(rng, {5, 3})});
  expect_grad_ok([&](auto& x) { return bce_with_logits(x[0], targets[0]); }, {random_tensor<double>(rng, {5, 3})});
}

INSTANTIATE_TEST_SUITE_P(RandomPoints, PrimitiveGradient, ::testing::Range(0, 5));

TEST(CausalAttention, PrefixMatchesFullSequence) {
  Rng rng(10);
  auto q = random_tensor<double>(rng, {5, 4}, 1.0, false);
  auto k = random_tensor<double>(rng, {5, 4}, 1.0, false);
  auto v = random_tensor<double>(rng, {5, 4}, 1.0, false);
  const std::size_t whole[] = {5};
  auto full = causal_attention(q, k, v, whole, 2);

  const std::size_t whole_ids[] = {0, 1, 2, 3};
  const std::size_t last[] = {4};
  const std::size_t tail_seg[] = {1};
  AttentionPrefix<double> prefix;
  prefix.keys.push_back(embedding_lookup(k, whole_ids));
  prefix.values.push_back(embedding_lookup(v, whole_ids));
  auto out = causal_attention(embedding_lookup(q, last), embedding_lookup(k, last), embedding_lookup(v, last),
                              tail_seg, 2, &prefix);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(0, c), full.at(4, c), 1e-12);
}

TEST(Dropout, ZeroRateIsIdentityAndRateScalesSurvivors) {
  Rng rng(11);
  Td x({1, 1000}, std::vector<double>(1000, 1.0));
  auto same = dropout(x, 0.0, rng);
  EXPECT_EQ(same.node(), x.node());
  auto out = dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (double v : out.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_EQ(v, 2.0);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1000.0, 0.5, 0.06);
}

TEST(Tensor, ShapeInvariants) {
  Td t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_TRUE(t.is_leaf());
  EXPECT_THROW(Td({2, 2}, std::vector<double>(3)), DimensionError);
  Td g({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(g));
  EXPECT_EQ(g.grad().size(), g.numel());
}

}  // namespace
}  // namespace scoregrade
