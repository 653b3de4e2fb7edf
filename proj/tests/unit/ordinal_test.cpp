#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "scoregrade/error.hpp"
#include "scoregrade/ordinal.hpp"

namespace scoregrade {
namespace {

TEST(OrdinalEncode, Definition) {
  EXPECT_EQ(ordinal_encode(0, 9), std::vector<int>(8, 0));
  EXPECT_EQ(ordinal_encode(8, 9), std::vector<int>(8, 1));
  EXPECT_EQ(ordinal_encode(3, 9), (std::vector<int>{1, 1, 1, 0, 0, 0, 0, 0}));
  EXPECT_THROW(ordinal_encode(9, 9), Error);
  EXPECT_THROW(ordinal_encode(0, 1), Error);
}

TEST(OrdinalDecode, CountsAboveHalf) {
  EXPECT_EQ(ordinal_decode(std::vector<double>(8, 0.0)), 0u);
  const std::vector<double> probs{0.9, 0.8, 0.6, 0.4, 0.2, 0.1, 0.1, 0.1};
  EXPECT_EQ(ordinal_decode(probs), 3u);
  // Counting, not the first crossing.
  EXPECT_EQ(ordinal_decode(std::vector<double>{0.2, 0.9, 0.1}), 1u);
  EXPECT_EQ(ordinal_decode(std::vector<double>{0.5}), 0u);
}

TEST(OrdinalDecode, ExhaustiveIdentity) {
  for (std::size_t k = 2; k <= 16; ++k) {
    for (std::size_t c = 0; c < k; ++c) {
      const auto t = ordinal_encode(c, k);
      std::vector<double> probs, logits;
      for (int bit : t) {
        logits.push_back(bit ? 1e9 : -1e9);
        probs.push_back(1.0 / (1.0 + std::exp(-logits.back())));
      }
      EXPECT_EQ(ordinal_decode(probs), c);
      EXPECT_EQ(ordinal_decode_logits(logits), c);
    }
  }
}

TEST(OrdinalExpected, SumOfSigmoids) {
  EXPECT_DOUBLE_EQ(ordinal_expected(std::vector<double>{0.0, 0.0}), 1.0);
  EXPECT_NEAR(ordinal_expected(std::vector<double>{40.0, -40.0, -40.0}), 1.0, 1e-12);
}

TEST(OrdinalLoss, MatchingLogitsAndZeroLogits) {
  for (std::size_t c = 0; c < 9; ++c) {
    std::vector<double> z;
    for (int bit : ordinal_encode(c, 9)) z.push_back(bit ? 20.0 : -20.0);
    EXPECT_LT(ordinal_loss(Tensor<double>({8}, z), c).item(), 1e-6);
  }
  EXPECT_NEAR(ordinal_loss(Tensor<double>({1, 4}, std::vector<double>(4, 0.0)), 2).item(), std::numbers::ln2, 1e-15);
}

TEST(OrdinalLoss, MatchesHandFormula) {
  Rng rng(1);
  const std::vector<double> z{0.3, -1.2, 2.0};
  const std::size_t c = 2;
  double expect = 0;
  const auto t = ordinal_encode(c, 4);
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    expect -= t[i] ? std::log(p) : std::log(1 - p);
  }
  EXPECT_NEAR(ordinal_loss(Tensor<double>({3}, z), c).item(), expect / 3, 1e-14);
}

TEST(OrdinalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = testing::random_tensor<double>(rng, {1, 8}, 3.0);
    const std::size_t c = rng.below(9);
    const auto r = finite_diff_check<double>([c](const std::vector<Tensor<double>>& x) { return ordinal_loss(x[0], c); },
                                             {z}, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5);
  }
}

TEST(OrdinalLoss, BatchIsMeanOfRows) {
  Rng rng(3);
  auto z = testing::random_tensor<double>(rng, {3, 4}, 1.0, false);
  const std::vector<std::size_t> classes{0, 4, 2};
  double mean = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(z.data().begin() + 4 * r, z.data().begin() + 4 * r + 4);
    mean += ordinal_loss(Tensor<double>({4}, row), classes[r]).item() / 3;
  }
  EXPECT_NEAR(ordinal_loss_batch(z, classes).item(), mean, 1e-14);
  const std::vector<std::size_t> bad{0, 5, 1};
  EXPECT_THROW(ordinal_loss_batch(z, bad), Error);
}

}  // namespace
}  // namespace scoregrade
