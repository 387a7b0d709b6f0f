// Copyright 2026 The Dynaquery Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dynaquery/counting.h"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "dynaquery/grad_check.h"
#include "dynaquery/ops.h"
#include "oracles.h"
#include "test_util.h"

namespace dynaquery {
namespace {

using oracle::RandomTensor;

constexpr double kGradTol = 1e-4;

// Written independently of CountToLevel: the four ranges as stated.
CountLevel IfChainLevel(int64_t n) {
  if (n <= 10) return CountLevel::kL0;
  if (n <= 100) return CountLevel::kL1;
  if (n <= 500) return CountLevel::kL2;
  return CountLevel::kL3;
}

TEST(CountToLevelTest, ReferenceBoundaries) {
  const LevelThresholds t = ReferenceThresholds();
  EXPECT_EQ(CountToLevel(10, t), CountLevel::kL0);
  EXPECT_EQ(CountToLevel(11, t), CountLevel::kL1);
  EXPECT_EQ(CountToLevel(100, t), CountLevel::kL1);
  EXPECT_EQ(CountToLevel(500, t), CountLevel::kL2);
  EXPECT_EQ(CountToLevel(501, t), CountLevel::kL3);
  EXPECT_EQ(CountToLevel(0, t), CountLevel::kL0);
}

TEST(CountToLevelTest, AgreesWithIfChainExhaustively) {
  const LevelThresholds t = ReferenceThresholds();
  for (int64_t n = 0; n <= 3000; ++n) {
    ASSERT_EQ(CountToLevel(n, t), IfChainLevel(n)) << "n=" << n;
  }
}

TEST(CountToLevelTest, RandomCountsAgreeWithIfChain) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int64_t> n(0, 1'000'000);
  for (int i = 0; i < 10'000; ++i) {
    const int64_t v = n(rng);
    ASSERT_EQ(CountToLevel(v, ReferenceThresholds()), IfChainLevel(v));
  }
}

TEST(CountToLevelTest, MonotoneStepFunction) {
  for (const LevelThresholds& t :
       {ReferenceThresholds(), DeskThresholds(), FiveLevelThresholds(true),
        FiveLevelThresholds(false)}) {
    for (int64_t n = 1; n <= 3000; ++n) {
      const int prev = LevelIndex(CountToLevel(n - 1, t));
      const int cur = LevelIndex(CountToLevel(n, t));
      ASSERT_TRUE(cur == prev || cur == prev + 1) << "n=" << n;
    }
  }
}

TEST(CountToLevelTest, NegativeIsInputError) {
  EXPECT_TRUE(ThrowsKind([] { CountToLevel(-1, ReferenceThresholds()); },
                         ErrorKind::kInput));
}

TEST(CountToLevelTest, LowerInclusiveConvention) {
  const LevelThresholds t{{2.5, 5, 7.5}, CutConvention::kLowerInclusive};
  EXPECT_EQ(CountToLevel(2, t), CountLevel::kL0);
  EXPECT_EQ(CountToLevel(5, t), CountLevel::kL2);
  EXPECT_EQ(CountToLevel(8, t), CountLevel::kL3);
}

TEST(LevelToBudgetTest, ReferenceTable) {
  const std::vector<int> b = ReferenceBudgets();
  EXPECT_EQ(LevelToBudget(CountLevel::kL0, b).k, 300);
  EXPECT_EQ(LevelToBudget(CountLevel::kL1, b).k, 500);
  EXPECT_EQ(LevelToBudget(CountLevel::kL2, b).k, 900);
  EXPECT_EQ(LevelToBudget(CountLevel::kL3, b).k, 1500);
}

TEST(LevelToBudgetTest, DeskTableIsMonotone) {
  const std::vector<int> b = DeskBudgets();
  int prev = 0;
  for (int i = 0; i < 4; ++i) {
    const int k = LevelToBudget(static_cast<CountLevel>(i), b).k;
    EXPECT_GT(k, prev);
    prev = k;
  }
  EXPECT_EQ(LevelToBudget(CountLevel::kL3, b).k, 150);
}

TEST(LevelToBudgetTest, ComposedWithLevelIsMonotoneInCount) {
  for (auto [t, b] : {std::pair{ReferenceThresholds(), ReferenceBudgets()},
                      std::pair{DeskThresholds(), DeskBudgets()}}) {
    int prev = 0;
    for (int64_t n = 0; n <= 2000; ++n) {
      const int k = LevelToBudget(CountToLevel(n, t), b).k;
      ASSERT_GE(k, prev) << "n=" << n;
      prev = k;
    }
  }
}

TEST(LevelToBudgetTest, BadTablesAreConfigErrors) {
  EXPECT_TRUE(ThrowsKind(
      [] { LevelToBudget(CountLevel::kL3, std::vector<int>{1, 2, 3}); },
      ErrorKind::kConfig));
  EXPECT_TRUE(
      ThrowsKind([] { ValidateBudgets(std::vector<int>{30, 50, 90}, 4); },
                 ErrorKind::kConfig));
  EXPECT_TRUE(
      ThrowsKind([] { ValidateBudgets(std::vector<int>{30, 90, 50, 150}, 4); },
                 ErrorKind::kConfig));
  EXPECT_TRUE(ThrowsKind(
      [] {
        ValidateThresholds({{10, 10, 20}, CutConvention::kUpperInclusive});
      },
      ErrorKind::kConfig));
}

TEST(DeriveThresholdsTest, EqualCountsUseMinimumGap) {
  for (int64_t c : {5, 40, 1000}) {
    const std::vector<int64_t> counts(17, c);
    const LevelThresholds t = DeriveThresholds(counts);
    const double cd = static_cast<double>(c);
    EXPECT_EQ(t.cuts, (std::vector<double>{cd - 1, cd, cd + 1}));
  }
}

TEST(DeriveThresholdsTest, ClampsAtOne) {
  const std::vector<int64_t> ones(5, 1);
  EXPECT_EQ(DeriveThresholds(ones).cuts, (std::vector<double>{1, 2, 3}));
  const std::vector<int64_t> skewed = {0, 0, 0, 0, 40};
  const LevelThresholds t = DeriveThresholds(skewed);
  EXPECT_EQ(t.cuts[0], 1.0);
  EXPECT_GT(t.cuts[1], t.cuts[0]);
  EXPECT_GT(t.cuts[2], t.cuts[1]);
}

TEST(DeriveThresholdsTest, UniformOneToHundredMatchesDirectStatistics) {
  std::vector<int64_t> counts(100);
  std::iota(counts.begin(), counts.end(), 1);
  const double mean = 50.5;
  // Population variance of 1..n is (n^2 - 1) / 12.
  const double var = (100.0 * 100.0 - 1.0) / 12.0;
  const LevelThresholds sd = DeriveThresholds(counts);
  EXPECT_NEAR(sd.cuts[0], mean - std::sqrt(var), 1e-9);
  EXPECT_NEAR(sd.cuts[1], mean, 1e-9);
  EXPECT_NEAR(sd.cuts[2], mean + std::sqrt(var), 1e-9);
  EXPECT_EQ(sd.convention, CutConvention::kLowerInclusive);

  const LevelThresholds v =
      DeriveThresholds(counts, SpreadStatistic::kVariance);
  EXPECT_EQ(v.cuts[0], 1.0);
  EXPECT_NEAR(v.cuts[2], mean + var, 1e-9);
}

TEST(DeriveThresholdsTest, CutsAreStrictlyAscending) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> size(1, 40), value(0, 300);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int64_t> counts(size(rng));
    for (int64_t& c : counts) c = value(rng);
    const LevelThresholds t = DeriveThresholds(counts);
    ASSERT_GE(t.cuts[0], 1.0);
    ASSERT_GT(t.cuts[1], t.cuts[0]);
    ASSERT_GT(t.cuts[2], t.cuts[1]);
  }
}

TEST(DeriveThresholdsTest, EmptyIsInputError) {
  EXPECT_TRUE(ThrowsKind([] { DeriveThresholds({}); }, ErrorKind::kInput));
}

TEST(DensityExtractTest, PreservesShape) {
  Rng rng(13);
  DensityExtractor extractor(8, rng);
  PyramidLevel s1{1, RandomTensor(rng, {8, 16, 16}), 2};
  EXPECT_EQ(DensityExtract(s1, extractor).map.shape(), (Shape{8, 16, 16}));
}

TEST(DensityExtractTest, ZeroInputInteriorDependsOnlyOnBiases) {
  Rng rng(14);
  DensityExtractor extractor(3, rng);
  PyramidLevel zero{1, Tensor({3, 16, 16}, 0.0), 2};
  const Tensor before = DensityExtract(zero, extractor).map;
  // The first layer sees only zeros, so its kernel cannot matter.
  extractor.layers()[0].kernel = RandomTensor(rng, {3, 3, 3, 3});
  const Tensor after = DensityExtract(zero, extractor).map;
  EXPECT_EQ(before.ToVector(), after.ToVector());
  // Receptive radius is 1 + 2 + 3, so cells at least 6 from the border are
  // beyond the reach of padding and share one value per channel.
  for (int c = 0; c < 3; ++c) {
    const double ref = before.at({c, 6, 6});
    for (int y = 6; y < 10; ++y) {
      for (int x = 6; x < 10; ++x) EXPECT_EQ(before.at({c, y, x}), ref);
    }
  }
}

TEST(DensityExtractTest, GradientsReachAllConvWeights) {
  Rng rng(15);
  DensityExtractor extractor(2, rng);
  PyramidLevel s1{1, RandomTensor(rng, {2, 7, 7}), 2};
  // Nonzero biases keep every pre-activation off the ReLU kink; with zero
  // biases a fully rectified receptive field lands exactly on it.
  for (Conv2dLayer& layer : extractor.layers()) {
    layer.bias = RandomTensor(rng, {2}, 0.1, 0.5);
  }
  ParameterList params;
  extractor.Collect("density", &params);
  std::vector<Tensor> tensors;
  for (const NamedTensor& p : params) tensors.push_back(p.tensor);
  const GradCheckReport report = GradCheckInPlace(
      "density_extract", [&] { return DensityExtract(s1, extractor).map; },
      tensors);
  EXPECT_LT(report.max_rel_error, kGradTol)
      << "input " << report.worst_input << " index " << report.worst_index
      << " analytic " << report.analytic << " numeric " << report.numeric;
}

TEST(ArgmaxLevelTest, DominantAndTies) {
  EXPECT_EQ(ArgmaxLevel(std::vector<double>{9, 0, 0, 0}), CountLevel::kL0);
  EXPECT_EQ(ArgmaxLevel(std::vector<double>{1, 1, 1, 1}), CountLevel::kL0);
  EXPECT_EQ(ArgmaxLevel(std::vector<double>{0, 3, 3, 1}), CountLevel::kL1);
  EXPECT_EQ(ArgmaxLevel(std::vector<double>{0, 0, 0, 0.1}), CountLevel::kL3);
}

TEST(ArgmaxLevelTest, InvariantToConstantShift) {
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> logits(4), shifted(4);
    const double c = u(rng);
    for (int i = 0; i < 4; ++i) {
      logits[i] = std::round(u(rng));  // integer values make ties common
      shifted[i] = logits[i] + std::round(c);
    }
    ASSERT_EQ(ArgmaxLevel(logits), ArgmaxLevel(shifted));
  }
}

TEST(ClassifyCountTest, LevelIsArgmaxOfLogits) {
  Rng rng(17);
  CountHead head(4, 4, rng);
  DensityMap density{RandomTensor(rng, {4, 5, 5})};
  const Classification c = ClassifyCount(density, head);
  ASSERT_EQ(c.logits.shape(), (Shape{4}));
  EXPECT_EQ(c.level, ArgmaxLevel(c.logits.data()));
}

TEST(CountingLossTest, UniformLogitsGiveLogFour) {
  for (int level = 0; level < 4; ++level) {
    EXPECT_NEAR(
        CountingLoss(Tensor({4}, 0.3), static_cast<CountLevel>(level)).item(),
        std::log(4.0), 1e-12);
  }
}

TEST(CountingLossTest, DominantCorrectLogitGoesToZero) {
  const Tensor logits = Tensor::FromVector({0, 0, 60, 0});
  EXPECT_LT(CountingLoss(logits, CountLevel::kL2).item(), 1e-20);
  EXPECT_GT(CountingLoss(logits, CountLevel::kL1).item(), 59.0);
}

TEST(CountingLossTest, StrictlyPositiveOnRandomLogits) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor logits = RandomTensor(rng, {4}, -3, 3);
    EXPECT_GT(CountingLoss(logits, static_cast<CountLevel>(trial % 4)).item(),
              0.0);
  }
}

TEST(CountingLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(19);
  for (int level = 0; level < 4; ++level) {
    const GradCheckReport report =
        GradCheck("counting_loss",
                  [level](std::span<const Tensor> in) {
                    return CountingLoss(in[0], static_cast<CountLevel>(level));
                  },
                  {RandomTensor(rng, {4}, -2, 2)});
    EXPECT_LT(report.max_rel_error, kGradTol);
  }
}

TEST(CountingLossTest, WholeHeadGradientMatchesFiniteDifferences) {
  Rng rng(20);
  CountHead head(3, 4, rng);
  DensityMap density{RandomTensor(rng, {3, 4, 4})};
  ParameterList params;
  head.Collect("head", &params);
  std::vector<Tensor> tensors;
  for (const NamedTensor& p : params) tensors.push_back(p.tensor);
  const GradCheckReport report = GradCheckInPlace(
      "count_head",
      [&] { return CountingLoss(head.Forward(density), CountLevel::kL1); },
      tensors);
  EXPECT_LT(report.max_rel_error, kGradTol);
}

TEST(RegressionHeadTest, LossAndRounding) {
  EXPECT_EQ(CountRegressionLoss(Tensor::FromVector({7.5}), 5).item(), 2.5);
  EXPECT_EQ(RoundCount(4.4), 4);
  EXPECT_EQ(RoundCount(4.5), 5);
  EXPECT_EQ(RoundCount(-3.0), 0);
  EXPECT_EQ(RoundCount(std::nan("")), 0);
}

}  // namespace
}  // namespace dynaquery
