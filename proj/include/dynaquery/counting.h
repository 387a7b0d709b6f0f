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

#ifndef DYNAQUERY_COUNTING_H_
#define DYNAQUERY_COUNTING_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynaquery/nn.h"
#include "dynaquery/pyramid.h"
#include "dynaquery/tensor.h"

namespace dynaquery {

// Instance-count class of an image. kL4 only exists in five-level setups.
enum class CountLevel : int { kL0 = 0, kL1 = 1, kL2 = 2, kL3 = 3, kL4 = 4 };

inline int LevelIndex(CountLevel level) { return static_cast<int>(level); }
std::string LevelName(CountLevel level);

// How a count equal to a cut is classified.
enum class CutConvention {
  kUpperInclusive,  // n <= cut stays below: (0,10], (10,100], ...
  kLowerInclusive,  // n >= cut moves above: [cut, next)
};

struct LevelThresholds {
  std::vector<double> cuts;  // strictly ascending, positive
  CutConvention convention = CutConvention::kUpperInclusive;

  int num_levels() const { return static_cast<int>(cuts.size()) + 1; }
};

// N <= 10, 10 < N <= 100, 100 < N <= 500, N > 500.
LevelThresholds ReferenceThresholds();
// Ten times smaller cuts for desk-scale scenes.
LevelThresholds DeskThresholds();
LevelThresholds FiveLevelThresholds(bool desk);

struct QueryBudget {
  int k = 0;
  bool operator==(const QueryBudget&) const = default;
};

std::vector<int> ReferenceBudgets();  // 300, 500, 900, 1500
std::vector<int> DeskBudgets();       // 30, 50, 90, 150
std::vector<int> FiveLevelBudgets(bool desk);

void ValidateThresholds(const LevelThresholds& thresholds);
void ValidateBudgets(std::span<const int> budgets, int num_levels);

CountLevel CountToLevel(int64_t n, const LevelThresholds& thresholds);
QueryBudget LevelToBudget(CountLevel level, std::span<const int> budgets);

enum class SpreadStatistic { kStdDev, kVariance };

// Cuts at mean - s, mean, mean + s (s = population std-dev or variance),
// lower-inclusive. Collisions are repaired to keep a gap of at least 1
// around the mean and every cut >= 1.
LevelThresholds DeriveThresholds(
    std::span<const int64_t> counts,
    SpreadStatistic spread = SpreadStatistic::kStdDev);

struct DensityMap {
  Tensor map;  // [d, h_1, w_1]
};

// Three 3x3 convolutions with dilations 1, 2, 3 and ReLU between them.
// Padding equals the dilation so the spatial shape is preserved.
class DensityExtractor {
 public:
  DensityExtractor() = default;
  DensityExtractor(int channels, Rng& rng);

  DensityMap Forward(const PyramidLevel& finest) const;
  void Collect(const std::string& prefix, ParameterList* out) const;
  std::vector<Conv2dLayer>& layers() { return layers_; }

 private:
  std::vector<Conv2dLayer> layers_;
};

DensityMap DensityExtract(const PyramidLevel& finest,
                          const DensityExtractor& extractor);

// Spatial average pool followed by two linear layers (hidden width 4d).
// A head with one output regresses the raw count instead.
class CountHead {
 public:
  CountHead() = default;
  CountHead(int channels, int outputs, Rng& rng);

  Tensor Forward(const DensityMap& density) const;
  void Collect(const std::string& prefix, ParameterList* out) const;
  int outputs() const { return mlp_.second.bias.dim(0); }

 private:
  Mlp mlp_;
};

// Lowest index wins ties.
CountLevel ArgmaxLevel(std::span<const double> logits);

struct Classification {
  Tensor logits;  // [num_levels]
  CountLevel level;
};
Classification ClassifyCount(const DensityMap& density, const CountHead& head);

// Softmax cross-entropy of `logits` against `true_level`.
Tensor CountingLoss(const Tensor& logits, CountLevel true_level);
// Absolute error of a regressed count.
Tensor CountRegressionLoss(const Tensor& predicted, int64_t true_count);
int64_t RoundCount(double regressed);

}  // namespace dynaquery

#endif  // DYNAQUERY_COUNTING_H_
