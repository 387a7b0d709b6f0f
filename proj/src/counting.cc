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

#include <algorithm>
#include <cmath>

#include "dynaquery/error.h"

namespace dynaquery {

std::string LevelName(CountLevel level) {
  return "L" + std::to_string(LevelIndex(level));
}

LevelThresholds ReferenceThresholds() {
  return {{10, 100, 500}, CutConvention::kUpperInclusive};
}

LevelThresholds DeskThresholds() {
  return {{1, 10, 50}, CutConvention::kUpperInclusive};
}

LevelThresholds FiveLevelThresholds(bool desk) {
  if (desk) return {{1, 10, 50, 90}, CutConvention::kUpperInclusive};
  return {{10, 100, 500, 900}, CutConvention::kUpperInclusive};
}

std::vector<int> ReferenceBudgets() { return {300, 500, 900, 1500}; }
std::vector<int> DeskBudgets() { return {30, 50, 90, 150}; }

std::vector<int> FiveLevelBudgets(bool desk) {
  if (desk) return {30, 50, 90, 120, 150};
  return {300, 500, 900, 1200, 1500};
}

void ValidateThresholds(const LevelThresholds& thresholds) {
  if (thresholds.cuts.empty()) {
    Fail(ErrorKind::kConfig, "level thresholds need at least one cut");
  }
  for (size_t i = 0; i < thresholds.cuts.size(); ++i) {
    const double c = thresholds.cuts[i];
    if (!(c > 0) || (i > 0 && !(c > thresholds.cuts[i - 1]))) {
      Fail(ErrorKind::kConfig,
           "level cuts must be positive and strictly ascending");
    }
  }
}

void ValidateBudgets(std::span<const int> budgets, int num_levels) {
  if (static_cast<int>(budgets.size()) != num_levels) {
    Fail(ErrorKind::kConfig, "budget table has ", budgets.size(),
         " entries for ", num_levels, " levels");
  }
  for (size_t i = 0; i < budgets.size(); ++i) {
    if (budgets[i] < 1 || (i > 0 && budgets[i] <= budgets[i - 1])) {
      Fail(ErrorKind::kConfig,
           "budgets must be positive and strictly ascending");
    }
  }
}

CountLevel CountToLevel(int64_t n, const LevelThresholds& thresholds) {
  if (n < 0) Fail(ErrorKind::kInput, "negative instance count ", n);
  int level = 0;
  for (double cut : thresholds.cuts) {
    const double v = static_cast<double>(n);
    const bool above = thresholds.convention == CutConvention::kUpperInclusive
                           ? v > cut
                           : v >= cut;
    if (above) ++level;
  }
  return static_cast<CountLevel>(level);
}

QueryBudget LevelToBudget(CountLevel level, std::span<const int> budgets) {
  const int i = LevelIndex(level);
  if (i < 0 || i >= static_cast<int>(budgets.size())) {
    Fail(ErrorKind::kConfig, "no budget for level ", LevelName(level),
         " in a table of ", budgets.size());
  }
  return {budgets[i]};
}

LevelThresholds DeriveThresholds(std::span<const int64_t> counts,
                                 SpreadStatistic spread) {
  if (counts.empty())
    Fail(ErrorKind::kInput, "cannot derive cuts from no counts");
  double mean = 0;
  for (int64_t c : counts) mean += static_cast<double>(c);
  mean /= static_cast<double>(counts.size());
  double var = 0;
  for (int64_t c : counts) {
    var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  }
  var /= static_cast<double>(counts.size());
  const double s = spread == SpreadStatistic::kStdDev ? std::sqrt(var) : var;

  double mid = mean;
  double low = std::min(mean - s, mid - 1.0);
  double high = std::max(mean + s, mid + 1.0);
  low = std::max(low, 1.0);
  mid = std::max(mid, low + 1.0);
  high = std::max(high, mid + 1.0);
  return {{low, mid, high}, CutConvention::kLowerInclusive};
}

DensityExtractor::DensityExtractor(int channels, Rng& rng) {
  for (int dilation : {1, 2, 3}) {
    layers_.push_back(Conv2dLayer::Make(
        channels, channels, 3,
        {.stride = 1, .padding = dilation, .dilation = dilation}, rng));
  }
}

DensityMap DensityExtractor::Forward(const PyramidLevel& finest) const {
  const Tensor& s = finest.map;
  if (s.rank() != 3) {
    Fail(ErrorKind::kDimension, "density extractor expects [d, h, w], got ",
         ShapeToString(s.shape()));
  }
  Tensor x = Reshape(s, {1, s.dim(0), s.dim(1), s.dim(2)});
  for (size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].Forward(x);
    if (i + 1 < layers_.size()) x = Relu(x);
  }
  return {Reshape(x, {x.dim(1), x.dim(2), x.dim(3)})};
}

void DensityExtractor::Collect(const std::string& prefix,
                               ParameterList* out) const {
  for (size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].Collect(prefix + ".conv" + std::to_string(i), out);
  }
}

DensityMap DensityExtract(const PyramidLevel& finest,
                          const DensityExtractor& extractor) {
  return extractor.Forward(finest);
}

CountHead::CountHead(int channels, int outputs, Rng& rng)
    : mlp_(Mlp::Make(channels, 4 * channels, outputs, rng)) {}

Tensor CountHead::Forward(const DensityMap& density) const {
  const Tensor& f = density.map;
  Tensor pooled = PoolSpatial(Reshape(f, {1, f.dim(0), f.dim(1), f.dim(2)}),
                              PoolMode::kAvg);
  return mlp_.Forward(Reshape(pooled, {f.dim(0)}));
}

void CountHead::Collect(const std::string& prefix, ParameterList* out) const {
  mlp_.Collect(prefix + ".mlp", out);
}

CountLevel ArgmaxLevel(std::span<const double> logits) {
  if (logits.empty()) Fail(ErrorKind::kInput, "no logits");
  size_t best = 0;
  for (size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<CountLevel>(best);
}

Classification ClassifyCount(const DensityMap& density, const CountHead& head) {
  Tensor logits = head.Forward(density);
  return {logits, ArgmaxLevel(logits.data())};
}

Tensor CountingLoss(const Tensor& logits, CountLevel true_level) {
  const int i = LevelIndex(true_level);
  if (logits.rank() != 1 || i >= logits.dim(0)) {
    Fail(ErrorKind::kDimension, "counting logits ",
         ShapeToString(logits.shape()), " vs level ", LevelName(true_level));
  }
  return Neg(Slice(LogSoftmax(logits), 0, i, 1));
}

Tensor CountRegressionLoss(const Tensor& predicted, int64_t true_count) {
  return Abs(AddScalar(predicted, -static_cast<double>(true_count)));
}

int64_t RoundCount(double regressed) {
  if (!std::isfinite(regressed)) return 0;
  return static_cast<int64_t>(std::llround(std::max(regressed, 0.0)));
}

}  // namespace dynaquery
