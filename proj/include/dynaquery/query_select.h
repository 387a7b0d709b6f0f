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

#ifndef DYNAQUERY_QUERY_SELECT_H_
#define DYNAQUERY_QUERY_SELECT_H_

#include <span>
#include <string>
#include <vector>

#include "dynaquery/counting.h"
#include "dynaquery/nn.h"
#include "dynaquery/pyramid.h"

namespace dynaquery {

// Normalized (cx, cy, w, h).
struct AnchorBox {
  double x = 0.5;
  double y = 0.5;
  double w = 0.1;
  double h = 0.1;
  bool Valid() const;
};

Tensor AnchorsToTensor(std::span<const AnchorBox> anchors);  // [k, 4]
std::vector<AnchorBox> TensorToAnchors(const Tensor& anchors);

// sigmoid(clamp(inverse_sigmoid(anchors) + delta)). The clamp keeps every
// coordinate strictly inside (0, 1) however large the delta.
Tensor RefineInLogitSpace(const Tensor& anchors, const Tensor& delta);

// Per-position class scorer applied to the flattened sequence.
class ScoreHead {
 public:
  ScoreHead() = default;
  ScoreHead(int channels, int num_classes, Rng& rng);

  Mlp& mlp() { return mlp_; }
  int num_classes() const { return mlp_.second.bias.dim(0); }
  void Collect(const std::string& prefix, ParameterList* out) const;
  // seq [d, L] -> logits [m, L].
  Tensor Forward(const Tensor& seq) const;

 private:
  Mlp mlp_;
};

Tensor ScorePositions(const FlattenedFeatures& flat, const ScoreHead& head);

// max over classes of sigmoid(logit) for every position of [m, L] logits.
std::vector<double> SelectionKeys(const Tensor& scores);

struct Selection {
  Tensor features;           // [k, d]
  std::vector<int> indices;  // flat sequence positions
  std::vector<TokenPosition> sources;
  std::vector<double> keys;  // descending
};

// Highest keys first; equal keys keep the lower flat index first.
std::vector<int> TopKIndices(std::span<const double> keys, int k);
Selection SelectTopK(const Tensor& scores, const FlattenedFeatures& flat,
                     int k);

constexpr double kDefaultBaseScale = 0.05;
AnchorBox AnchorPrior(const TokenPosition& source,
                      const std::vector<LevelShape>& shapes,
                      double base_scale = kDefaultBaseScale);

struct QuerySet {
  Tensor content;  // [k, d]
  Tensor anchors;  // [k, 4], refined
  std::vector<TokenPosition> sources;
  std::vector<int> indices;
  QueryBudget budget;
  // Non-empty when the requested budget had to be clamped.
  std::string diagnostic;

  int size() const { return static_cast<int>(sources.size()); }
};

// Content projection plus the FFN predicting a 4-D anchor bias.
class QueryMaker {
 public:
  QueryMaker() = default;
  QueryMaker(int channels, Rng& rng);

  LinearLayer& content() { return content_; }
  Mlp& refine() { return refine_; }
  const LinearLayer& content() const { return content_; }
  const Mlp& refine() const { return refine_; }
  void Collect(const std::string& prefix, ParameterList* out) const;

 private:
  LinearLayer content_;
  Mlp refine_;
};

QuerySet MakeQueries(const Selection& selection,
                     std::span<const AnchorBox> priors,
                     const QueryMaker& maker);

struct DynamicQueryConfig {
  std::vector<int> budgets = DeskBudgets();
  double base_scale = kDefaultBaseScale;
};

// Budget from the counting level, top-k selection on the scored sequence,
// priors and query synthesis. Budgets longer than the sequence are clamped
// and reported through QuerySet::diagnostic.
QuerySet DynamicPipeline(const FlattenedFeatures& flat, const Tensor& scores,
                         CountLevel level, const QueryMaker& maker,
                         const DynamicQueryConfig& config);
// Same, with an explicit budget instead of a counting level.
QuerySet FixedPipeline(const FlattenedFeatures& flat, const Tensor& scores,
                       int k, const QueryMaker& maker, double base_scale);

}  // namespace dynaquery

#endif  // DYNAQUERY_QUERY_SELECT_H_
