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

#include "dynaquery/query_select.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

constexpr double kLogitBound = 20.0;

}  // namespace

bool AnchorBox::Valid() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return unit(x) && unit(y) && w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0;
}

Tensor AnchorsToTensor(std::span<const AnchorBox> anchors) {
  if (anchors.empty()) Fail(ErrorKind::kInput, "no anchors");
  std::vector<double> v;
  v.reserve(anchors.size() * 4);
  for (const AnchorBox& a : anchors) v.insert(v.end(), {a.x, a.y, a.w, a.h});
  return Tensor({static_cast<int>(anchors.size()), 4}, std::move(v));
}

std::vector<AnchorBox> TensorToAnchors(const Tensor& anchors) {
  if (anchors.rank() != 2 || anchors.dim(1) != 4) {
    Fail(ErrorKind::kDimension, "anchors must be [k, 4], got ",
         ShapeToString(anchors.shape()));
  }
  std::vector<AnchorBox> out(anchors.dim(0));
  auto d = anchors.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = {d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]};
  }
  return out;
}

Tensor RefineInLogitSpace(const Tensor& anchors, const Tensor& delta) {
  Tensor logits = Add(InverseSigmoid(anchors), delta);
  logits = Maximum(Minimum(logits, Tensor::Scalar(kLogitBound)),
                   Tensor::Scalar(-kLogitBound));
  return Sigmoid(logits);
}

ScoreHead::ScoreHead(int channels, int num_classes, Rng& rng)
    : mlp_(Mlp::Make(channels, channels, num_classes, rng)) {}

void ScoreHead::Collect(const std::string& prefix, ParameterList* out) const {
  mlp_.Collect(prefix + ".mlp", out);
}

Tensor ScoreHead::Forward(const Tensor& seq) const {
  return Transpose(mlp_.Forward(Transpose(seq)));
}

Tensor ScorePositions(const FlattenedFeatures& flat, const ScoreHead& head) {
  return head.Forward(flat.seq);
}

std::vector<double> SelectionKeys(const Tensor& scores) {
  if (scores.rank() != 2) {
    Fail(ErrorKind::kDimension, "scores must be [m, L], got ",
         ShapeToString(scores.shape()));
  }
  const int m = scores.dim(0), n = scores.dim(1);
  auto s = scores.data();
  std::vector<double> keys(n);
  for (int j = 0; j < n; ++j) {
    double best = s[j];
    for (int c = 1; c < m; ++c) best = std::max(best, s[c * n + j]);
    keys[j] = 1.0 / (1.0 + std::exp(-best));  // sigmoid is monotone
  }
  return keys;
}

std::vector<int> TopKIndices(std::span<const double> keys, int k) {
  const int n = static_cast<int>(keys.size());
  if (k < 1 || k > n) {
    Fail(ErrorKind::kBudget, "query budget ", k, " outside [1, ", n, "]");
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) {
                      if (keys[a] != keys[b]) return keys[a] > keys[b];
                      return a < b;
                    });
  order.resize(k);
  return order;
}

Selection SelectTopK(const Tensor& scores, const FlattenedFeatures& flat,
                     int k) {
  if (scores.rank() != 2 || scores.dim(1) != flat.length()) {
    Fail(ErrorKind::kDimension, "scores ", ShapeToString(scores.shape()),
         " vs sequence of ", flat.length());
  }
  const std::vector<double> keys = SelectionKeys(scores);
  Selection out;
  out.indices = TopKIndices(keys, k);
  out.features = GatherColumnsAsRows(flat.seq, out.indices);
  for (int i : out.indices) {
    out.sources.push_back(LocateToken(flat.shapes, i));
    out.keys.push_back(keys[i]);
  }
  return out;
}

AnchorBox AnchorPrior(const TokenPosition& source,
                      const std::vector<LevelShape>& shapes,
                      double base_scale) {
  if (source.level < 1 || source.level > static_cast<int>(shapes.size())) {
    Fail(ErrorKind::kIndex, "level ", source.level, " outside pyramid of ",
         shapes.size());
  }
  const LevelShape& s = shapes[source.level - 1];
  if (source.y < 0 || source.y >= s.h || source.x < 0 || source.x >= s.w) {
    Fail(ErrorKind::kIndex, "cell (", source.y, ", ", source.x,
         ") outside level ", source.level);
  }
  const double extent =
      std::min(base_scale * std::ldexp(1.0, source.level - 1), 1.0);
  return {(source.x + 0.5) / s.w, (source.y + 0.5) / s.h, extent, extent};
}

QueryMaker::QueryMaker(int channels, Rng& rng)
    : content_(LinearLayer::Make(channels, channels, rng)),
      refine_(Mlp::Make(channels, channels, 4, rng)) {}

void QueryMaker::Collect(const std::string& prefix, ParameterList* out) const {
  content_.Collect(prefix + ".content", out);
  refine_.Collect(prefix + ".refine", out);
}

QuerySet MakeQueries(const Selection& selection,
                     std::span<const AnchorBox> priors,
                     const QueryMaker& maker) {
  const int k = static_cast<int>(selection.indices.size());
  if (static_cast<int>(priors.size()) != k || selection.features.dim(0) != k) {
    Fail(ErrorKind::kDimension, "selection of ", k, " with ", priors.size(),
         " priors");
  }
  QuerySet out;
  out.content = maker.content().Forward(selection.features);
  out.anchors = RefineInLogitSpace(AnchorsToTensor(priors),
                                   maker.refine().Forward(selection.features));
  out.sources = selection.sources;
  out.indices = selection.indices;
  out.budget = {k};
  return out;
}

QuerySet FixedPipeline(const FlattenedFeatures& flat, const Tensor& scores,
                       int k, const QueryMaker& maker, double base_scale) {
  std::string diagnostic;
  if (k > flat.length()) {
    diagnostic = StrCat("query budget ", k, " exceeds ", flat.length(),
                        " positions; clamped");
    k = flat.length();
  }
  const Selection selection = SelectTopK(scores, flat, k);
  std::vector<AnchorBox> priors;
  priors.reserve(k);
  for (const TokenPosition& p : selection.sources) {
    priors.push_back(AnchorPrior(p, flat.shapes, base_scale));
  }
  QuerySet out = MakeQueries(selection, priors, maker);
  out.diagnostic = std::move(diagnostic);
  return out;
}

QuerySet DynamicPipeline(const FlattenedFeatures& flat, const Tensor& scores,
                         CountLevel level, const QueryMaker& maker,
                         const DynamicQueryConfig& config) {
  const QueryBudget budget = LevelToBudget(level, config.budgets);
  return FixedPipeline(flat, scores, budget.k, maker, config.base_scale);
}

}  // namespace dynaquery
