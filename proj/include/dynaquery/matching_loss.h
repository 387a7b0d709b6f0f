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

#ifndef DYNAQUERY_MATCHING_LOSS_H_
#define DYNAQUERY_MATCHING_LOSS_H_

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dynaquery/counting.h"
#include "dynaquery/detr_head.h"
#include "dynaquery/query_select.h"

namespace dynaquery {

struct GroundTruth {
  std::vector<AnchorBox> boxes;
  std::vector<int> classes;  // in [0, m)

  int size() const { return static_cast<int>(boxes.size()); }
  // Throws kInput on length mismatch, invalid boxes or classes outside
  // [0, num_classes).
  void Validate(int num_classes) const;
};

struct CornerBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
CornerBox ToCorners(const AnchorBox& box);

double Iou(const CornerBox& a, const CornerBox& b);
// Zero-area boxes have IoU 0; the enclosure term still applies.
double Giou(const CornerBox& a, const CornerBox& b);
double Giou(const AnchorBox& a, const AnchorBox& b);
// Row-wise GIoU of [n, 4] (cx, cy, w, h) tensors with positive extents -> [n].
Tensor GiouRows(const Tensor& a, const Tensor& b);

struct LossWeights {
  double l1 = 5.0;
  double giou = 2.0;
  double focal = 1.0;
  double counting = 1.0;
  double alpha = 0.25;  // negative disables the alpha weighting
  double gamma = 2.0;
};

// Dense row-major cost matrix; zero columns are allowed.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double at(int r, int c) const { return values[r * cols + c]; }
};

CostMatrix MatchCost(const LayerPrediction& prediction, const GroundTruth& gt,
                     const LossWeights& weights = {});

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt), by prediction
};

// Minimum-cost assignment of min(rows, cols) pairs. Non-finite entries are an
// input error.
MatchResult Hungarian(const CostMatrix& cost);
double AssignmentCost(const CostMatrix& cost, const MatchResult& match);

// Sigmoid focal loss summed over classes and averaged over slots. `targets`
// holds a class per slot or -1 for no object.
Tensor FocalLoss(const Tensor& logits, std::span<const int> targets,
                 double alpha = 0.25, double gamma = 2.0);

struct HungarianTerms {
  Tensor l1;
  Tensor giou;
  Tensor focal;
  Tensor weighted;  // λ1·l1 + λ2·giou + λ3·focal
};

// L1 and GIoU averaged over matched pairs (zero without pairs), focal over
// every slot.
HungarianTerms HungarianLoss(const LayerPrediction& prediction,
                             const GroundTruth& gt, const MatchResult& match,
                             const LossWeights& weights = {});

struct LossBreakdown {
  double l1 = 0;
  double giou = 0;
  double focal = 0;
  double hungarian = 0;
  double aux = 0;
  double counting = 0;
  double total = 0;
  Tensor total_tensor;
};

// One independent matching per decoder layer.
std::vector<MatchResult> MatchLayers(const DecoderOutput& outputs,
                                     const GroundTruth& gt,
                                     const LossWeights& weights = {});

// Final layer gives the Hungarian term, earlier layers the aux term.
// `counting_term` is an already computed scalar loss and may be undefined.
LossBreakdown TotalLoss(const DecoderOutput& outputs, const GroundTruth& gt,
                        const Tensor& counting_term,
                        const std::vector<MatchResult>& matches,
                        const LossWeights& weights = {});
LossBreakdown TotalLoss(const DecoderOutput& outputs, const GroundTruth& gt,
                        const Tensor& counting_logits, CountLevel true_level,
                        const LossWeights& weights = {});

// Focal supervision of the per-position selection scores [m, L]: on every
// level the cell containing a ground-truth center is positive for its class.
// Normalized by max(1, number of objects).
Tensor SelectionLoss(const Tensor& scores,
                     const std::vector<LevelShape>& shapes,
                     const GroundTruth& gt, const LossWeights& weights = {});

}  // namespace dynaquery

#endif  // DYNAQUERY_MATCHING_LOSS_H_
