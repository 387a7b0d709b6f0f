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

#include "dynaquery/matching_loss.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

double Area(const CornerBox& b) {
  return std::max(b.x1 - b.x0, 0.0) * std::max(b.y1 - b.y0, 0.0);
}

double Intersection(const CornerBox& a, const CornerBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return std::max(w, 0.0) * std::max(h, 0.0);
}

double SigmoidValue(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor Column(const Tensor& boxes, int c) { return Slice(boxes, 1, c, 1); }

// Rows of `boxes` and the matched gt rows as [p, 4] tensors.
std::pair<Tensor, Tensor> MatchedBoxes(const Tensor& boxes,
                                       const GroundTruth& gt,
                                       const MatchResult& match) {
  std::vector<int> rows;
  std::vector<AnchorBox> targets;
  for (auto [p, g] : match.pairs) {
    rows.push_back(p);
    targets.push_back(gt.boxes[g]);
  }
  return {GatherRows(boxes, rows), AnchorsToTensor(targets)};
}

}  // namespace

void GroundTruth::Validate(int num_classes) const {
  if (boxes.size() != classes.size()) {
    Fail(ErrorKind::kInput, boxes.size(), " boxes but ", classes.size(),
         " classes");
  }
  for (size_t i = 0; i < boxes.size(); ++i) {
    if (!boxes[i].Valid()) Fail(ErrorKind::kInput, "invalid box ", i);
    if (classes[i] < 0 || classes[i] >= num_classes) {
      Fail(ErrorKind::kInput, "class ", classes[i], " outside [0, ",
           num_classes, ")");
    }
  }
}

CornerBox ToCorners(const AnchorBox& box) {
  return {box.x - box.w / 2, box.y - box.h / 2, box.x + box.w / 2,
          box.y + box.h / 2};
}

double Iou(const CornerBox& a, const CornerBox& b) {
  const double area_a = Area(a), area_b = Area(b);
  if (area_a <= 0 || area_b <= 0) return 0.0;
  const double inter = Intersection(a, b);
  return inter / (area_a + area_b - inter);
}

double Giou(const CornerBox& a, const CornerBox& b) {
  const double iou = Iou(a, b);
  const double inter = Intersection(a, b);
  const double uni = Area(a) + Area(b) - inter;
  const CornerBox c{std::min(a.x0, b.x0), std::min(a.y0, b.y0),
                    std::max(a.x1, b.x1), std::max(a.y1, b.y1)};
  const double enclosure = Area(c);
  if (enclosure <= 0) return iou;
  return iou - (enclosure - uni) / enclosure;
}

double Giou(const AnchorBox& a, const AnchorBox& b) {
  return Giou(ToCorners(a), ToCorners(b));
}

Tensor GiouRows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || a.shape() != b.shape()) {
    Fail(ErrorKind::kDimension, "GIoU of ", ShapeToString(a.shape()), " and ",
         ShapeToString(b.shape()));
  }
  auto corners = [](const Tensor& t) {
    Tensor half_w = MulScalar(Column(t, 2), 0.5);
    Tensor half_h = MulScalar(Column(t, 3), 0.5);
    return std::array<Tensor, 4>{
        Sub(Column(t, 0), half_w), Sub(Column(t, 1), half_h),
        Add(Column(t, 0), half_w), Add(Column(t, 1), half_h)};
  };
  const auto ca = corners(a), cb = corners(b);
  Tensor area_a = Mul(Column(a, 2), Column(a, 3));
  Tensor area_b = Mul(Column(b, 2), Column(b, 3));
  Tensor iw = Relu(Sub(Minimum(ca[2], cb[2]), Maximum(ca[0], cb[0])));
  Tensor ih = Relu(Sub(Minimum(ca[3], cb[3]), Maximum(ca[1], cb[1])));
  Tensor inter = Mul(iw, ih);
  Tensor uni = Sub(Add(area_a, area_b), inter);
  Tensor ew = Sub(Maximum(ca[2], cb[2]), Minimum(ca[0], cb[0]));
  Tensor eh = Sub(Maximum(ca[3], cb[3]), Minimum(ca[1], cb[1]));
  Tensor enclosure = Mul(ew, eh);
  Tensor giou = Sub(Div(inter, uni), Div(Sub(enclosure, uni), enclosure));
  return Reshape(giou, {a.dim(0)});
}

CostMatrix MatchCost(const LayerPrediction& prediction, const GroundTruth& gt,
                     const LossWeights& weights) {
  const Tensor& logits = prediction.class_logits;
  const int k = logits.dim(0), m = logits.dim(1), n = gt.size();
  CostMatrix cost{k, n, std::vector<double>(static_cast<size_t>(k) * n)};
  const std::vector<AnchorBox> boxes = TensorToAnchors(prediction.boxes);
  auto l = logits.data();
  const double alpha = weights.alpha < 0 ? 0.5 : weights.alpha;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < n; ++j) {
      const AnchorBox& p = boxes[i];
      const AnchorBox& g = gt.boxes[j];
      const double l1 = std::abs(p.x - g.x) + std::abs(p.y - g.y) +
                        std::abs(p.w - g.w) + std::abs(p.h - g.h);
      const double prob = SigmoidValue(l[i * m + gt.classes[j]]);
      const double pos =
          alpha * std::pow(1 - prob, weights.gamma) * -std::log(prob + 1e-8);
      const double neg = (1 - alpha) * std::pow(prob, weights.gamma) *
                         -std::log(1 - prob + 1e-8);
      cost.values[i * n + j] = weights.l1 * l1 +
                               weights.giou * (1.0 - Giou(p, g)) +
                               weights.focal * (pos - neg);
    }
  }
  return cost;
}

MatchResult Hungarian(const CostMatrix& cost) {
  for (double v : cost.values) {
    if (!std::isfinite(v)) Fail(ErrorKind::kInput, "non-finite matching cost");
  }
  MatchResult result;
  if (cost.rows == 0 || cost.cols == 0) return result;
  // Potentials method on an n x m problem with n <= m; rows are the smaller
  // side, transposing when needed.
  const bool transposed = cost.rows > cost.cols;
  const int n = transposed ? cost.cols : cost.rows;
  const int m = transposed ? cost.rows : cost.cols;
  auto a = [&](int i, int j) {
    return transposed ? cost.at(j - 1, i - 1) : cost.at(i - 1, j - 1);
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    if (transposed) {
      result.pairs.push_back({j - 1, p[j] - 1});
    } else {
      result.pairs.push_back({p[j] - 1, j - 1});
    }
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  return result;
}

double AssignmentCost(const CostMatrix& cost, const MatchResult& match) {
  double total = 0;
  for (auto [r, c] : match.pairs) total += cost.at(r, c);
  return total;
}

Tensor FocalLoss(const Tensor& logits, std::span<const int> targets,
                 double alpha, double gamma) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(targets.size())) {
    Fail(ErrorKind::kDimension, "focal logits ", ShapeToString(logits.shape()),
         " for ", targets.size(), " targets");
  }
  const int k = logits.dim(0), m = logits.dim(1);
  std::vector<double> t(static_cast<size_t>(k) * m, 0.0);
  for (int i = 0; i < k; ++i) {
    if (targets[i] >= m) {
      Fail(ErrorKind::kInput, "target class ", targets[i], " with ", m,
           " classes");
    }
    if (targets[i] >= 0) t[i * m + targets[i]] = 1.0;
  }
  const Tensor target(logits.shape(), t);
  const Tensor p = Sigmoid(logits);
  // Cross-entropy with logits: softplus(x) - t * x.
  Tensor ce = Sub(Softplus(logits), Mul(target, logits));
  Tensor loss = ce;
  if (gamma != 0.0) {
    // 1 - p_t = p + t - 2 p t.
    Tensor one_minus_pt = Sub(Add(p, target), MulScalar(Mul(p, target), 2.0));
    loss = Mul(loss, PowScalar(one_minus_pt, gamma));
  }
  if (alpha >= 0) {
    std::vector<double> w(t.size());
    for (size_t i = 0; i < t.size(); ++i) {
      w[i] = t[i] > 0 ? alpha : 1.0 - alpha;
    }
    loss = Mul(loss, Tensor(logits.shape(), std::move(w)));
  }
  return MulScalar(Sum(loss), 1.0 / k);
}

HungarianTerms HungarianLoss(const LayerPrediction& prediction,
                             const GroundTruth& gt, const MatchResult& match,
                             const LossWeights& weights) {
  const int k = prediction.class_logits.dim(0);
  std::vector<int> targets(k, -1);
  for (auto [p, g] : match.pairs) targets[p] = gt.classes[g];
  HungarianTerms terms;
  terms.focal =
      FocalLoss(prediction.class_logits, targets, weights.alpha, weights.gamma);
  if (match.pairs.empty()) {
    terms.l1 = Tensor::Scalar(0.0);
    terms.giou = Tensor::Scalar(0.0);
  } else {
    const auto [pred, target] = MatchedBoxes(prediction.boxes, gt, match);
    const double inv = 1.0 / static_cast<double>(match.pairs.size());
    terms.l1 = MulScalar(Sum(Abs(Sub(pred, target))), inv);
    terms.giou =
        MulScalar(Sum(Neg(AddScalar(GiouRows(pred, target), -1.0))), inv);
  }
  terms.weighted = Add(
      Add(MulScalar(terms.l1, weights.l1), MulScalar(terms.giou, weights.giou)),
      MulScalar(terms.focal, weights.focal));
  return terms;
}

std::vector<MatchResult> MatchLayers(const DecoderOutput& outputs,
                                     const GroundTruth& gt,
                                     const LossWeights& weights) {
  std::vector<MatchResult> matches;
  for (const LayerPrediction& p : outputs.per_layer) {
    matches.push_back(Hungarian(MatchCost(p, gt, weights)));
  }
  return matches;
}

LossBreakdown TotalLoss(const DecoderOutput& outputs, const GroundTruth& gt,
                        const Tensor& counting_term,
                        const std::vector<MatchResult>& matches,
                        const LossWeights& weights) {
  const size_t layers = outputs.per_layer.size();
  if (layers == 0 || matches.size() != layers) {
    Fail(ErrorKind::kInput, "loss needs one matching per decoder layer");
  }
  Tensor aux = Tensor::Scalar(0.0);
  for (size_t l = 0; l + 1 < layers; ++l) {
    aux = Add(
        aux,
        HungarianLoss(outputs.per_layer[l], gt, matches[l], weights).weighted);
  }
  const HungarianTerms last =
      HungarianLoss(outputs.final(), gt, matches.back(), weights);
  Tensor counting = counting_term.defined()
                        ? MulScalar(counting_term, weights.counting)
                        : Tensor::Scalar(0.0);
  LossBreakdown b;
  b.total_tensor = Add(Add(last.weighted, aux), counting);
  b.l1 = last.l1.item();
  b.giou = last.giou.item();
  b.focal = last.focal.item();
  b.hungarian = last.weighted.item();
  b.aux = aux.item();
  b.counting = counting.item();
  b.total = b.total_tensor.item();
  return b;
}

LossBreakdown TotalLoss(const DecoderOutput& outputs, const GroundTruth& gt,
                        const Tensor& counting_logits, CountLevel true_level,
                        const LossWeights& weights) {
  return TotalLoss(outputs, gt, CountingLoss(counting_logits, true_level),
                   MatchLayers(outputs, gt, weights), weights);
}

Tensor SelectionLoss(const Tensor& scores,
                     const std::vector<LevelShape>& shapes,
                     const GroundTruth& gt, const LossWeights& weights) {
  const int n = scores.dim(1);
  std::vector<int> targets(n, -1);
  for (int g = 0; g < gt.size(); ++g) {
    const AnchorBox& box = gt.boxes[g];
    for (size_t l = 0; l < shapes.size(); ++l) {
      const int y =
          std::clamp(static_cast<int>(box.y * shapes[l].h), 0, shapes[l].h - 1);
      const int x =
          std::clamp(static_cast<int>(box.x * shapes[l].w), 0, shapes[l].w - 1);
      targets[TokenIndex(shapes, {static_cast<int>(l) + 1, y, x})] =
          gt.classes[g];
    }
  }
  const Tensor per_slot =
      FocalLoss(Transpose(scores), targets, weights.alpha, weights.gamma);
  // FocalLoss averages over the n positions; renormalize by object count.
  return MulScalar(per_slot, static_cast<double>(n) / std::max(1, gt.size()));
}

}  // namespace dynaquery
