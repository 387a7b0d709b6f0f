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

#include "dynaquery/eval_metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

constexpr int kRecallPoints = 101;

// Outcome of one detection after matching.
struct DetOutcome {
  double score = 0;
  bool matched = false;
  bool ignored = false;
  double iou = 0;
};

// One image restricted to one class, detections in descending score order.
struct ClassSlice {
  std::vector<PixelBox> gts;
  std::vector<PixelBox> dets;
  std::vector<double> scores;
  std::vector<double> ious;  // dets x gts

  double iou(int d, int g) const { return ious[d * gts.size() + g]; }
};

void CheckBox(const PixelBox& b, const char* what, size_t image, size_t index) {
  if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) ||
      !std::isfinite(b.h) || b.w < 0 || b.h < 0) {
    Fail(ErrorKind::kInput, "malformed ", what, " box at image ", image,
         " index ", index);
  }
}

void CheckImages(std::span<const EvalImage> images, int num_classes) {
  for (size_t i = 0; i < images.size(); ++i) {
    for (size_t j = 0; j < images[i].ground_truth.size(); ++j) {
      const LabeledBox& g = images[i].ground_truth[j];
      CheckBox(g.box, "ground-truth", i, j);
      if (g.category < 0 || g.category >= num_classes) {
        Fail(ErrorKind::kInput, "ground-truth category ", g.category,
             " at image ", i, " index ", j);
      }
    }
    for (size_t j = 0; j < images[i].detections.size(); ++j) {
      const ScoredBox& d = images[i].detections[j];
      CheckBox(d.box, "detection", i, j);
      if (!std::isfinite(d.score)) {
        Fail(ErrorKind::kInput, "non-finite score at image ", i, " index ", j);
      }
      if (d.category < 0 || d.category >= num_classes) {
        Fail(ErrorKind::kInput, "detection category ", d.category, " at image ",
             i, " index ", j);
      }
    }
  }
}

ClassSlice Slice(const EvalImage& image, int category, int max_detections) {
  ClassSlice s;
  for (const LabeledBox& g : image.ground_truth) {
    if (g.category == category) s.gts.push_back(g.box);
  }
  std::vector<const ScoredBox*> dets;
  for (const ScoredBox& d : image.detections) {
    if (d.category == category) dets.push_back(&d);
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ScoredBox* a, const ScoredBox* b) {
                     return a->score > b->score;
                   });
  if (static_cast<int>(dets.size()) > max_detections) {
    dets.resize(max_detections);
  }
  for (const ScoredBox* d : dets) {
    s.dets.push_back(d->box);
    s.scores.push_back(d->score);
  }
  s.ious.resize(s.dets.size() * s.gts.size());
  for (size_t d = 0; d < s.dets.size(); ++d) {
    for (size_t g = 0; g < s.gts.size(); ++g) {
      s.ious[d * s.gts.size() + g] = PixelIou(s.dets[d], s.gts[g]);
    }
  }
  return s;
}

bool InRange(const PixelBox& b, const ScaleBucket& range) {
  const double side = std::sqrt(b.area());
  return side >= range.lo && side < range.hi;
}

// Greedy matching of one slice at IoU `t`; ground truth outside `range` is
// ignored, as are unmatched detections outside it. Returns the number of
// non-ignored ground truths.
int MatchSlice(const ClassSlice& s, const ScaleBucket& range, double t,
               std::vector<DetOutcome>* out) {
  const int ng = static_cast<int>(s.gts.size());
  std::vector<int> order(ng);
  std::iota(order.begin(), order.end(), 0);
  std::vector<char> gt_ignore(ng);
  int counted = 0;
  for (int g = 0; g < ng; ++g) {
    gt_ignore[g] = !InRange(s.gts[g], range);
    counted += !gt_ignore[g];
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return gt_ignore[a] < gt_ignore[b]; });
  std::vector<char> gt_taken(ng, 0);
  for (size_t d = 0; d < s.dets.size(); ++d) {
    double best = std::min(t, 1.0 - 1e-10);
    int m = -1;
    for (int g : order) {
      if (gt_taken[g]) continue;
      // Once matched to a counted object, ignored ones cannot take over.
      if (m >= 0 && !gt_ignore[m] && gt_ignore[g]) break;
      const double iou = s.iou(static_cast<int>(d), g);
      if (iou < best) continue;
      best = iou;
      m = g;
    }
    DetOutcome o{s.scores[d], false, false, 0.0};
    if (m >= 0) {
      gt_taken[m] = 1;
      o.matched = true;
      o.ignored = gt_ignore[m];
      o.iou = best;
    } else {
      o.ignored = !InRange(s.dets[d], range);
    }
    out->push_back(o);
  }
  return counted;
}

// 101-point interpolated AP; -1 without ground truth.
double AveragePrecision(std::vector<DetOutcome> dets, int num_gt) {
  if (num_gt == 0) return -1.0;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetOutcome& a, const DetOutcome& b) {
                     return a.score > b.score;
                   });
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (const DetOutcome& d : dets) {
    if (d.ignored) continue;
    (d.matched ? tp : fp) += 1;
    recall.push_back(tp / num_gt);
    precision.push_back(tp / (tp + fp));
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double sum = 0;
  for (int r = 0; r < kRecallPoints; ++r) {
    const double level = static_cast<double>(r) / (kRecallPoints - 1);
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / kRecallPoints;
}

double MeanDefined(const std::vector<double>& values) {
  double sum = 0;
  int n = 0;
  for (double v : values) {
    if (v < 0) continue;
    sum += v;
    ++n;
  }
  return n ? sum / n : -1.0;
}

// Mean AP over classes for one range at each threshold.
std::vector<double> ApPerThreshold(
    const std::vector<std::vector<ClassSlice>>& slices,
    const ScaleBucket& range, std::span<const double> thresholds) {
  std::vector<double> out;
  for (double t : thresholds) {
    std::vector<double> per_class;
    for (const std::vector<ClassSlice>& cls : slices) {
      std::vector<DetOutcome> dets;
      int num_gt = 0;
      for (const ClassSlice& s : cls) num_gt += MatchSlice(s, range, t, &dets);
      per_class.push_back(AveragePrecision(std::move(dets), num_gt));
    }
    out.push_back(MeanDefined(per_class));
  }
  return out;
}

std::vector<std::vector<ClassSlice>> SliceAll(std::span<const EvalImage> images,
                                              const EvalConfig& config) {
  std::vector<std::vector<ClassSlice>> slices(config.num_classes);
  for (int c = 0; c < config.num_classes; ++c) {
    for (const EvalImage& image : images) {
      slices[c].push_back(Slice(image, c, config.max_detections));
    }
  }
  return slices;
}

LrpResult LrpFromSlices(const std::vector<std::vector<ClassSlice>>& slices,
                        double tau) {
  const ScaleBucket all{"all"};
  LrpResult mean{0, 0, 0, 0};
  int classes = 0, located = 0;
  for (const std::vector<ClassSlice>& cls : slices) {
    std::vector<DetOutcome> dets;
    int num_gt = 0;
    for (const ClassSlice& s : cls) num_gt += MatchSlice(s, all, tau, &dets);
    if (num_gt == 0) continue;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const DetOutcome& a, const DetOutcome& b) {
                       return a.score > b.score;
                     });
    // Empty detection set: every object missed.
    LrpResult best{1.0, 0.0, 1.0, 0.0};
    bool best_has_tp = false;
    double tp = 0, fp = 0, loc = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].matched) {
        tp += 1;
        loc += 1.0 - dets[i].iou;
      } else {
        fp += 1;
      }
      // Thresholds sit between distinct scores only.
      if (i + 1 < dets.size() && dets[i + 1].score == dets[i].score) continue;
      const double fn = num_gt - tp;
      const double lrp = (loc / (1.0 - tau) + fp + fn) / (tp + fp + fn);
      if (lrp < best.lrp) {
        best = {lrp, fp / (tp + fp), fn / num_gt, tp > 0 ? loc / tp : 0.0};
        best_has_tp = tp > 0;
      }
    }
    mean.lrp += best.lrp;
    mean.fp += best.fp;
    mean.fn += best.fn;
    if (best_has_tp) {
      mean.loc += best.loc;
      ++located;
    }
    ++classes;
  }
  if (classes == 0) return LrpResult{};
  mean.lrp /= classes;
  mean.fp /= classes;
  mean.fn /= classes;
  mean.loc = located ? mean.loc / located : 0.0;
  return mean;
}

}  // namespace

double PixelIou(const PixelBox& a, const PixelBox& b) {
  if (a.area() <= 0 || b.area() <= 0) return 0.0;
  const double w = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double h = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (w <= 0 || h <= 0) return 0.0;
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

std::vector<ScaleBucket> TinyObjectBuckets(double factor) {
  return {{"vt", 2 * factor, 8 * factor},
          {"t", 8 * factor, 16 * factor},
          {"s", 16 * factor, 32 * factor},
          {"m", 32 * factor, 64 * factor}};
}

std::vector<double> EvalConfig::DefaultIouThresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

void ValidateEvalConfig(const EvalConfig& config) {
  const auto& t = config.iou_thresholds;
  if (t.empty()) Fail(ErrorKind::kConfig, "no IoU thresholds");
  for (size_t i = 0; i < t.size(); ++i) {
    if (!(t[i] > 0 && t[i] < 1) || (i > 0 && !(t[i] > t[i - 1]))) {
      Fail(ErrorKind::kConfig, "IoU thresholds must ascend inside (0, 1)");
    }
  }
  if (config.max_detections < 1) {
    Fail(ErrorKind::kConfig, "max_detections must be positive");
  }
  if (config.num_classes < 1) Fail(ErrorKind::kConfig, "num_classes < 1");
  for (size_t i = 0; i < config.scale_buckets.size(); ++i) {
    const ScaleBucket& b = config.scale_buckets[i];
    if (!(b.lo < b.hi)) Fail(ErrorKind::kConfig, "empty scale bucket ", b.name);
    for (size_t j = 0; j < i; ++j) {
      const ScaleBucket& o = config.scale_buckets[j];
      if (b.lo < o.hi && o.lo < b.hi) {
        Fail(ErrorKind::kConfig, "scale buckets ", o.name, " and ", b.name,
             " overlap");
      }
    }
  }
  for (size_t i = 0; i < config.density_buckets.size(); ++i) {
    const DensityBucket& b = config.density_buckets[i];
    if (b.min_count > b.max_count) {
      Fail(ErrorKind::kConfig, "empty density bucket ", b.name);
    }
    for (size_t j = 0; j < i; ++j) {
      const DensityBucket& o = config.density_buckets[j];
      if (b.min_count <= o.max_count && o.min_count <= b.max_count) {
        Fail(ErrorKind::kConfig, "density buckets ", o.name, " and ", b.name,
             " overlap");
      }
    }
  }
}

std::string ScaleBucketOf(const PixelBox& box,
                          std::span<const ScaleBucket> buckets) {
  for (const ScaleBucket& b : buckets) {
    if (InRange(box, b)) return b.name;
  }
  return "other";
}

LrpResult LrpComponents(std::span<const EvalImage> images,
                        const EvalConfig& config) {
  CheckImages(images, config.num_classes);
  return LrpFromSlices(SliceAll(images, config), config.lrp_iou);
}

MetricReport Evaluate(std::span<const EvalImage> images,
                      const EvalConfig& config) {
  ValidateEvalConfig(config);
  CheckImages(images, config.num_classes);
  const auto slices = SliceAll(images, config);
  MetricReport report;
  report.ap_per_threshold =
      ApPerThreshold(slices, ScaleBucket{"all"}, config.iou_thresholds);
  report.ap = MeanDefined(report.ap_per_threshold);
  for (size_t i = 0; i < config.iou_thresholds.size(); ++i) {
    const double t = config.iou_thresholds[i];
    if (std::abs(t - 0.5) < 1e-9) report.ap50 = report.ap_per_threshold[i];
    if (std::abs(t - 0.75) < 1e-9) report.ap75 = report.ap_per_threshold[i];
  }
  for (const ScaleBucket& b : config.scale_buckets) {
    report.ap_by_scale[b.name] =
        MeanDefined(ApPerThreshold(slices, b, config.iou_thresholds));
  }
  report.lrp = LrpFromSlices(slices, config.lrp_iou);

  EvalConfig flat = config;
  flat.density_buckets.clear();
  flat.scale_buckets.clear();
  for (const DensityBucket& b : config.density_buckets) {
    std::vector<EvalImage> subset;
    for (const EvalImage& image : images) {
      const int n = static_cast<int>(image.ground_truth.size());
      if (n >= b.min_count && n <= b.max_count) subset.push_back(image);
    }
    DensityRow row;
    row.name = b.name;
    row.images = static_cast<int>(subset.size());
    if (!subset.empty()) {
      const MetricReport r = Evaluate(subset, flat);
      row.ap = r.ap;
      row.ap50 = r.ap50;
      row.lrp = r.lrp;
    }
    report.by_density.push_back(row);
  }
  return report;
}

}  // namespace dynaquery
