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

#ifndef DYNAQUERY_EVAL_METRICS_H_
#define DYNAQUERY_EVAL_METRICS_H_

#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dynaquery {

// Absolute pixels, top-left corner plus extent.
struct PixelBox {
  double x = 0, y = 0, w = 0, h = 0;
  double area() const { return w * h; }
};

double PixelIou(const PixelBox& a, const PixelBox& b);

struct LabeledBox {
  int category = 0;
  PixelBox box;
};

struct ScoredBox {
  int category = 0;
  PixelBox box;
  double score = 0;
};

struct EvalImage {
  std::vector<LabeledBox> ground_truth;
  std::vector<ScoredBox> detections;
};

// Objects whose sqrt(area) lies in [lo, hi).
struct ScaleBucket {
  std::string name;
  double lo = 0;
  double hi = std::numeric_limits<double>::infinity();
};

// Images whose object count lies in [min_count, max_count].
struct DensityBucket {
  std::string name;
  int min_count = 0;
  int max_count = std::numeric_limits<int>::max();
};

// vt [2, 8), t [8, 16), s [16, 32), m [32, 64), multiplied by `factor`.
std::vector<ScaleBucket> TinyObjectBuckets(double factor = 1.0);

struct EvalConfig {
  std::vector<double> iou_thresholds = DefaultIouThresholds();
  int max_detections = 1500;
  std::vector<ScaleBucket> scale_buckets = TinyObjectBuckets();
  std::vector<DensityBucket> density_buckets;
  int num_classes = 1;
  double lrp_iou = 0.5;

  // 0.50, 0.55, ..., 0.95.
  static std::vector<double> DefaultIouThresholds();
};

// Throws kConfig on unordered thresholds or overlapping buckets.
void ValidateEvalConfig(const EvalConfig& config);

// Bucket name, or "other" when the size falls outside every bucket.
std::string ScaleBucketOf(const PixelBox& box,
                          std::span<const ScaleBucket> buckets);

struct LrpResult {
  double lrp = 1.0;
  double fp = 0.0;   // 1 - precision at the optimal threshold
  double fn = 1.0;   // 1 - recall at the optimal threshold
  double loc = 0.0;  // mean 1 - IoU of the true positives
};

struct DensityRow {
  std::string name;
  int images = 0;
  double ap = -1;
  double ap50 = -1;
  LrpResult lrp;
};

// AP values are in [0, 1]; -1 marks a slice without ground truth.
struct MetricReport {
  double ap = -1;
  double ap50 = -1;
  double ap75 = -1;
  std::vector<double> ap_per_threshold;
  std::map<std::string, double> ap_by_scale;
  LrpResult lrp;
  std::vector<DensityRow> by_density;
};

// COCO-style: per image and class, detections in score order claim the
// unmatched ground truth of highest IoU >= t; precision is integrated at 101
// recall points and averaged over classes with ground truth.
MetricReport Evaluate(std::span<const EvalImage> images,
                      const EvalConfig& config);

// Optimal LRP over score thresholds, averaged over classes with ground truth.
LrpResult LrpComponents(std::span<const EvalImage> images,
                        const EvalConfig& config);

}  // namespace dynaquery

#endif  // DYNAQUERY_EVAL_METRICS_H_
