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

#ifndef DYNAQUERY_SYNTH_DATA_H_
#define DYNAQUERY_SYNTH_DATA_H_

#include <cstdint>
#include <string>
#include <vector>

#include "dynaquery/counting.h"
#include "dynaquery/eval_metrics.h"
#include "dynaquery/matching_loss.h"
#include "dynaquery/tensor.h"
#include "json.hpp"

namespace dynaquery {

// Object-count model: a log-normal discretized to the integers in
// [min_count, max_count] whose mean and standard deviation match the targets.
struct CountModel {
  double mu = 0;
  double sigma = 1;
  int min_count = 1;
  int max_count = 1;
  std::vector<double> pmf;  // pmf[i] = P(N = min_count + i)

  double Mean() const;
  double StdDev() const;
  double Probability(int n) const;
};

// Probability mass of round(X) = n for X ~ LogNormal(mu, sigma), restricted to
// [lo, hi] and renormalized.
std::vector<double> DiscretizedLogNormal(double mu, double sigma, int lo,
                                         int hi);

// Newton solve for (mu, sigma) so the discretized moments hit the targets.
// Throws kConfig when no solution is found.
CountModel FitCountModel(double target_mean, double target_std, int min_count,
                         int max_count);

struct SceneSpec {
  int image_size = 64;
  // Multiplies the reference per-image statistics below.
  double count_scale = 0.1;
  double reference_mean = 24.64;
  double reference_std = 63.94;
  int reference_max = 2267;
  // Optional window on the count; 0 means unrestricted.
  int force_min_count = 0;
  int force_max_count = 0;
  // Draw the count level uniformly first, then the count within it.
  bool level_balanced = false;
  LevelThresholds thresholds = DeskThresholds();
  // Object side lengths in pixels: log-normal around `size_median`, clipped.
  double size_median = 5.5;
  double size_sigma = 0.4;
  int size_min = 2;
  int size_max = 32;
  int num_classes = 3;
  double noise = 0.05;
  uint64_t seed = 1;

  double TargetMean() const { return reference_mean * count_scale; }
  double TargetStd() const { return reference_std * count_scale; }
  int MaxCount() const;
};

// Unknown keys and wrong types raise kConfig; missing keys keep defaults.
void to_json(nlohmann::json& j, const LevelThresholds& t);
void from_json(const nlohmann::json& j, LevelThresholds& t);
void to_json(nlohmann::json& j, const SceneSpec& spec);
void from_json(const nlohmann::json& j, SceneSpec& spec);

// Throws kConfig on inconsistent fields, objects that cannot fit, or an
// empty count window.
void ValidateSceneSpec(const SceneSpec& spec);

struct SyntheticScene {
  Tensor image;                   // [3, H, W], values k / 255
  std::vector<LabeledBox> boxes;  // integer pixel boxes
  CountLevel count_level = CountLevel::kL0;

  int count() const { return static_cast<int>(boxes.size()); }
};

struct Dataset {
  SceneSpec spec;
  std::vector<SyntheticScene> scenes;

  int size() const { return static_cast<int>(scenes.size()); }
};

// The count model implied by the spec's targets and limits.
CountModel SceneCountModel(const SceneSpec& spec);

// Scene `index` depends only on (spec, index).
SyntheticScene GenerateScene(const SceneSpec& spec, const CountModel& model,
                             int64_t index);
Dataset Generate(const SceneSpec& spec, int n_images);

// Object counts Generate would produce, without rendering.
std::vector<int> SampleCounts(const SceneSpec& spec, int n_images);

// Normalized center-format boxes for the matching loss.
GroundTruth ToGroundTruth(const SyntheticScene& scene);
EvalImage ToEvalImage(const SyntheticScene& scene);

bool SameScenes(const Dataset& a, const Dataset& b);

// Writes <dir>/annotations.json and <dir>/images.bin, creating `dir`.
void SaveDataset(const Dataset& dataset, const std::string& dir);
// Throws kParse naming the byte offset of corrupt or truncated content.
Dataset LoadDataset(const std::string& dir);

}  // namespace dynaquery

#endif  // DYNAQUERY_SYNTH_DATA_H_
