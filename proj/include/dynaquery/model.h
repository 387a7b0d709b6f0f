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

#ifndef DYNAQUERY_MODEL_H_
#define DYNAQUERY_MODEL_H_

#include <optional>
#include <string>
#include <vector>

#include "dynaquery/cgfe.h"
#include "dynaquery/counting.h"
#include "dynaquery/detr_head.h"
#include "dynaquery/eval_metrics.h"
#include "dynaquery/matching_loss.h"
#include "dynaquery/nn.h"
#include "dynaquery/pyramid.h"
#include "dynaquery/query_select.h"
#include "json.hpp"

namespace dynaquery {

enum class CountingMode { kClassification, kRegression };

// Desk-scale backbone: stem plus three levels, strides 4, 8 and 16.
inline BackboneConfig DeskBackbone() {
  BackboneConfig b;
  b.stem = true;
  return b;
}

struct ModelConfig {
  int image_size = 64;
  BackboneConfig backbone = DeskBackbone();
  TransformerConfig transformer;
  int cgfe_reduction = 4;
  LevelThresholds thresholds = DeskThresholds();
  std::vector<int> budgets = DeskBudgets();
  double base_scale = kDefaultBaseScale;
  CountingMode counting_mode = CountingMode::kClassification;
  // Ablation switches: counting module, dynamic query selection, CGFE.
  bool use_counting = true;
  bool use_dqs = true;
  bool use_cgfe = true;
  // Budget whenever queries are not chosen dynamically.
  int fixed_k = 90;
  uint64_t init_seed = 7;
};

// Throws kConfig on inconsistent dimensions, tables or switches.
void ValidateModelConfig(const ModelConfig& config);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Parameter groups. The counting path is what the first training stage
// optimizes.
enum class ParamGroup { kAll, kCountingPath, kDetection };

struct ModelOutput {
  std::vector<LevelShape> shapes;
  Tensor count_logits;  // [levels], or [1] regressed count; undefined w/o CC
  CountLevel level = CountLevel::kL0;
  int64_t regressed_count = -1;
  Tensor scores;  // [m, L]
  QuerySet queries;
  DecoderOutput decoded;
};

struct CountOutput {
  Tensor logits;
  CountLevel level = CountLevel::kL0;
  int64_t regressed_count = -1;
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParameterList Parameters(ParamGroup group = ParamGroup::kAll) const;
  int64_t NumParameters() const;

  // Backbone, encoder and counting head only.
  CountOutput Count(const Tensor& image) const;

  // Full forward. `budget` overrides whatever k the configuration implies.
  ModelOutput Forward(const Tensor& image,
                      std::optional<int> budget = std::nullopt) const;

  Decoder& decoder() { return decoder_; }

 private:
  struct Features {
    std::vector<PyramidLevel> emsv;
    DensityMap density;
  };
  Features Encode(const Tensor& image, bool need_density) const;
  CountOutput Classify(const DensityMap& density) const;

  ModelConfig config_;
  Backbone backbone_;
  Encoder encoder_;
  DensityExtractor density_;
  CountHead count_head_;
  Cgfe cgfe_;
  ScoreHead score_head_;
  QueryMaker query_maker_;
  Decoder decoder_;
};

// Level of a regressed count under the configured thresholds.
CountLevel RegressedLevel(int64_t count, const LevelThresholds& thresholds);

// Final-layer predictions as pixel detections, one per query with its best
// class.
std::vector<ScoredBox> ToDetections(const LayerPrediction& prediction,
                                    int image_size);

// Counting loss for either counting mode.
Tensor CountTerm(const CountOutput& count, const ModelConfig& config,
                 int64_t true_count);

// Stable FNV-1a digest of a byte string, as 16 hex digits.
std::string Fnv1aHex(const std::string& bytes);

// Digest of everything that determines parameter shapes.
std::string ArchitectureHash(const ModelConfig& config);

}  // namespace dynaquery

#endif  // DYNAQUERY_MODEL_H_
