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

#ifndef DYNAQUERY_EXPERIMENT_H_
#define DYNAQUERY_EXPERIMENT_H_

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dynaquery/eval_metrics.h"
#include "dynaquery/matching_loss.h"
#include "dynaquery/model.h"
#include "dynaquery/optim.h"
#include "dynaquery/synth_data.h"
#include "json.hpp"

namespace dynaquery {

// A dataset is either generated from a scene spec or read from disk.
struct DataSource {
  SceneSpec spec;
  int images = 0;
  std::string path;  // wins over `spec` when set
};

struct TrainConfig {
  int stage1_steps = 10000;
  int stage2_steps = 8000;
  OptimizerConfig stage1_optimizer{.lr = 3e-4};
  OptimizerConfig stage2_optimizer{.lr = 3e-4};
  double selection_weight = 1.0;
  int log_every = 50;
};

struct EvalSettings {
  int max_detections = 1500;
  // Multiplies the AI-TOD size buckets.
  double scale_factor = 0.5;
  // Images with fewer objects are sparse, with more are dense.
  int sparse_below = 10;
  int dense_above = 90;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  DataSource train_data;
  DataSource test_data;
  EvalSettings eval;
  uint64_t seed = 1;
  std::string output_dir = "runs/default";
  // Ablation settings.
  std::vector<int> fixed_k_sweep = {30, 50, 90, 150};
};

ExperimentConfig DefaultExperimentConfig();
void ValidateExperimentConfig(const ExperimentConfig& config);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads JSON; syntax errors are kParse, semantic ones kConfig.
ExperimentConfig LoadExperimentConfig(const std::string& path);
// Canonical digest of the whole configuration.
std::string ConfigHash(const ExperimentConfig& config);

Dataset MaterializeData(const DataSource& source);

struct StepRecord {
  int stage = 1;
  int step = 0;
  double l1 = 0, giou = 0, focal = 0, hungarian = 0, aux = 0, counting = 0,
         selection = 0, total = 0;
  double grad_norm = 0;
};

struct LevelRow {
  std::string name;
  int images = 0;
  double mean_queries = 0;
  double count_accuracy = -1;
  MetricReport metrics;
};

struct EvalResult {
  MetricReport overall;
  std::vector<LevelRow> by_level;  // one per true CountLevel
  double count_accuracy = -1;      // -1 without a counting module
  double mean_queries = 0;
  std::string budget_mode;  // "dynamic" or "fixed k=<k>"
};

struct RunRecord {
  std::string config_hash;
  std::string architecture_hash;
  std::vector<StepRecord> steps;
  double stage1_count_accuracy = -1;
  std::optional<EvalResult> eval;
  double wall_clock_seconds = 0;  // excluded from equality
};

// Same content apart from wall-clock time.
bool SameRecord(const RunRecord& a, const RunRecord& b);

void to_json(nlohmann::json& j, const MetricReport& r);
void to_json(nlohmann::json& j, const EvalResult& r);
void to_json(nlohmann::json& j, const RunRecord& r);
// Records read back raise kParse on missing or mistyped fields.
void from_json(const nlohmann::json& j, MetricReport& r);
void from_json(const nlohmann::json& j, EvalResult& r);
void from_json(const nlohmann::json& j, RunRecord& r);
RunRecord LoadRunRecord(const std::string& path);

// Parameters plus metadata; refuses a config whose architecture differs.
void SaveCheckpoint(const Model& model, const ExperimentConfig& config,
                    const std::string& path);
Model LoadCheckpoint(const std::string& path, const ModelConfig& expected);

struct TrainOptions {
  // When set, checkpoints, the config snapshot and the record go here.
  std::string run_dir;
  bool evaluate = true;
  std::function<void(const StepRecord&)> on_step;
};

// Stage 1 trains backbone, encoder and counting head on the counting loss;
// stage 2 trains everything on the total loss plus the selection term. A
// non-finite loss throws kDivergence after writing the last good checkpoint.
RunRecord Train(const ExperimentConfig& config, Model& model,
                const Dataset& train, const Dataset* test,
                const TrainOptions& options = {});

EvalConfig MakeEvalConfig(const ExperimentConfig& config);

// Held-out counting accuracy and AP tables. `fixed_k` overrides the budget.
EvalResult EvaluateRun(const Model& model, const Dataset& data,
                       const ExperimentConfig& config,
                       std::optional<int> fixed_k = std::nullopt);

double CountingAccuracy(const Model& model, const Dataset& data);

// LRP components on the sparse and dense images of `data`.
struct DensityLrp {
  LrpResult sparse;
  LrpResult dense;
  int sparse_images = 0;
  int dense_images = 0;
};
DensityLrp SparseDenseLrp(const Model& model, const Dataset& data,
                          const ExperimentConfig& config,
                          std::optional<int> fixed_k = std::nullopt);

enum class AblationAxis { kComponents, kCountingMode, kNumLevels, kFixedK };
AblationAxis ParseAblationAxis(const std::string& name);
std::string AblationAxisName(AblationAxis axis);

struct AblationCell {
  std::string label;
  ExperimentConfig config;
  RunRecord record;
};

struct AblationTable {
  AblationAxis axis;
  std::vector<AblationCell> cells;
};

// The configurations an axis compares; every cell keeps the data and seeds.
std::vector<std::pair<std::string, ExperimentConfig>> AblationCells(
    const ExperimentConfig& base, AblationAxis axis);
AblationTable Ablate(const ExperimentConfig& base, AblationAxis axis,
                     const Dataset& train, const Dataset& test);

std::string RenderAblation(const AblationTable& table);
// Per-level table followed by the overall row.
std::string RenderEval(const EvalResult& result);

}  // namespace dynaquery

#endif  // DYNAQUERY_EXPERIMENT_H_
