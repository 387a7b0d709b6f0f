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

#include "dynaquery/experiment.h"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr char kCheckpointMagic[8] = {'D', 'Q', 'C', 'K', 'P', 'T', '0', '1'};

template <typename F>
void ConfigGuard(const char* what, F&& f) {
  try {
    f();
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, what, ": ", e.what());
  }
}

json OptimizerToJson(const OptimizerConfig& o) {
  return {{"kind", OptimizerKindName(o.kind)},
          {"lr", o.lr},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon},
          {"clip_norm", o.clip_norm}};
}

void OptimizerFromJson(const json& j, OptimizerConfig& o) {
  for (const auto& [key, v] : j.items()) {
    if (key == "kind")
      o.kind = ParseOptimizerKind(v.get<std::string>());
    else if (key == "lr")
      v.get_to(o.lr);
    else if (key == "momentum")
      v.get_to(o.momentum);
    else if (key == "beta1")
      v.get_to(o.beta1);
    else if (key == "beta2")
      v.get_to(o.beta2);
    else if (key == "epsilon")
      v.get_to(o.epsilon);
    else if (key == "clip_norm")
      v.get_to(o.clip_norm);
    else
      Fail(ErrorKind::kConfig, "unknown optimizer key ", key);
  }
}

json SourceToJson(const DataSource& s) {
  json j{{"spec", s.spec}, {"images", s.images}};
  if (!s.path.empty()) j["path"] = s.path;
  return j;
}

void SourceFromJson(const json& j, DataSource& s) {
  for (const auto& [key, v] : j.items()) {
    if (key == "spec")
      v.get_to(s.spec);
    else if (key == "images")
      v.get_to(s.images);
    else if (key == "path")
      v.get_to(s.path);
    else
      Fail(ErrorKind::kConfig, "unknown data key ", key);
  }
}

uint64_t Mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Epoch-wise shuffled visiting order, identical on every platform.
class Schedule {
 public:
  Schedule(int n, uint64_t seed) : order_(n), state_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
  }
  int Next() {
    if (pos_ == 0) Shuffle();
    const int i = order_[pos_];
    pos_ = (pos_ + 1) % order_.size();
    return i;
  }

 private:
  void Shuffle() {
    for (size_t i = order_.size(); i > 1; --i) {
      state_ = Mix(state_);
      std::swap(order_[i - 1], order_[state_ % i]);
    }
  }
  std::vector<int> order_;
  uint64_t state_;
  size_t pos_ = 0;
};

std::string LevelRangeName(const LevelThresholds& t, int level) {
  const auto fmt = [](double v) { return StrCat(v); };
  const int last = static_cast<int>(t.cuts.size());
  const bool upper = t.convention == CutConvention::kUpperInclusive;
  const char* lo_op = upper ? " < " : " <= ";
  const char* hi_op = upper ? " <= " : " < ";
  if (level == 0) return StrCat("N", hi_op, fmt(t.cuts[0]));
  if (level == last) return StrCat(fmt(t.cuts[last - 1]), lo_op, "N");
  return StrCat(fmt(t.cuts[level - 1]), lo_op, "N", hi_op, fmt(t.cuts[level]));
}

std::string Pct(double v) {
  if (v < 0) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100 * v);
  return buf;
}

std::string Fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

json LrpToJson(const LrpResult& r) {
  return {{"lrp", r.lrp}, {"fp", r.fp}, {"fn", r.fn}, {"loc", r.loc}};
}

bool AllFinite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

bool OutputFinite(const ModelOutput& out) {
  if (out.count_logits.defined() && !AllFinite(out.count_logits.data())) {
    return false;
  }
  for (const LayerPrediction& p : out.decoded.per_layer) {
    if (!AllFinite(p.class_logits.data()) || !AllFinite(p.boxes.data())) {
      return false;
    }
  }
  return AllFinite(out.scores.data());
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) Fail(ErrorKind::kInput, "cannot write ", path.string());
}

}  // namespace

ExperimentConfig DefaultExperimentConfig() {
  ExperimentConfig c;
  c.train_data.spec.seed = 1;
  c.train_data.images = 2000;
  c.test_data.spec.seed = 2;
  c.test_data.images = 500;
  return c;
}

void ValidateExperimentConfig(const ExperimentConfig& c) {
  ValidateModelConfig(c.model);
  if (c.train.stage1_steps < 0 || c.train.stage2_steps < 0) {
    Fail(ErrorKind::kConfig, "step counts must be >= 0");
  }
  if (c.train.log_every < 1) Fail(ErrorKind::kConfig, "log_every must be >= 1");
  if (!(c.train.selection_weight >= 0)) {
    Fail(ErrorKind::kConfig, "selection_weight must be >= 0");
  }
  const LossWeights& w = c.loss;
  if (!(w.l1 >= 0 && w.giou >= 0 && w.focal >= 0 && w.counting >= 0 &&
        w.gamma >= 0)) {
    Fail(ErrorKind::kConfig, "loss weights must be >= 0");
  }
  for (const DataSource* s : {&c.train_data, &c.test_data}) {
    if (s->path.empty()) {
      if (s->images < 0) Fail(ErrorKind::kConfig, "negative image count");
      ValidateSceneSpec(s->spec);
      if (s->spec.image_size != c.model.image_size) {
        Fail(ErrorKind::kConfig, "data image_size ", s->spec.image_size,
             " differs from the model's ", c.model.image_size);
      }
      if (s->spec.num_classes > c.model.transformer.num_classes) {
        Fail(ErrorKind::kConfig, "data has more classes than the model");
      }
    }
  }
  if (c.eval.max_detections < 1 || !(c.eval.scale_factor > 0) ||
      c.eval.sparse_below < 1 || c.eval.dense_above < c.eval.sparse_below) {
    Fail(ErrorKind::kConfig, "bad eval settings");
  }
  for (int k : c.fixed_k_sweep) {
    if (k < 1) Fail(ErrorKind::kConfig, "fixed_k_sweep entries must be >= 1");
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"model", c.model},
           {"train",
            {{"stage1_steps", c.train.stage1_steps},
             {"stage2_steps", c.train.stage2_steps},
             {"stage1_optimizer", OptimizerToJson(c.train.stage1_optimizer)},
             {"stage2_optimizer", OptimizerToJson(c.train.stage2_optimizer)},
             {"selection_weight", c.train.selection_weight},
             {"log_every", c.train.log_every}}},
           {"loss",
            {{"l1", c.loss.l1},
             {"giou", c.loss.giou},
             {"focal", c.loss.focal},
             {"counting", c.loss.counting},
             {"alpha", c.loss.alpha},
             {"gamma", c.loss.gamma}}},
           {"train_data", SourceToJson(c.train_data)},
           {"test_data", SourceToJson(c.test_data)},
           {"eval",
            {{"max_detections", c.eval.max_detections},
             {"scale_factor", c.eval.scale_factor},
             {"sparse_below", c.eval.sparse_below},
             {"dense_above", c.eval.dense_above}}},
           {"seed", c.seed},
           {"output_dir", c.output_dir},
           {"fixed_k_sweep", c.fixed_k_sweep}};
}

void from_json(const json& j, ExperimentConfig& c) {
  ConfigGuard("experiment config", [&] {
    if (!j.is_object()) Fail(ErrorKind::kConfig, "config must be an object");
    for (const auto& [key, v] : j.items()) {
      if (key == "model") {
        v.get_to(c.model);
      } else if (key == "train") {
        for (const auto& [k, t] : v.items()) {
          if (k == "stage1_steps")
            t.get_to(c.train.stage1_steps);
          else if (k == "stage2_steps")
            t.get_to(c.train.stage2_steps);
          else if (k == "stage1_optimizer")
            OptimizerFromJson(t, c.train.stage1_optimizer);
          else if (k == "stage2_optimizer")
            OptimizerFromJson(t, c.train.stage2_optimizer);
          else if (k == "selection_weight")
            t.get_to(c.train.selection_weight);
          else if (k == "log_every")
            t.get_to(c.train.log_every);
          else
            Fail(ErrorKind::kConfig, "unknown train key ", k);
        }
      } else if (key == "loss") {
        for (const auto& [k, t] : v.items()) {
          if (k == "l1")
            t.get_to(c.loss.l1);
          else if (k == "giou")
            t.get_to(c.loss.giou);
          else if (k == "focal")
            t.get_to(c.loss.focal);
          else if (k == "counting")
            t.get_to(c.loss.counting);
          else if (k == "alpha")
            t.get_to(c.loss.alpha);
          else if (k == "gamma")
            t.get_to(c.loss.gamma);
          else
            Fail(ErrorKind::kConfig, "unknown loss key ", k);
        }
      } else if (key == "train_data") {
        SourceFromJson(v, c.train_data);
      } else if (key == "test_data") {
        SourceFromJson(v, c.test_data);
      } else if (key == "eval") {
        for (const auto& [k, t] : v.items()) {
          if (k == "max_detections")
            t.get_to(c.eval.max_detections);
          else if (k == "scale_factor")
            t.get_to(c.eval.scale_factor);
          else if (k == "sparse_below")
            t.get_to(c.eval.sparse_below);
          else if (k == "dense_above")
            t.get_to(c.eval.dense_above);
          else
            Fail(ErrorKind::kConfig, "unknown eval key ", k);
        }
      } else if (key == "seed") {
        v.get_to(c.seed);
      } else if (key == "output_dir") {
        v.get_to(c.output_dir);
      } else if (key == "fixed_k_sweep") {
        v.get_to(c.fixed_k_sweep);
      } else {
        Fail(ErrorKind::kConfig, "unknown config key ", key);
      }
    }
  });
}

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kInput, "cannot open config ", path);
  const std::string text{std::istreambuf_iterator<char>(in),
                         std::istreambuf_iterator<char>()};
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, path, ": malformed at byte offset ", e.byte, ": ",
         e.what());
  }
  ExperimentConfig c = DefaultExperimentConfig();
  from_json(j, c);
  ValidateExperimentConfig(c);
  return c;
}

std::string ConfigHash(const ExperimentConfig& config) {
  json j = config;
  j.erase("output_dir");
  return Fnv1aHex(j.dump());
}

Dataset MaterializeData(const DataSource& source) {
  if (!source.path.empty()) return LoadDataset(source.path);
  return Generate(source.spec, source.images);
}

bool SameRecord(const RunRecord& a, const RunRecord& b) {
  json x = a, y = b;
  x.erase("wall_clock_seconds");
  y.erase("wall_clock_seconds");
  return x == y;
}

void to_json(json& j, const MetricReport& r) {
  json density = json::array();
  for (const DensityRow& row : r.by_density) {
    density.push_back({{"name", row.name},
                       {"images", row.images},
                       {"ap", row.ap},
                       {"ap50", row.ap50},
                       {"lrp", LrpToJson(row.lrp)}});
  }
  j = json{{"ap", r.ap},
           {"ap50", r.ap50},
           {"ap75", r.ap75},
           {"ap_per_threshold", r.ap_per_threshold},
           {"ap_by_scale", r.ap_by_scale},
           {"lrp", LrpToJson(r.lrp)},
           {"by_density", density}};
}

void to_json(json& j, const EvalResult& r) {
  json levels = json::array();
  for (const LevelRow& row : r.by_level) {
    levels.push_back({{"name", row.name},
                      {"images", row.images},
                      {"mean_queries", row.mean_queries},
                      {"count_accuracy", row.count_accuracy},
                      {"metrics", row.metrics}});
  }
  j = json{{"overall", r.overall},
           {"by_level", levels},
           {"count_accuracy", r.count_accuracy},
           {"mean_queries", r.mean_queries},
           {"budget_mode", r.budget_mode}};
}

void to_json(json& j, const RunRecord& r) {
  json steps = json::array();
  for (const StepRecord& s : r.steps) {
    steps.push_back({{"stage", s.stage},
                     {"step", s.step},
                     {"l1", s.l1},
                     {"giou", s.giou},
                     {"focal", s.focal},
                     {"hungarian", s.hungarian},
                     {"aux", s.aux},
                     {"counting", s.counting},
                     {"selection", s.selection},
                     {"total", s.total},
                     {"grad_norm", s.grad_norm}});
  }
  j = json{{"config_hash", r.config_hash},
           {"architecture_hash", r.architecture_hash},
           {"steps", steps},
           {"stage1_count_accuracy", r.stage1_count_accuracy},
           {"wall_clock_seconds", r.wall_clock_seconds}};
  if (r.eval) j["eval"] = *r.eval;
}

namespace {

template <typename F>
void ParseGuard(const char* what, F&& f) {
  try {
    f();
  } catch (const json::exception& e) {
    Fail(ErrorKind::kParse, what, ": ", e.what());
  }
}

LrpResult LrpFromJson(const json& j) {
  return {j.at("lrp").get<double>(), j.at("fp").get<double>(),
          j.at("fn").get<double>(), j.at("loc").get<double>()};
}

}  // namespace

void from_json(const json& j, MetricReport& r) {
  ParseGuard("metric report", [&] {
    j.at("ap").get_to(r.ap);
    j.at("ap50").get_to(r.ap50);
    j.at("ap75").get_to(r.ap75);
    j.at("ap_per_threshold").get_to(r.ap_per_threshold);
    j.at("ap_by_scale").get_to(r.ap_by_scale);
    r.lrp = LrpFromJson(j.at("lrp"));
    r.by_density.clear();
    for (const json& d : j.at("by_density")) {
      r.by_density.push_back(
          {d.at("name").get<std::string>(), d.at("images").get<int>(),
           d.at("ap").get<double>(), d.at("ap50").get<double>(),
           LrpFromJson(d.at("lrp"))});
    }
  });
}

void from_json(const json& j, EvalResult& r) {
  ParseGuard("eval result", [&] {
    j.at("overall").get_to(r.overall);
    r.by_level.clear();
    for (const json& l : j.at("by_level")) {
      LevelRow row;
      l.at("name").get_to(row.name);
      l.at("images").get_to(row.images);
      l.at("mean_queries").get_to(row.mean_queries);
      l.at("count_accuracy").get_to(row.count_accuracy);
      l.at("metrics").get_to(row.metrics);
      r.by_level.push_back(std::move(row));
    }
    j.at("count_accuracy").get_to(r.count_accuracy);
    j.at("mean_queries").get_to(r.mean_queries);
    j.at("budget_mode").get_to(r.budget_mode);
  });
}

void from_json(const json& j, RunRecord& r) {
  ParseGuard("run record", [&] {
    j.at("config_hash").get_to(r.config_hash);
    j.at("architecture_hash").get_to(r.architecture_hash);
    r.steps.clear();
    for (const json& s : j.at("steps")) {
      StepRecord step;
      s.at("stage").get_to(step.stage);
      s.at("step").get_to(step.step);
      s.at("l1").get_to(step.l1);
      s.at("giou").get_to(step.giou);
      s.at("focal").get_to(step.focal);
      s.at("hungarian").get_to(step.hungarian);
      s.at("aux").get_to(step.aux);
      s.at("counting").get_to(step.counting);
      s.at("selection").get_to(step.selection);
      s.at("total").get_to(step.total);
      s.at("grad_norm").get_to(step.grad_norm);
      r.steps.push_back(step);
    }
    j.at("stage1_count_accuracy").get_to(r.stage1_count_accuracy);
    j.at("wall_clock_seconds").get_to(r.wall_clock_seconds);
    if (j.contains("eval")) r.eval = j.at("eval").get<EvalResult>();
  });
}

RunRecord LoadRunRecord(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kInput, "cannot open run record ", path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, path, ": malformed at byte offset ", e.byte);
  }
  return j.get<RunRecord>();
}

void SaveCheckpoint(const Model& model, const ExperimentConfig& config,
                    const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoints are written little-endian");
  const ParameterList params = model.Parameters();
  json tensors = json::array();
  for (const NamedTensor& p : params) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  }
  const json meta{{"architecture_hash", ArchitectureHash(model.config())},
                  {"config_hash", ConfigHash(config)},
                  {"model", model.config()},
                  {"tensors", tensors}};
  const std::string header = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kInput, "cannot write checkpoint ", path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint64_t size = header.size();
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const NamedTensor& p : params) {
    const auto data = p.tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) Fail(ErrorKind::kInput, "write failed for checkpoint ", path);
}

Model LoadCheckpoint(const std::string& path, const ModelConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kInput, "cannot open checkpoint ", path);
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>()};
  size_t pos = 0;
  auto need = [&](size_t n, const char* what) {
    if (pos + n > bytes.size()) {
      Fail(ErrorKind::kParse, path, ": truncated ", what, " at byte offset ",
           pos);
    }
  };
  need(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic))) {
    Fail(ErrorKind::kParse, path, ": not a checkpoint (byte offset 0)");
  }
  pos += sizeof(kCheckpointMagic);
  uint64_t size = 0;
  need(sizeof(size), "header size");
  std::memcpy(&size, bytes.data() + pos, sizeof(size));
  pos += sizeof(size);
  need(size, "header");
  json meta;
  try {
    meta = json::parse(bytes.begin() + pos, bytes.begin() + pos + size);
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, path, ": header malformed at byte offset ",
         pos + e.byte - 1);
  }
  pos += size;
  const std::string want = ArchitectureHash(expected);
  const std::string have = meta.value("architecture_hash", "");
  if (have != want) {
    Fail(ErrorKind::kConfig, "checkpoint ", path, " has architecture ", have,
         " but the configuration expects ", want);
  }
  // Budget settings come from the caller; weights from the file.
  Model model(expected);
  ParameterList params = model.Parameters();
  const json& tensors = meta.at("tensors");
  if (tensors.size() != params.size()) {
    Fail(ErrorKind::kConfig, "checkpoint ", path, " holds ", tensors.size(),
         " tensors, model has ", params.size());
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name") != params[i].name ||
        tensors[i].at("shape").get<Shape>() != params[i].tensor.shape()) {
      Fail(ErrorKind::kConfig, "checkpoint tensor ", i, " (",
           tensors[i].at("name").get<std::string>(), ") does not fit ",
           params[i].name);
    }
    const size_t n = params[i].tensor.numel() * sizeof(double);
    need(n, "tensor data");
    std::memcpy(params[i].tensor.mutable_data().data(), bytes.data() + pos, n);
    pos += n;
  }
  if (pos != bytes.size()) {
    Fail(ErrorKind::kParse, path, ": trailing bytes at byte offset ", pos);
  }
  return model;
}

double CountingAccuracy(const Model& model, const Dataset& data) {
  if (!model.config().use_counting || data.size() == 0) return -1;
  NoGradGuard no_grad;
  int correct = 0;
  for (const SyntheticScene& s : data.scenes) {
    const CountLevel truth = CountToLevel(s.count(), model.config().thresholds);
    correct += model.Count(s.image).level == truth;
  }
  return static_cast<double>(correct) / data.size();
}

RunRecord Train(const ExperimentConfig& config, Model& model,
                const Dataset& train, const Dataset* test,
                const TrainOptions& options) {
  ValidateExperimentConfig(config);
  if (ArchitectureHash(model.config()) != ArchitectureHash(config.model)) {
    Fail(ErrorKind::kConfig, "model does not match the configuration");
  }
  if (train.size() == 0 &&
      config.train.stage1_steps + config.train.stage2_steps > 0) {
    Fail(ErrorKind::kInput, "empty training set");
  }
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig& mc = model.config();
  RunRecord record;
  record.config_hash = ConfigHash(config);
  record.architecture_hash = ArchitectureHash(mc);
  fs::path dir;
  if (!options.run_dir.empty()) {
    dir = options.run_dir;
    fs::create_directories(dir);
    WriteText(dir / "config.json", json(config).dump(2) + "\n");
  }
  auto checkpoint = [&](const char* name) {
    if (!dir.empty()) SaveCheckpoint(model, config, (dir / name).string());
  };
  auto diverged = [&](int stage, int step) {
    checkpoint("last_good.ckpt");
    Fail(ErrorKind::kDivergence, "non-finite loss at stage ", stage, " step ",
         step, dir.empty() ? "" : "; last good weights in last_good.ckpt");
  };

  Schedule schedule(train.size(), config.seed);
  if (mc.use_counting && config.train.stage1_steps > 0) {
    Optimizer opt(model.Parameters(ParamGroup::kCountingPath),
                  config.train.stage1_optimizer);
    for (int step = 0; step < config.train.stage1_steps; ++step) {
      const SyntheticScene& scene = train.scenes[schedule.Next()];
      opt.ZeroGrad();
      const Tensor loss =
          CountTerm(model.Count(scene.image), mc, scene.count());
      StepRecord r{1, step};
      r.counting = r.total = loss.item();
      if (!std::isfinite(r.total)) diverged(1, step);
      loss.Backward();
      r.grad_norm = opt.Step();
      record.steps.push_back(r);
      if (options.on_step) options.on_step(r);
    }
    checkpoint("stage1.ckpt");
    if (test) record.stage1_count_accuracy = CountingAccuracy(model, *test);
  }

  if (config.train.stage2_steps > 0) {
    Optimizer opt(model.Parameters(ParamGroup::kAll),
                  config.train.stage2_optimizer);
    for (int step = 0; step < config.train.stage2_steps; ++step) {
      const SyntheticScene& scene = train.scenes[schedule.Next()];
      opt.ZeroGrad();
      const ModelOutput out = model.Forward(scene.image);
      if (!OutputFinite(out)) diverged(2, step);
      const GroundTruth gt = ToGroundTruth(scene);
      Tensor counting;
      if (mc.use_counting) {
        CountOutput count{out.count_logits, out.level, out.regressed_count};
        counting = CountTerm(count, mc, scene.count());
      }
      const std::vector<MatchResult> matches =
          MatchLayers(out.decoded, gt, config.loss);
      const LossBreakdown lb =
          TotalLoss(out.decoded, gt, counting, matches, config.loss);
      const Tensor selection =
          SelectionLoss(out.scores, out.shapes, gt, config.loss);
      const Tensor loss = Add(
          lb.total_tensor, MulScalar(selection, config.train.selection_weight));
      StepRecord r{2,          step,        lb.l1,
                   lb.giou,    lb.focal,    lb.hungarian,
                   lb.aux,     lb.counting, selection.item(),
                   loss.item()};
      if (!std::isfinite(r.total)) diverged(2, step);
      loss.Backward();
      r.grad_norm = opt.Step();
      record.steps.push_back(r);
      if (options.on_step) options.on_step(r);
    }
  }
  checkpoint("final.ckpt");
  if (options.evaluate && test) {
    record.eval = EvaluateRun(model, *test, config);
    if (!mc.use_counting || config.train.stage1_steps == 0) {
      record.stage1_count_accuracy = -1;
    }
  }
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  if (!dir.empty()) WriteText(dir / "record.json", json(record).dump(1) + "\n");
  return record;
}

EvalConfig MakeEvalConfig(const ExperimentConfig& config) {
  EvalConfig e;
  e.max_detections = config.eval.max_detections;
  e.scale_buckets = TinyObjectBuckets(config.eval.scale_factor);
  e.num_classes = config.model.transformer.num_classes;
  e.density_buckets = {
      {"sparse", 0, config.eval.sparse_below - 1},
      {"middle", config.eval.sparse_below, config.eval.dense_above},
      {"dense", config.eval.dense_above + 1}};
  return e;
}

EvalResult EvaluateRun(const Model& model, const Dataset& data,
                       const ExperimentConfig& config,
                       std::optional<int> fixed_k) {
  if (data.size() == 0) Fail(ErrorKind::kInput, "empty evaluation set");
  NoGradGuard no_grad;
  const ModelConfig& mc = model.config();
  const int levels = mc.thresholds.num_levels();
  std::vector<EvalImage> images;
  std::vector<int> true_level, queries, correct;
  for (const SyntheticScene& s : data.scenes) {
    const ModelOutput out = model.Forward(s.image, fixed_k);
    EvalImage image = ToEvalImage(s);
    image.detections = ToDetections(out.decoded.final(), mc.image_size);
    images.push_back(std::move(image));
    const CountLevel truth = CountToLevel(s.count(), mc.thresholds);
    true_level.push_back(LevelIndex(truth));
    queries.push_back(out.queries.size());
    correct.push_back(mc.use_counting && out.level == truth);
  }
  const EvalConfig ec = MakeEvalConfig(config);
  EvalResult result;
  result.overall = Evaluate(images, ec);
  result.budget_mode = fixed_k      ? StrCat("fixed k=", *fixed_k)
                       : mc.use_dqs ? "dynamic"
                                    : StrCat("fixed k=", mc.fixed_k);
  result.mean_queries =
      std::accumulate(queries.begin(), queries.end(), 0.0) / queries.size();
  if (mc.use_counting) {
    result.count_accuracy =
        std::accumulate(correct.begin(), correct.end(), 0.0) / correct.size();
  }
  EvalConfig flat = ec;
  flat.density_buckets.clear();
  for (int l = 0; l < levels; ++l) {
    LevelRow row;
    row.name = LevelRangeName(mc.thresholds, l);
    std::vector<EvalImage> subset;
    double q = 0, hits = 0;
    for (size_t i = 0; i < images.size(); ++i) {
      if (true_level[i] != l) continue;
      subset.push_back(images[i]);
      q += queries[i];
      hits += correct[i];
    }
    row.images = static_cast<int>(subset.size());
    if (!subset.empty()) {
      row.mean_queries = q / subset.size();
      if (mc.use_counting) row.count_accuracy = hits / subset.size();
      row.metrics = Evaluate(subset, flat);
    }
    result.by_level.push_back(row);
  }
  return result;
}

DensityLrp SparseDenseLrp(const Model& model, const Dataset& data,
                          const ExperimentConfig& config,
                          std::optional<int> fixed_k) {
  const EvalResult r = EvaluateRun(model, data, config, fixed_k);
  DensityLrp out;
  for (const DensityRow& row : r.overall.by_density) {
    if (row.name == "sparse") {
      out.sparse = row.lrp;
      out.sparse_images = row.images;
    } else if (row.name == "dense") {
      out.dense = row.lrp;
      out.dense_images = row.images;
    }
  }
  return out;
}

AblationAxis ParseAblationAxis(const std::string& name) {
  if (name == "components") return AblationAxis::kComponents;
  if (name == "counting_mode") return AblationAxis::kCountingMode;
  if (name == "num_levels") return AblationAxis::kNumLevels;
  if (name == "fixed_k") return AblationAxis::kFixedK;
  Fail(ErrorKind::kUsage, "unknown ablation axis '", name,
       "' (components, counting_mode, num_levels, fixed_k)");
}

std::string AblationAxisName(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kComponents:
      return "components";
    case AblationAxis::kCountingMode:
      return "counting_mode";
    case AblationAxis::kNumLevels:
      return "num_levels";
    case AblationAxis::kFixedK:
      return "fixed_k";
  }
  return "?";
}

std::vector<std::pair<std::string, ExperimentConfig>> AblationCells(
    const ExperimentConfig& base, AblationAxis axis) {
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  auto with = [&](const std::string& label, auto&& edit) {
    ExperimentConfig c = base;
    edit(c.model);
    cells.emplace_back(label, c);
  };
  switch (axis) {
    case AblationAxis::kComponents:
      with("-", [](ModelConfig& m) {
        m.use_counting = m.use_dqs = m.use_cgfe = false;
      });
      with("CC DQS", [](ModelConfig& m) {
        m.use_counting = m.use_dqs = true;
        m.use_cgfe = false;
      });
      with("CC FE", [](ModelConfig& m) {
        m.use_counting = m.use_cgfe = true;
        m.use_dqs = false;
      });
      with("CC DQS FE", [](ModelConfig& m) {
        m.use_counting = m.use_dqs = m.use_cgfe = true;
      });
      break;
    case AblationAxis::kCountingMode:
      with("Regression", [](ModelConfig& m) {
        m.use_counting = true;
        m.counting_mode = CountingMode::kRegression;
      });
      with("Classification", [](ModelConfig& m) {
        m.use_counting = true;
        m.counting_mode = CountingMode::kClassification;
      });
      break;
    case AblationAxis::kNumLevels: {
      const bool desk = base.model.image_size < 256;
      with("Classification (4cls)", [&](ModelConfig& m) {
        m.use_counting = true;
        m.counting_mode = CountingMode::kClassification;
        m.thresholds = desk ? DeskThresholds() : ReferenceThresholds();
        m.budgets = desk ? DeskBudgets() : ReferenceBudgets();
      });
      with("Classification (5cls)", [&](ModelConfig& m) {
        m.use_counting = true;
        m.counting_mode = CountingMode::kClassification;
        m.thresholds = FiveLevelThresholds(desk);
        m.budgets = FiveLevelBudgets(desk);
      });
      break;
    }
    case AblationAxis::kFixedK:
      for (int k : base.fixed_k_sweep) {
        with(StrCat("fixed k=", k), [&](ModelConfig& m) {
          m.use_dqs = false;
          m.fixed_k = k;
        });
      }
      with("dynamic",
           [](ModelConfig& m) { m.use_counting = m.use_dqs = true; });
      break;
  }
  return cells;
}

AblationTable Ablate(const ExperimentConfig& base, AblationAxis axis,
                     const Dataset& train, const Dataset& test) {
  AblationTable table{axis, {}};
  for (auto& [label, config] : AblationCells(base, axis)) {
    Model model(config.model);
    RunRecord record = Train(config, model, train, &test, {});
    table.cells.push_back({label, config, std::move(record)});
  }
  return table;
}

std::string RenderAblation(const AblationTable& table) {
  std::string out;
  const bool grid = table.axis == AblationAxis::kComponents;
  if (grid) {
    out += "| CC | DQS | FE |";
  } else {
    out += "| Method |";
  }
  out += " AP | AP50 | APvt | APt | APs | APm | Count acc | Queries |\n";
  out += grid ? "|---|---|---|" : "|---|";
  out += "---|---|---|---|---|---|---|---|\n";
  for (const AblationCell& cell : table.cells) {
    const ModelConfig& m = cell.config.model;
    if (grid) {
      out += StrCat("| ", m.use_counting ? "x" : " ", " | ",
                    m.use_dqs ? "x" : " ", " | ", m.use_cgfe ? "x" : " ", " |");
    } else {
      out += StrCat("| ", cell.label, " |");
    }
    if (!cell.record.eval) {
      out += " - | - | - | - | - | - | - | - |\n";
      continue;
    }
    const EvalResult& e = *cell.record.eval;
    const auto& s = e.overall.ap_by_scale;
    auto scale = [&](const char* name) {
      const auto it = s.find(name);
      return it == s.end() ? std::string("-") : Pct(it->second);
    };
    out += StrCat(" ", Pct(e.overall.ap), " | ", Pct(e.overall.ap50), " | ",
                  scale("vt"), " | ", scale("t"), " | ", scale("s"), " | ",
                  scale("m"), " | ", Pct(e.count_accuracy), " | ",
                  Fixed(e.mean_queries, 1), " |\n");
  }
  return out;
}

std::string RenderEval(const EvalResult& r) {
  std::string out =
      "| #Objects in image | #Query | Images | AP | AP50 | AP75 | APvt | APt "
      "| APs | APm | Count acc |\n"
      "|---|---|---|---|---|---|---|---|---|---|---|\n";
  auto row = [&](const std::string& name, const std::string& q, int images,
                 const MetricReport& m, double acc) {
    const auto& s = m.ap_by_scale;
    auto scale = [&](const char* n) {
      const auto it = s.find(n);
      return it == s.end() ? std::string("-") : Pct(it->second);
    };
    out += StrCat("| ", name, " | ", q, " | ", images, " | ", Pct(m.ap), " | ",
                  Pct(m.ap50), " | ", Pct(m.ap75), " | ", scale("vt"), " | ",
                  scale("t"), " | ", scale("s"), " | ", scale("m"), " | ",
                  Pct(acc), " |\n");
  };
  int total = 0;
  for (const LevelRow& l : r.by_level) {
    total += l.images;
    row(l.name, l.images ? Fixed(l.mean_queries, 1) : "-", l.images, l.metrics,
        l.count_accuracy);
  }
  row("Overall", r.budget_mode, total, r.overall, r.count_accuracy);
  out +=
      "\n| Situation | Images | LRP | LRP FP | LRP FN "
      "|\n|---|---|---|---|---|\n";
  for (const DensityRow& d : r.overall.by_density) {
    out += StrCat("| ", d.name, " | ", d.images, " | ",
                  d.images ? Pct(d.lrp.lrp) : "-", " | ",
                  d.images ? Pct(d.lrp.fp) : "-", " | ",
                  d.images ? Pct(d.lrp.fn) : "-", " |\n");
  }
  return out;
}

}  // namespace dynaquery
