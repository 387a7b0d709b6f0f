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

// Python bindings. Structured values (configs, records, reports) cross the
// boundary as JSON text; the package wrapper turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dynaquery/counting.h"
#include "dynaquery/error.h"
#include "dynaquery/eval_metrics.h"
#include "dynaquery/experiment.h"
#include "dynaquery/grad_suite.h"
#include "dynaquery/matching_loss.h"
#include "dynaquery/synth_data.h"
#include "json.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace dynaquery {
namespace {

using Box = std::tuple<double, double, double, double>;

ExperimentConfig ConfigFromText(const std::string& text) {
  ExperimentConfig c = DefaultExperimentConfig();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, "config malformed at byte offset ", e.byte);
  }
  from_json(j, c);
  ValidateExperimentConfig(c);
  return c;
}

LevelThresholds Thresholds(const std::optional<std::vector<double>>& cuts,
                           const std::string& convention) {
  if (!cuts) return DeskThresholds();
  LevelThresholds t;
  from_json(json{{"cuts", *cuts}, {"convention", convention}}, t);
  ValidateThresholds(t);
  return t;
}

std::vector<std::pair<int, int>> Assign(
    const std::vector<std::vector<double>>& cost) {
  CostMatrix m;
  m.rows = static_cast<int>(cost.size());
  m.cols = m.rows ? static_cast<int>(cost[0].size()) : 0;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m.cols) {
      Fail(ErrorKind::kDimension, "ragged cost matrix");
    }
    m.values.insert(m.values.end(), row.begin(), row.end());
  }
  return Hungarian(m).pairs;
}

using GtTuple = std::tuple<int, double, double, double, double>;
using DetTuple = std::tuple<int, double, double, double, double, double>;

std::string EvaluateBoxes(
    const std::vector<std::pair<std::vector<GtTuple>, std::vector<DetTuple>>>&
        images,
    int num_classes, int max_detections, double scale_factor) {
  std::vector<EvalImage> eval;
  for (const auto& [gts, dets] : images) {
    EvalImage image;
    for (const auto& [c, x, y, w, h] : gts) {
      image.ground_truth.push_back({c, {x, y, w, h}});
    }
    for (const auto& [c, x, y, w, h, s] : dets) {
      image.detections.push_back({c, {x, y, w, h}, s});
    }
    eval.push_back(std::move(image));
  }
  EvalConfig config;
  config.num_classes = num_classes;
  config.max_detections = max_detections;
  config.scale_buckets = TinyObjectBuckets(scale_factor);
  return json(Evaluate(eval, config)).dump();
}

py::tuple SceneToPython(const SyntheticScene& s) {
  const Shape& shape = s.image.shape();
  py::array_t<double> image({shape[0], shape[1], shape[2]});
  std::copy(s.image.data().begin(), s.image.data().end(), image.mutable_data());
  py::list boxes;
  for (const LabeledBox& b : s.boxes) {
    boxes.append(
        py::make_tuple(b.category, b.box.x, b.box.y, b.box.w, b.box.h));
  }
  return py::make_tuple(image, boxes);
}

py::list GenerateScenes(const std::string& spec_text, int images) {
  SceneSpec spec;
  from_json(json::parse(spec_text), spec);
  py::list out;
  for (const SyntheticScene& s : Generate(spec, images).scenes) {
    out.append(SceneToPython(s));
  }
  return out;
}

std::string TrainRun(const std::string& config_text, const std::string& run_dir,
                     bool evaluate) {
  const ExperimentConfig c = ConfigFromText(config_text);
  const Dataset train = MaterializeData(c.train_data);
  const Dataset test = MaterializeData(c.test_data);
  Model model(c.model);
  py::gil_scoped_release release;
  const RunRecord r =
      Train(c, model, train, &test, {.run_dir = run_dir, .evaluate = evaluate});
  return json(r).dump();
}

std::string EvaluateCheckpoint(const std::string& config_text,
                               const std::string& checkpoint,
                               std::optional<int> fixed_k) {
  const ExperimentConfig c = ConfigFromText(config_text);
  const Model model = LoadCheckpoint(checkpoint, c.model);
  const Dataset test = MaterializeData(c.test_data);
  py::gil_scoped_release release;
  return json(EvaluateRun(model, test, c, fixed_k)).dump();
}

py::list GradCheckSuite(uint64_t seed, double eps) {
  py::list out;
  for (const GradSuiteEntry& e : RunGradCheckSuite(seed, eps)) {
    py::dict d;
    d["group"] = e.group;
    d["name"] = e.report.op_name;
    d["max_rel_error"] = e.report.max_rel_error;
    d["analytic"] = e.report.analytic;
    d["numeric"] = e.report.numeric;
    out.append(d);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> AblationConfigs(
    const std::string& config_text, const std::string& axis) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [label, c] :
       AblationCells(ConfigFromText(config_text), ParseAblationAxis(axis))) {
    out.emplace_back(label, json(c).dump());
  }
  return out;
}

}  // namespace
}  // namespace dynaquery

PYBIND11_MODULE(_core, m) {
  using namespace dynaquery;
  m.doc() = "Native core of the dynaquery package";

  // Messages start with the category, e.g. "config error: ...".
  py::register_exception<Error>(m, "DynaqueryError", PyExc_RuntimeError);

  m.def(
      "count_to_level",
      [](int64_t n, std::optional<std::vector<double>> cuts,
         const std::string& convention) {
        return LevelIndex(CountToLevel(n, Thresholds(cuts, convention)));
      },
      py::arg("n"), py::arg("cuts") = py::none(),
      py::arg("convention") = "upper_inclusive");
  m.def(
      "level_to_budget",
      [](int level, std::vector<int> budgets) {
        return LevelToBudget(static_cast<CountLevel>(level), budgets).k;
      },
      py::arg("level"), py::arg("budgets"));
  m.def(
      "derive_thresholds",
      [](std::vector<int64_t> counts, const std::string& spread) {
        const LevelThresholds t = DeriveThresholds(
            counts, spread == "variance" ? SpreadStatistic::kVariance
                                         : SpreadStatistic::kStdDev);
        return t.cuts;
      },
      py::arg("counts"), py::arg("spread") = "std");
  m.def(
      "giou",
      [](Box a, Box b) {
        const auto [ax0, ay0, ax1, ay1] = a;
        const auto [bx0, by0, bx1, by1] = b;
        return Giou(CornerBox{ax0, ay0, ax1, ay1},
                    CornerBox{bx0, by0, bx1, by1});
      },
      py::arg("a"), py::arg("b"));
  m.def("hungarian", &Assign, py::arg("cost"));
  m.def("evaluate_json", &EvaluateBoxes, py::arg("images"),
        py::arg("num_classes") = 1, py::arg("max_detections") = 1500,
        py::arg("scale_factor") = 0.5);
  m.def("default_config_json",
        [] { return json(DefaultExperimentConfig()).dump(); });
  m.def("normalize_config_json", [](const std::string& text) {
    return json(ConfigFromText(text)).dump();
  });
  m.def("config_hash", [](const std::string& text) {
    return ConfigHash(ConfigFromText(text));
  });
  m.def("generate_json", &GenerateScenes, py::arg("spec"), py::arg("images"));
  m.def("train_json", &TrainRun, py::arg("config"), py::arg("run_dir") = "",
        py::arg("evaluate") = true);
  m.def("evaluate_checkpoint_json", &EvaluateCheckpoint, py::arg("config"),
        py::arg("checkpoint"), py::arg("fixed_k") = py::none());
  m.def("grad_check", &GradCheckSuite, py::arg("seed") = 1,
        py::arg("eps") = 1e-5);
  m.def("ablation_configs_json", &AblationConfigs, py::arg("config"),
        py::arg("axis"));
}
