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

// Command-line front end: generate-data, train, eval, ablate, grad-check and
// report. Exit status is 0 on success, 1 when a verification fails, and the
// error category code otherwise.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dynaquery/error.h"
#include "dynaquery/experiment.h"
#include "dynaquery/grad_suite.h"
#include "json.hpp"

namespace dynaquery {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kVerificationFailed = 1;

struct Options {
  std::string config;
  std::string run_dir;
  std::string data_dir;
  std::string checkpoint;
  std::string axis;
  std::optional<int> fixed_k;
  uint64_t seed = 1;
  double eps = 1e-5;
  bool no_eval = false;
  bool quiet = false;
};

ExperimentConfig ReadConfig(const Options& o) {
  return o.config.empty() ? DefaultExperimentConfig()
                          : LoadExperimentConfig(o.config);
}

fs::path RunDir(const Options& o, const ExperimentConfig& c) {
  fs::path dir =
      o.run_dir.empty() ? fs::path(c.output_dir) : fs::path(o.run_dir);
  fs::create_directories(dir);
  return dir;
}

void WriteFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) Fail(ErrorKind::kInput, "cannot write ", path.string());
}

void Snapshot(const fs::path& dir, const ExperimentConfig& c) {
  WriteFile(dir / "config.json", json(c).dump(2) + "\n");
}

// Data from --data (a generate-data output) wins over the config sources.
Dataset ReadSplit(const Options& o, const DataSource& source,
                  const char* split) {
  if (!o.data_dir.empty())
    return LoadDataset((fs::path(o.data_dir) / split).string());
  return MaterializeData(source);
}

int GenerateData(const Options& o) {
  const ExperimentConfig c = ReadConfig(o);
  const fs::path dir =
      o.run_dir.empty() ? fs::path(c.output_dir) / "data" : fs::path(o.run_dir);
  fs::create_directories(dir);
  Snapshot(dir, c);
  for (const auto& [split, source] :
       {std::pair{"train", &c.train_data}, std::pair{"test", &c.test_data}}) {
    const Dataset data = MaterializeData(*source);
    SaveDataset(data, (dir / split).string());
    int objects = 0;
    for (const SyntheticScene& s : data.scenes) objects += s.count();
    std::printf("%s: %d images, %d objects -> %s\n", split, data.size(),
                objects, (dir / split).string().c_str());
  }
  return 0;
}

void PrintStep(const StepRecord& r) {
  if (r.stage == 1) {
    std::printf("stage 1 step %6d  counting %.4f  |g| %.3g\n", r.step,
                r.counting, r.grad_norm);
  } else {
    std::printf(
        "stage 2 step %6d  total %.4f  hungarian %.4f  aux %.4f  counting "
        "%.4f  selection %.4f  |g| %.3g\n",
        r.step, r.total, r.hungarian, r.aux, r.counting, r.selection,
        r.grad_norm);
  }
  std::fflush(stdout);
}

int TrainVerb(const Options& o) {
  const ExperimentConfig c = ReadConfig(o);
  const fs::path dir = RunDir(o, c);
  const Dataset train = ReadSplit(o, c.train_data, "train");
  const Dataset test = ReadSplit(o, c.test_data, "test");
  Model model(c.model);
  TrainOptions options{.run_dir = dir.string(), .evaluate = !o.no_eval};
  if (!o.quiet) {
    options.on_step = [&](const StepRecord& r) {
      const int every = c.train.log_every;
      const int steps =
          r.stage == 1 ? c.train.stage1_steps : c.train.stage2_steps;
      if (r.step % every == 0 || r.step + 1 == steps) PrintStep(r);
    };
  }
  const RunRecord record = Train(c, model, train, &test, options);
  std::printf("config %s  architecture %s  %.1f s\n",
              record.config_hash.c_str(), record.architecture_hash.c_str(),
              record.wall_clock_seconds);
  if (record.stage1_count_accuracy >= 0) {
    std::printf("stage-1 count-level accuracy %.4f\n",
                record.stage1_count_accuracy);
  }
  if (record.eval) {
    const std::string table = RenderEval(*record.eval);
    WriteFile(dir / "eval.md", table);
    std::printf("\n%s", table.c_str());
  }
  std::printf("run directory %s\n", dir.string().c_str());
  return 0;
}

int EvalVerb(const Options& o) {
  const ExperimentConfig c = ReadConfig(o);
  const fs::path dir = o.run_dir.empty() ? fs::path(o.checkpoint).parent_path()
                                         : fs::path(o.run_dir);
  if (!dir.empty()) fs::create_directories(dir);
  const Model model = LoadCheckpoint(o.checkpoint, c.model);
  const Dataset test = ReadSplit(o, c.test_data, "test");
  const EvalResult result = EvaluateRun(model, test, c, o.fixed_k);
  const std::string stem =
      o.fixed_k ? StrCat("eval_fixed_k", *o.fixed_k) : std::string("eval");
  json j = result;
  j["config_hash"] = ConfigHash(c);
  j["checkpoint"] = o.checkpoint;
  WriteFile(dir / (stem + ".json"), j.dump(1) + "\n");
  const std::string table = RenderEval(result);
  WriteFile(dir / (stem + ".md"), table);
  if (!fs::exists(dir / "config.json")) Snapshot(dir, c);
  std::printf("%s", table.c_str());
  return 0;
}

json AblationToJson(const AblationTable& table) {
  json cells = json::array();
  for (const AblationCell& cell : table.cells) {
    cells.push_back({{"label", cell.label},
                     {"config", cell.config},
                     {"record", cell.record}});
  }
  return {{"axis", AblationAxisName(table.axis)}, {"cells", cells}};
}

AblationTable AblationFromJson(const json& j) {
  AblationTable table{ParseAblationAxis(j.at("axis").get<std::string>()), {}};
  for (const json& cell : j.at("cells")) {
    table.cells.push_back({cell.at("label").get<std::string>(),
                           cell.at("config").get<ExperimentConfig>(),
                           cell.at("record").get<RunRecord>()});
  }
  return table;
}

int AblateVerb(const Options& o) {
  const AblationAxis axis = ParseAblationAxis(o.axis);
  const ExperimentConfig c = ReadConfig(o);
  const fs::path dir = RunDir(o, c);
  Snapshot(dir, c);
  const Dataset train = ReadSplit(o, c.train_data, "train");
  const Dataset test = ReadSplit(o, c.test_data, "test");
  const AblationTable table = Ablate(c, axis, train, test);
  const std::string name = "ablation_" + AblationAxisName(axis);
  WriteFile(dir / (name + ".json"), AblationToJson(table).dump(1) + "\n");
  const std::string text = RenderAblation(table);
  WriteFile(dir / (name + ".md"), text);
  std::printf("%s", text.c_str());
  return 0;
}

int GradCheckVerb(const Options& o) {
  const std::vector<GradSuiteEntry> entries = RunGradCheckSuite(o.seed, o.eps);
  std::string text =
      "| Kind | Name | Max rel. error | Analytic | Numeric | Verdict |\n"
      "|---|---|---|---|---|---|\n";
  int failures = 0;
  for (const GradSuiteEntry& e : entries) {
    const bool ok = e.report.max_rel_error < 1e-4;
    failures += !ok;
    char line[256];
    std::snprintf(line, sizeof(line), "| %s | %s | %.3e | %.6g | %.6g | %s |\n",
                  e.group.c_str(), e.report.op_name.c_str(),
                  e.report.max_rel_error, e.report.analytic, e.report.numeric,
                  ok ? "PASS" : "FAIL");
    text += line;
  }
  std::printf("%s%zu checks, %d failed (eps %.0e, tolerance 1e-4)\n",
              text.c_str(), entries.size(), failures, o.eps);
  if (!o.run_dir.empty()) {
    fs::create_directories(o.run_dir);
    WriteFile(fs::path(o.run_dir) / "grad_check.md", text);
  }
  return failures ? kVerificationFailed : 0;
}

std::string StageSummary(const RunRecord& r, int stage) {
  std::vector<double> totals;
  for (const StepRecord& s : r.steps) {
    if (s.stage == stage) totals.push_back(s.total);
  }
  if (totals.empty()) return "";
  const size_t window = std::max<size_t>(1, totals.size() / 10);
  double head = 0, tail = 0;
  for (size_t i = 0; i < window; ++i) {
    head += totals[i];
    tail += totals[totals.size() - 1 - i];
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "| %d | %zu | %.4f | %.4f |\n", stage,
                totals.size(), head / window, tail / window);
  return buf;
}

json ReadJson(const fs::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kInput, "cannot open ", path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kParse, path.string(), ": malformed at byte offset ",
         e.byte);
  }
}

int ReportVerb(const Options& o) {
  const fs::path dir = o.run_dir;
  if (!fs::is_directory(dir)) {
    Fail(ErrorKind::kInput, "no run directory ", dir.string());
  }
  std::string text = StrCat("# Run report: ", dir.string(), "\n\n");
  bool found = false;
  if (fs::exists(dir / "record.json")) {
    found = true;
    const RunRecord r = LoadRunRecord((dir / "record.json").string());
    text += StrCat("Config hash `", r.config_hash, "`, architecture `",
                   r.architecture_hash, "`, wall clock ", r.wall_clock_seconds,
                   " s.\n\n");
    text +=
        "| Stage | Steps | Mean loss (first 10%) | Mean loss (last 10%) |\n"
        "|---|---|---|---|\n";
    text += StageSummary(r, 1) + StageSummary(r, 2) + "\n";
    if (r.stage1_count_accuracy >= 0) {
      text += StrCat("Stage-1 count-level accuracy: ", r.stage1_count_accuracy,
                     "\n\n");
    }
    if (r.eval) text += "## Evaluation\n\n" + RenderEval(*r.eval) + "\n";
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("eval") && name.ends_with(".json")) {
      found = true;
      const EvalResult e = ReadJson(entry.path()).get<EvalResult>();
      text += StrCat("## ", name, "\n\n", RenderEval(e), "\n");
    } else if (name.starts_with("ablation_") && name.ends_with(".json")) {
      found = true;
      const AblationTable t = AblationFromJson(ReadJson(entry.path()));
      text += StrCat("## Ablation: ", AblationAxisName(t.axis), "\n\n",
                     RenderAblation(t), "\n");
    }
  }
  if (!found) {
    Fail(ErrorKind::kInput, "nothing to report in ", dir.string(),
         " (expected record.json, eval*.json or ablation_*.json)");
  }
  WriteFile(dir / "report.md", text);
  std::printf("%s", text.c_str());
  return 0;
}

int Run(int argc, char** argv) {
  CLI::App app{"Count-guided dynamic-query detection experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", o.config, "JSON experiment config")
        ->check(CLI::ExistingFile);
  };
  CLI::App* gen = app.add_subcommand("generate-data",
                                     "Write the train/test synthetic datasets");
  add_config(gen);
  gen->add_option("-o,--out", o.run_dir, "Output directory");

  CLI::App* train = app.add_subcommand("train", "Two-stage training run");
  add_config(train);
  train->add_option("-r,--run-dir", o.run_dir, "Run directory");
  train->add_option("-d,--data", o.data_dir, "Directory from generate-data");
  train->add_flag("--no-eval", o.no_eval, "Skip the final evaluation");
  train->add_flag("-q,--quiet", o.quiet, "No per-step log");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_config(eval);
  eval->add_option("-k,--checkpoint", o.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--fixed-k", o.fixed_k, "Use this many queries per image")
      ->check(CLI::PositiveNumber);
  eval->add_option("-r,--run-dir", o.run_dir, "Output directory");
  eval->add_option("-d,--data", o.data_dir, "Directory from generate-data");

  CLI::App* ablate = app.add_subcommand("ablate", "Train one run per cell");
  add_config(ablate);
  ablate
      ->add_option("-a,--axis", o.axis,
                   "components, counting_mode, num_levels or fixed_k")
      ->required();
  ablate->add_option("-r,--run-dir", o.run_dir, "Run directory");
  ablate->add_option("-d,--data", o.data_dir, "Directory from generate-data");

  CLI::App* grad =
      app.add_subcommand("grad-check", "Finite-difference gradient checks");
  grad->add_option("--seed", o.seed, "Seed for inputs and weights");
  grad->add_option("--eps", o.eps, "Central-difference step");
  grad->add_option("-r,--run-dir", o.run_dir, "Also write grad_check.md here");

  CLI::App* report = app.add_subcommand("report", "Render a run directory");
  report->add_option("run_dir", o.run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }
  if (gen->parsed()) return GenerateData(o);
  if (train->parsed()) return TrainVerb(o);
  if (eval->parsed()) return EvalVerb(o);
  if (ablate->parsed()) return AblateVerb(o);
  if (grad->parsed()) return GradCheckVerb(o);
  return ReportVerb(o);
}

}  // namespace
}  // namespace dynaquery

int main(int argc, char** argv) {
  try {
    return dynaquery::Run(argc, argv);
  } catch (const dynaquery::Error& e) {
    std::cerr << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return dynaquery::kVerificationFailed;
  }
}
