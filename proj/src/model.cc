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

#include "dynaquery/model.h"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dynaquery/error.h"
#include "dynaquery/synth_data.h"

namespace dynaquery {
namespace {

using nlohmann::json;

// Each module draws from its own stream so switching one off leaves the
// initialization of the others untouched.
Rng ModuleRng(uint64_t seed, uint64_t module) {
  std::seed_seq seq{static_cast<uint32_t>(seed),
                    static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(module)};
  return Rng(seq);
}

const char* ModeName(CountingMode m) {
  return m == CountingMode::kClassification ? "classification" : "regression";
}

template <typename F>
void ConfigGuard(const char* what, F&& f) {
  try {
    f();
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, what, ": ", e.what());
  }
}

void BackboneFromJson(const json& j, BackboneConfig& b) {
  for (const auto& [key, v] : j.items()) {
    if (key == "levels")
      v.get_to(b.levels);
    else if (key == "channels")
      v.get_to(b.channels);
    else if (key == "in_channels")
      v.get_to(b.in_channels);
    else if (key == "block_depth")
      v.get_to(b.block_depth);
    else if (key == "stem")
      v.get_to(b.stem);
    else
      Fail(ErrorKind::kConfig, "unknown backbone key ", key);
  }
}

void TransformerFromJson(const json& j, TransformerConfig& t) {
  for (const auto& [key, v] : j.items()) {
    if (key == "heads")
      v.get_to(t.heads);
    else if (key == "ffn_hidden")
      v.get_to(t.ffn_hidden);
    else if (key == "encoder_layers")
      v.get_to(t.encoder_layers);
    else if (key == "decoder_layers")
      v.get_to(t.decoder_layers);
    else if (key == "num_classes")
      v.get_to(t.num_classes);
    else
      Fail(ErrorKind::kConfig, "unknown transformer key ", key);
  }
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  j = json{{"image_size", c.image_size},
           {"channels", c.backbone.channels},
           {"backbone",
            {{"levels", c.backbone.levels},
             {"in_channels", c.backbone.in_channels},
             {"block_depth", c.backbone.block_depth},
             {"stem", c.backbone.stem}}},
           {"transformer",
            {{"heads", c.transformer.heads},
             {"ffn_hidden", c.transformer.ffn_hidden},
             {"encoder_layers", c.transformer.encoder_layers},
             {"decoder_layers", c.transformer.decoder_layers},
             {"num_classes", c.transformer.num_classes}}},
           {"cgfe_reduction", c.cgfe_reduction},
           {"thresholds", c.thresholds},
           {"budgets", c.budgets},
           {"base_scale", c.base_scale},
           {"counting_mode", ModeName(c.counting_mode)},
           {"use_counting", c.use_counting},
           {"use_dqs", c.use_dqs},
           {"use_cgfe", c.use_cgfe},
           {"fixed_k", c.fixed_k},
           {"init_seed", c.init_seed}};
}

void from_json(const json& j, ModelConfig& c) {
  ConfigGuard("model config", [&] {
    if (!j.is_object()) Fail(ErrorKind::kConfig, "model must be an object");
    for (const auto& [key, v] : j.items()) {
      if (key == "image_size")
        v.get_to(c.image_size);
      else if (key == "channels")
        v.get_to(c.backbone.channels);
      else if (key == "backbone")
        BackboneFromJson(v, c.backbone);
      else if (key == "transformer")
        TransformerFromJson(v, c.transformer);
      else if (key == "cgfe_reduction")
        v.get_to(c.cgfe_reduction);
      else if (key == "thresholds")
        v.get_to(c.thresholds);
      else if (key == "budgets")
        v.get_to(c.budgets);
      else if (key == "base_scale")
        v.get_to(c.base_scale);
      else if (key == "counting_mode") {
        const std::string mode = v.get<std::string>();
        if (mode == "classification") {
          c.counting_mode = CountingMode::kClassification;
        } else if (mode == "regression") {
          c.counting_mode = CountingMode::kRegression;
        } else {
          Fail(ErrorKind::kConfig, "unknown counting_mode ", mode);
        }
      } else if (key == "use_counting")
        v.get_to(c.use_counting);
      else if (key == "use_dqs")
        v.get_to(c.use_dqs);
      else if (key == "use_cgfe")
        v.get_to(c.use_cgfe);
      else if (key == "fixed_k")
        v.get_to(c.fixed_k);
      else if (key == "init_seed")
        v.get_to(c.init_seed);
      else
        Fail(ErrorKind::kConfig, "unknown model key ", key);
    }
  });
  c.transformer.channels = c.backbone.channels;
}

void ValidateModelConfig(const ModelConfig& c) {
  const int levels = c.backbone.levels;
  if (levels < 1 || c.backbone.channels < 1 || c.backbone.block_depth < 1) {
    Fail(ErrorKind::kConfig, "bad backbone configuration");
  }
  const int divisor = 1 << (levels + (c.backbone.stem ? 1 : 0));
  if (c.image_size < 1 || c.image_size % divisor != 0) {
    Fail(ErrorKind::kConfig, "image_size ", c.image_size,
         " must be a positive multiple of ", divisor);
  }
  const TransformerConfig& t = c.transformer;
  if (t.channels != c.backbone.channels) {
    Fail(ErrorKind::kConfig, "transformer and backbone widths differ");
  }
  if (t.heads < 1 || t.channels % t.heads != 0) {
    Fail(ErrorKind::kConfig, "heads must divide the channel width");
  }
  if (t.channels % 8 != 0) {
    Fail(ErrorKind::kConfig, "channel width must be a multiple of 8");
  }
  if (t.encoder_layers < 0 || t.decoder_layers < 1 || t.ffn_hidden < 1 ||
      t.num_classes < 1) {
    Fail(ErrorKind::kConfig, "bad transformer configuration");
  }
  if (c.cgfe_reduction < 1 || c.backbone.channels % c.cgfe_reduction != 0) {
    Fail(ErrorKind::kConfig, "cgfe_reduction must divide the channel width");
  }
  ValidateThresholds(c.thresholds);
  ValidateBudgets(c.budgets, c.thresholds.num_levels());
  if ((c.use_dqs || c.use_cgfe) && !c.use_counting) {
    Fail(ErrorKind::kConfig,
         "dynamic queries and feature enhancement need the counting module");
  }
  if (c.fixed_k < 1) Fail(ErrorKind::kConfig, "fixed_k must be positive");
}

CountLevel RegressedLevel(int64_t count, const LevelThresholds& thresholds) {
  return CountToLevel(count, thresholds);
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.transformer.channels = config_.backbone.channels;
  ValidateModelConfig(config_);
  const int d = config_.backbone.channels;
  const uint64_t s = config_.init_seed;
  Rng r0 = ModuleRng(s, 0), r1 = ModuleRng(s, 1), r2 = ModuleRng(s, 2),
      r3 = ModuleRng(s, 3), r4 = ModuleRng(s, 4), r5 = ModuleRng(s, 5),
      r6 = ModuleRng(s, 6), r7 = ModuleRng(s, 7);
  backbone_ = Backbone(config_.backbone, r0);
  encoder_ = Encoder(config_.transformer, r1);
  if (config_.use_counting) {
    density_ = DensityExtractor(d, r2);
    const int outputs = config_.counting_mode == CountingMode::kClassification
                            ? config_.thresholds.num_levels()
                            : 1;
    count_head_ = CountHead(d, outputs, r3);
  }
  if (config_.use_cgfe) {
    cgfe_ = Cgfe(d, config_.cgfe_reduction, config_.backbone.levels, r4);
  }
  score_head_ = ScoreHead(d, config_.transformer.num_classes, r5);
  query_maker_ = QueryMaker(d, r6);
  decoder_ = Decoder(config_.transformer, r7);
}

ParameterList Model::Parameters(ParamGroup group) const {
  ParameterList out;
  const bool counting = group != ParamGroup::kDetection;
  const bool detection = group != ParamGroup::kCountingPath;
  if (counting) {
    backbone_.Collect("backbone", &out);
    encoder_.Collect("encoder", &out);
    if (config_.use_counting) {
      density_.Collect("density", &out);
      count_head_.Collect("count_head", &out);
    }
  }
  if (detection) {
    if (config_.use_cgfe) cgfe_.Collect("cgfe", &out);
    score_head_.Collect("score_head", &out);
    query_maker_.Collect("query_maker", &out);
    decoder_.Collect("decoder", &out);
  }
  return out;
}

int64_t Model::NumParameters() const {
  int64_t n = 0;
  for (const NamedTensor& p : Parameters()) n += p.tensor.numel();
  return n;
}

Model::Features Model::Encode(const Tensor& image, bool need_density) const {
  if (image.rank() != 3 || image.dim(0) != config_.backbone.in_channels ||
      image.dim(1) != config_.image_size ||
      image.dim(2) != config_.image_size) {
    Fail(ErrorKind::kDimension, "image ", ShapeToString(image.shape()),
         " does not match the configured ", config_.image_size, " px input");
  }
  const std::vector<PyramidLevel> pyramid = ExtractPyramid(image, backbone_);
  const FlattenedFeatures encoded =
      dynaquery::Encode(FlattenLevels(pyramid), encoder_);
  Features f;
  f.emsv = UnflattenLevels(encoded, encoded.shapes);
  if (need_density) f.density = DensityExtract(f.emsv.front(), density_);
  return f;
}

CountOutput Model::Classify(const DensityMap& density) const {
  CountOutput out;
  out.logits = count_head_.Forward(density);
  if (config_.counting_mode == CountingMode::kClassification) {
    out.level = ArgmaxLevel(out.logits.data());
  } else {
    out.regressed_count = RoundCount(out.logits.item());
    out.level = RegressedLevel(out.regressed_count, config_.thresholds);
  }
  return out;
}

CountOutput Model::Count(const Tensor& image) const {
  if (!config_.use_counting) {
    Fail(ErrorKind::kConfig, "model has no counting module");
  }
  return Classify(Encode(image, true).density);
}

ModelOutput Model::Forward(const Tensor& image,
                           std::optional<int> budget) const {
  Features f = Encode(image, config_.use_counting);
  ModelOutput out;
  out.shapes = ShapesOf(f.emsv);
  if (config_.use_counting) {
    const CountOutput count = Classify(f.density);
    out.count_logits = count.logits;
    out.level = count.level;
    out.regressed_count = count.regressed_count;
  }
  std::vector<PyramidLevel> levels = f.emsv;
  if (config_.use_cgfe) {
    const CgfeOutput enhanced = EnhanceFeatures(f.density, f.emsv, cgfe_);
    for (size_t i = 0; i < levels.size(); ++i) {
      levels[i].map = enhanced.features.levels[i];
    }
  }
  const FlattenedFeatures flat = FlattenLevels(levels);
  out.scores = ScorePositions(flat, score_head_);
  if (budget.has_value()) {
    out.queries = FixedPipeline(flat, out.scores, *budget, query_maker_,
                                config_.base_scale);
  } else if (config_.use_dqs) {
    out.queries = DynamicPipeline(flat, out.scores, out.level, query_maker_,
                                  {config_.budgets, config_.base_scale});
  } else {
    out.queries = FixedPipeline(flat, out.scores, config_.fixed_k, query_maker_,
                                config_.base_scale);
  }
  out.decoded = Decode(out.queries, flat, decoder_);
  return out;
}

std::vector<ScoredBox> ToDetections(const LayerPrediction& prediction,
                                    int image_size) {
  const int k = prediction.class_logits.dim(0);
  const int m = prediction.class_logits.dim(1);
  const auto logits = prediction.class_logits.data();
  const auto boxes = prediction.boxes.data();
  std::vector<ScoredBox> out;
  out.reserve(k);
  for (int q = 0; q < k; ++q) {
    int best = 0;
    for (int c = 1; c < m; ++c) {
      if (logits[q * m + c] > logits[q * m + best]) best = c;
    }
    const double score = 1.0 / (1.0 + std::exp(-logits[q * m + best]));
    const double cx = boxes[q * 4], cy = boxes[q * 4 + 1];
    const double w = boxes[q * 4 + 2], h = boxes[q * 4 + 3];
    out.push_back({best,
                   {(cx - w / 2) * image_size, (cy - h / 2) * image_size,
                    w * image_size, h * image_size},
                   score});
  }
  return out;
}

Tensor CountTerm(const CountOutput& count, const ModelConfig& config,
                 int64_t true_count) {
  if (config.counting_mode == CountingMode::kClassification) {
    return CountingLoss(count.logits,
                        CountToLevel(true_count, config.thresholds));
  }
  return CountRegressionLoss(count.logits, true_count);
}

std::string Fnv1aHex(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

std::string ArchitectureHash(const ModelConfig& config) {
  json j = config;
  // Budget choices do not change any parameter shape.
  for (const char* key :
       {"budgets", "base_scale", "use_dqs", "fixed_k", "init_seed"}) {
    j.erase(key);
  }
  j["thresholds"] = config.thresholds.num_levels();
  return Fnv1aHex(j.dump());
}

}  // namespace dynaquery
