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

#include "dynaquery/grad_suite.h"

#include <random>
#include <span>
#include <string>

#include "dynaquery/cgfe.h"
#include "dynaquery/counting.h"
#include "dynaquery/detr_head.h"
#include "dynaquery/matching_loss.h"
#include "dynaquery/nn.h"
#include "dynaquery/ops.h"
#include "dynaquery/pyramid.h"
#include "dynaquery/query_select.h"

namespace dynaquery {
namespace {

using Inputs = std::span<const Tensor>;

Tensor Uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Positive biases keep ReLU pre-activations off the kink, where central
// differences see a gradient the analytic pass reports as zero.
void PositiveBiases(const ParameterList& params, Rng& rng, double lo,
                    double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (const NamedTensor& p : params) {
    if (!p.name.ends_with(".bias")) continue;
    Tensor t = p.tensor;
    for (double& x : t.mutable_data()) x = u(rng);
  }
}

std::vector<Tensor> Leaves(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const NamedTensor& p : params) out.push_back(p.tensor);
  return out;
}

FlattenedFeatures RandomFlat(Rng& rng, int d,
                             const std::vector<LevelShape>& shapes) {
  std::vector<PyramidLevel> levels;
  for (size_t i = 0; i < shapes.size(); ++i) {
    levels.push_back({static_cast<int>(i) + 1,
                      Uniform(rng, {d, shapes[i].h, shapes[i].w}), 2 << i});
  }
  return FlattenLevels(levels);
}

QuerySet RandomQueries(Rng& rng, int k, int d) {
  QuerySet q;
  q.content = Uniform(rng, {k, d});
  q.anchors = Uniform(rng, {k, 4}, 0.2, 0.6);
  q.sources.assign(k, TokenPosition{});
  q.indices.assign(k, 0);
  q.budget = {k};
  return q;
}

struct OpCase {
  const char* name;
  DifferentiableFn fn;
  std::vector<Shape> shapes;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> OpCases() {
  return {
      {"add",
       [](Inputs in) { return Add(in[0], in[1]); },
       {{2, 3, 4}, {1, 3, 1}}},
      {"sub", [](Inputs in) { return Sub(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"mul",
       [](Inputs in) { return Mul(in[0], in[1]); },
       {{1, 3, 3}, {4, 3, 3}}},
      {"div",
       [](Inputs in) { return Div(in[0], AddScalar(Abs(in[1]), 1.0)); },
       {{3, 3}, {3, 3}}},
      {"minimum",
       [](Inputs in) { return Minimum(in[0], in[1]); },
       {{4, 4}, {4, 4}}},
      {"maximum",
       [](Inputs in) { return Maximum(in[0], in[1]); },
       {{4, 4}, {4, 4}}},
      {"relu", [](Inputs in) { return Relu(in[0]); }, {{5, 5}}},
      {"sigmoid", [](Inputs in) { return Sigmoid(in[0]); }, {{5, 5}}, -4, 4},
      {"exp", [](Inputs in) { return Exp(in[0]); }, {{5}}},
      {"log", [](Inputs in) { return Log(in[0]); }, {{5}}, 0.5, 2.0},
      {"softplus", [](Inputs in) { return Softplus(in[0]); }, {{6}}, -5, 5},
      {"pow", [](Inputs in) { return PowScalar(in[0], 2.0); }, {{6}}, 0.2, 1},
      {"inverse_sigmoid",
       [](Inputs in) { return InverseSigmoid(in[0]); },
       {{6}},
       0.1,
       0.9},
      {"transpose", [](Inputs in) { return Transpose(in[0]); }, {{3, 5}}},
      {"reshape", [](Inputs in) { return Reshape(in[0], {5, 3}); }, {{3, 5}}},
      {"concat", [](Inputs in) { return Concat(in, 1); }, {{2, 3}, {2, 2}}},
      {"slice", [](Inputs in) { return Slice(in[0], 1, 1, 2); }, {{3, 4, 2}}},
      {"gather_rows",
       [](Inputs in) { return GatherRows(in[0], std::vector<int>{2, 0, 2}); },
       {{3, 4}}},
      {"gather_columns",
       [](Inputs in) {
         return GatherColumnsAsRows(in[0], std::vector<int>{4, 1});
       },
       {{3, 5}}},
      {"sum", [](Inputs in) { return Sum(in[0]); }, {{3, 3}}},
      {"mean", [](Inputs in) { return Mean(in[0]); }, {{3, 3}}},
      {"matmul",
       [](Inputs in) { return MatMul(in[0], in[1]); },
       {{3, 4}, {4, 2}}},
      {"linear",
       [](Inputs in) { return Linear(in[0], in[1], in[2]); },
       {{2, 3, 4}, {5, 4}, {5}}},
      {"conv2d",
       [](Inputs in) {
         return Conv2d(in[0], in[1], in[2],
                       {.stride = 2, .padding = 1, .dilation = 1});
       },
       {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"conv2d_dilated",
       [](Inputs in) {
         return Conv2d(in[0], in[1],
                       {.stride = 1, .padding = 2, .dilation = 2});
       },
       {{1, 2, 5, 4}, {2, 2, 3, 3}}},
      {"pool_channel_avg",
       [](Inputs in) { return PoolChannel(in[0], PoolMode::kAvg); },
       {{2, 3, 3, 3}}},
      {"pool_channel_max",
       [](Inputs in) { return PoolChannel(in[0], PoolMode::kMax); },
       {{2, 3, 3, 3}}},
      {"pool_spatial_avg",
       [](Inputs in) { return PoolSpatial(in[0], PoolMode::kAvg); },
       {{2, 3, 3, 3}}},
      {"pool_spatial_max",
       [](Inputs in) { return PoolSpatial(in[0], PoolMode::kMax); },
       {{2, 3, 3, 3}}},
      {"resize_bilinear",
       [](Inputs in) { return ResizeBilinear(in[0], 3, 2); },
       {{2, 5, 4}}},
      {"softmax", [](Inputs in) { return Softmax(in[0]); }, {{3, 5}}, -3, 3},
      {"log_softmax",
       [](Inputs in) { return LogSoftmax(in[0]); },
       {{3, 5}},
       -3,
       3},
      {"layer_norm",
       [](Inputs in) { return LayerNorm(in[0], in[1], in[2]); },
       {{3, 6}, {6}, {6}}},
      {"attention",
       [](Inputs in) { return Attention(in[0], in[1], in[2], 2); },
       {{3, 4}, {5, 4}, {5, 4}},
       -2,
       2},
  };
}

}  // namespace

std::vector<GradSuiteEntry> RunGradCheckSuite(uint64_t seed, double eps) {
  Rng rng(seed);
  std::vector<GradSuiteEntry> out;
  for (const OpCase& op : OpCases()) {
    std::vector<Tensor> inputs;
    for (const Shape& s : op.shapes)
      inputs.push_back(Uniform(rng, s, op.lo, op.hi));
    out.push_back({"op", GradCheck(op.name, op.fn, inputs, eps)});
  }
  auto block = [&](const char* name, const ParameterList& params,
                   std::vector<Tensor> extra,
                   const std::function<Tensor()>& f) {
    std::vector<Tensor> leaves = Leaves(params);
    for (Tensor& t : extra) leaves.push_back(t);
    out.push_back({"block", GradCheckInPlace(name, f, leaves, eps)});
  };

  {
    DensityExtractor extractor(2, rng);
    ParameterList params;
    extractor.Collect("density", &params);
    PositiveBiases(params, rng, 0.1, 0.5);
    const PyramidLevel finest{1, Uniform(rng, {2, 7, 7}), 2};
    block("density_extractor", params, {finest.map},
          [&] { return extractor.Forward(finest).map; });
  }
  {
    const int d = 4;
    Cgfe cgfe(d, 2, 2, rng);
    ParameterList params;
    cgfe.Collect("cgfe", &params);
    PositiveBiases(params, rng, 0.1, 0.5);
    const DensityMap density{Uniform(rng, {d, 4, 4})};
    std::vector<PyramidLevel> emsv = {{1, Uniform(rng, {d, 4, 4}), 2},
                                      {2, Uniform(rng, {d, 2, 2}), 4}};
    block("cgfe", params, {density.map, emsv[0].map, emsv[1].map}, [&] {
      const CgfeOutput o = EnhanceFeatures(density, emsv, cgfe);
      const Tensor parts[] = {Reshape(o.features.levels[0], {64}),
                              Reshape(o.features.levels[1], {16})};
      return Concat(parts, 0);
    });
  }
  {
    ScoreHead head(4, 3, rng);
    ParameterList params;
    head.Collect("score", &params);
    PositiveBiases(params, rng, 0.1, 0.5);
    const FlattenedFeatures flat = RandomFlat(rng, 4, {{2, 3}});
    block("score_head", params, {flat.seq},
          [&] { return ScorePositions(flat, head); });
  }
  {
    QueryMaker maker(4, rng);
    ParameterList params;
    maker.Collect("maker", &params);
    PositiveBiases(params, rng, 0.1, 0.5);
    const FlattenedFeatures flat = RandomFlat(rng, 4, {{6, 6}, {3, 3}});
    const Selection selection =
        SelectTopK(Uniform(rng, {2, flat.length()}), flat, 6);
    std::vector<AnchorBox> priors;
    for (const TokenPosition& p : selection.sources) {
      priors.push_back(AnchorPrior(p, flat.shapes));
    }
    block("query_refinement", params, {}, [&] {
      const QuerySet q = MakeQueries(selection, priors, maker);
      const Tensor parts[] = {Reshape(q.anchors, {24}),
                              Reshape(q.content, {24})};
      return Concat(parts, 0);
    });
  }
  {
    Encoder encoder(
        {.channels = 8, .heads = 2, .ffn_hidden = 16, .encoder_layers = 1},
        rng);
    ParameterList params;
    encoder.Collect("encoder", &params);
    PositiveBiases(params, rng, 0.1, 0.5);
    const FlattenedFeatures flat = RandomFlat(rng, 8, {{2, 3}, {1, 2}});
    block("encoder_layer", params, {flat.seq},
          [&] { return Encode(flat, encoder).seq; });
  }
  {
    // One layer: deeper layers start from detached boxes, a stop-gradient
    // that finite differences would see through.
    Decoder decoder({.channels = 8,
                     .heads = 2,
                     .ffn_hidden = 8,
                     .decoder_layers = 1,
                     .num_classes = 2},
                    rng);
    for (DecoderLayer& layer : decoder.layers()) {
      layer.ffn.first.bias = Uniform(rng, {8}, 2.0, 3.0);
      layer.box_head.first.bias = Uniform(rng, {8}, 2.0, 3.0);
    }
    decoder.query_pos_head().first.bias = Uniform(rng, {8}, 2.0, 3.0);
    ParameterList params;
    decoder.Collect("decoder", &params);
    const FlattenedFeatures memory = RandomFlat(rng, 8, {{2, 2}, {1, 1}});
    const QuerySet q = RandomQueries(rng, 3, 8);
    block("decoder", params, {q.content, memory.seq}, [&] {
      const DecoderOutput o = Decode(q, memory, decoder);
      std::vector<Tensor> parts;
      for (const LayerPrediction& p : o.per_layer) {
        parts.push_back(Reshape(p.class_logits, {6}));
        parts.push_back(Reshape(p.boxes, {12}));
      }
      return Concat(parts, 0);
    });
    const GroundTruth gt{{{0.4, 0.5, 0.2, 0.3}}, {1}};
    const Tensor count_logits = Uniform(rng, {4});
    // The assignment is piecewise constant, so it is fixed up front.
    const std::vector<MatchResult> matches =
        MatchLayers(Decode(q, memory, decoder), gt);
    block("total_loss", params, {q.content, count_logits}, [&] {
      return TotalLoss(Decode(q, memory, decoder), gt,
                       CountingLoss(count_logits, CountLevel::kL1), matches)
          .total_tensor;
    });
  }
  {
    const std::vector<LevelShape> shapes = {{2, 2}, {1, 1}};
    const GroundTruth gt{{{0.3, 0.8, 0.1, 0.1}, {0.9, 0.1, 0.2, 0.2}}, {0, 1}};
    out.push_back({"block", GradCheck(
                                "selection_loss",
                                [&](Inputs in) {
                                  return SelectionLoss(in[0], shapes, gt);
                                },
                                {Uniform(rng, {2, 5}, -2, 2)}, eps)});
  }
  return out;
}

}  // namespace dynaquery
