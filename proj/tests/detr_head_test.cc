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

#include "dynaquery/detr_head.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "dynaquery/grad_check.h"
#include "dynaquery/ops.h"
#include "oracles.h"
#include "test_util.h"

namespace dynaquery {
namespace {

using oracle::MaxAbsDiff;
using oracle::RandomTensor;

constexpr double kGradTol = 1e-4;

void Zero(LinearLayer& l) {
  l.weight = Tensor(l.weight.shape(), 0.0);
  l.bias = Tensor(l.bias.shape(), 0.0);
}

std::vector<Tensor> Tensors(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const NamedTensor& p : params) out.push_back(p.tensor);
  return out;
}

FlattenedFeatures RandomFlat(Rng& rng, int d,
                             const std::vector<LevelShape>& shapes) {
  std::vector<PyramidLevel> levels;
  for (size_t i = 0; i < shapes.size(); ++i) {
    levels.push_back({static_cast<int>(i) + 1,
                      RandomTensor(rng, {d, shapes[i].h, shapes[i].w}),
                      2 << i});
  }
  return FlattenLevels(levels);
}

QuerySet RandomQueries(Rng& rng, int k, int d) {
  QuerySet q;
  q.content = RandomTensor(rng, {k, d});
  q.anchors = RandomTensor(rng, {k, 4}, 0.1, 0.9);
  q.sources.assign(k, TokenPosition{});
  q.indices.assign(k, 0);
  q.budget = {k};
  return q;
}

TEST(SineEmbeddingTest, KnownValues) {
  const Tensor e = SineEmbedding(Tensor({1, 4}, {0.0, 0.25, 0.5, 1.0}), 8);
  ASSERT_EQ(e.shape(), (Shape{1, 8}));
  // First pair of each coordinate uses frequency 1: angle = 2*pi*v.
  EXPECT_NEAR(e.at({0, 0}), 0.0, 1e-15);
  EXPECT_NEAR(e.at({0, 1}), 1.0, 1e-15);
  EXPECT_NEAR(e.at({0, 2}), 1.0, 1e-15);  // sin(pi/2 / 1) with j = 0 for y
  EXPECT_NEAR(e.at({0, 4}), 0.0, 1e-15);  // sin(pi) for w
  EXPECT_NEAR(e.at({0, 5}), -1.0, 1e-15);
}

TEST(SineEmbeddingTest, WidthMustBeMultipleOfEight) {
  EXPECT_TRUE(ThrowsKind([] { SineEmbedding(Tensor({1, 4}, 0.5), 12); },
                         ErrorKind::kConfig));
}

TEST(EncoderTest, OutputShapeEqualsInput) {
  Rng rng(1);
  Encoder encoder(
      {.channels = 16, .heads = 4, .ffn_hidden = 32, .encoder_layers = 2}, rng);
  const FlattenedFeatures flat = RandomFlat(rng, 16, {{8, 8}, {4, 4}, {2, 2}});
  const FlattenedFeatures out = Encode(flat, encoder);
  EXPECT_EQ(out.seq.shape(), flat.seq.shape());
  EXPECT_EQ(out.level_ranges, flat.level_ranges);
}

TEST(EncoderTest, ZeroResidualBranchesAreIdentity) {
  Rng rng(2);
  Encoder encoder(
      {.channels = 8, .heads = 2, .ffn_hidden = 16, .encoder_layers = 3}, rng);
  for (EncoderLayer& layer : encoder.layers()) {
    Zero(layer.attention.out);
    Zero(layer.ffn.second);
  }
  const FlattenedFeatures flat = RandomFlat(rng, 8, {{4, 4}, {2, 2}});
  EXPECT_EQ(Encode(flat, encoder).seq.ToVector(), flat.seq.ToVector());
}

TEST(EncoderTest, OneLayerGradientOnEightTokens) {
  Rng rng(3);
  Encoder encoder(
      {.channels = 8, .heads = 2, .ffn_hidden = 16, .encoder_layers = 1}, rng);
  encoder.layers()[0].ffn.first.bias = RandomTensor(rng, {16}, 0.1, 0.5);
  const FlattenedFeatures flat = RandomFlat(rng, 8, {{2, 3}, {1, 2}});
  ASSERT_EQ(flat.length(), 8);
  ParameterList params;
  encoder.Collect("encoder", &params);
  std::vector<Tensor> tensors = Tensors(params);
  tensors.push_back(flat.seq);
  const GradCheckReport report = GradCheckInPlace(
      "encoder_layer", [&] { return Encode(flat, encoder).seq; }, tensors);
  EXPECT_LT(report.max_rel_error, kGradTol)
      << report.worst_input << " " << report.analytic << " " << report.numeric;
}

TEST(DecoderTest, SingleQuerySingleClassShapes) {
  Rng rng(4);
  Decoder decoder({.channels = 8,
                   .heads = 2,
                   .ffn_hidden = 16,
                   .decoder_layers = 1,
                   .num_classes = 1},
                  rng);
  const FlattenedFeatures memory = RandomFlat(rng, 8, {{2, 2}});
  const DecoderOutput out = Decode(RandomQueries(rng, 1, 8), memory, decoder);
  ASSERT_EQ(out.per_layer.size(), 1u);
  EXPECT_EQ(out.final().class_logits.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.final().boxes.shape(), (Shape{1, 4}));
}

TEST(DecoderTest, ZeroDeltaHeadsKeepInputAnchors) {
  Rng rng(5);
  Decoder decoder({.channels = 8,
                   .heads = 2,
                   .ffn_hidden = 16,
                   .decoder_layers = 3,
                   .num_classes = 3},
                  rng);
  for (DecoderLayer& layer : decoder.layers()) Zero(layer.box_head.second);
  const FlattenedFeatures memory = RandomFlat(rng, 8, {{4, 4}, {2, 2}});
  const QuerySet q = RandomQueries(rng, 10, 8);
  const DecoderOutput out = Decode(q, memory, decoder);
  ASSERT_EQ(out.per_layer.size(), 3u);
  for (const LayerPrediction& p : out.per_layer) {
    EXPECT_LE(MaxAbsDiff(p.boxes, q.anchors), 1e-12);
  }
}

TEST(DecoderTest, BoxesValidAndDeterministic) {
  Rng rng(6);
  Decoder decoder({.channels = 8,
                   .heads = 2,
                   .ffn_hidden = 16,
                   .decoder_layers = 2,
                   .num_classes = 3},
                  rng);
  const FlattenedFeatures memory = RandomFlat(rng, 8, {{4, 4}, {2, 2}});
  const QuerySet q = RandomQueries(rng, 9, 8);
  const DecoderOutput a = Decode(q, memory, decoder);
  const DecoderOutput b = Decode(q, memory, decoder);
  for (size_t l = 0; l < a.per_layer.size(); ++l) {
    EXPECT_EQ(a.per_layer[l].boxes.ToVector(), b.per_layer[l].boxes.ToVector());
    EXPECT_EQ(a.per_layer[l].class_logits.ToVector(),
              b.per_layer[l].class_logits.ToVector());
    for (const AnchorBox& box : TensorToAnchors(a.per_layer[l].boxes)) {
      EXPECT_TRUE(box.Valid());
    }
  }
}

TEST(DecoderTest, WeightsAreBudgetAgnostic) {
  Rng rng(7);
  Decoder decoder({.channels = 16,
                   .heads = 4,
                   .ffn_hidden = 32,
                   .decoder_layers = 2,
                   .num_classes = 3},
                  rng);
  ParameterList before;
  decoder.Collect("decoder", &before);
  const FlattenedFeatures memory = RandomFlat(rng, 16, {{8, 8}, {4, 4}});
  for (int k : {30, 50, 90, 150}) {
    const DecoderOutput out =
        Decode(RandomQueries(rng, k, 16), memory, decoder);
    for (const LayerPrediction& p : out.per_layer) {
      EXPECT_EQ(p.class_logits.shape(), (Shape{k, 3}));
      EXPECT_EQ(p.boxes.shape(), (Shape{k, 4}));
    }
  }
  ParameterList after;
  decoder.Collect("decoder", &after);
  ASSERT_EQ(before.size(), after.size());
  for (size_t i = 0; i < before.size(); ++i) {
    EXPECT_EQ(before[i].tensor.shape(), after[i].tensor.shape());
  }
}

TEST(DecoderTest, EmptyQuerySetIsInputError) {
  Rng rng(8);
  Decoder decoder(
      {.channels = 8, .heads = 2, .ffn_hidden = 16, .decoder_layers = 1}, rng);
  const FlattenedFeatures memory = RandomFlat(rng, 8, {{2, 2}});
  EXPECT_TRUE(ThrowsKind([&] { Decode(QuerySet{}, memory, decoder); },
                         ErrorKind::kInput));
}

// One layer: deeper layers start from detached boxes, a stop-gradient that
// finite differences would see through.
TEST(DecoderTest, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  Decoder decoder({.channels = 8,
                   .heads = 2,
                   .ffn_hidden = 8,
                   .decoder_layers = 1,
                   .num_classes = 2},
                  rng);
  // Large positive biases keep every hidden ReLU unit active: a dead unit has
  // an exactly zero gradient that the relative-error floor cannot absorb.
  for (DecoderLayer& layer : decoder.layers()) {
    layer.ffn.first.bias = RandomTensor(rng, {8}, 2.0, 3.0);
    layer.box_head.first.bias = RandomTensor(rng, {8}, 2.0, 3.0);
  }
  decoder.query_pos_head().first.bias = RandomTensor(rng, {8}, 2.0, 3.0);
  const FlattenedFeatures memory = RandomFlat(rng, 8, {{2, 2}, {1, 1}});
  const QuerySet q = RandomQueries(rng, 3, 8);
  ParameterList params;
  decoder.Collect("decoder", &params);
  std::vector<Tensor> tensors = Tensors(params);
  tensors.push_back(q.content);
  tensors.push_back(memory.seq);
  const GradCheckReport report = GradCheckInPlace(
      "decoder",
      [&] {
        const DecoderOutput out = Decode(q, memory, decoder);
        std::vector<Tensor> parts;
        for (const LayerPrediction& p : out.per_layer) {
          parts.push_back(Reshape(p.class_logits, {6}));
          parts.push_back(Reshape(p.boxes, {12}));
        }
        return Concat(parts, 0);
      },
      tensors);
  EXPECT_LT(report.max_rel_error, kGradTol)
      << report.worst_input << " " << report.analytic << " " << report.numeric;
}

double MedianSelfAttentionSeconds(int k, int d, int heads, Rng& rng) {
  NoGradGuard no_grad;
  const Tensor x = RandomTensor(rng, {k, d});
  std::vector<double> times;
  double sink = 0;
  for (int rep = 0; rep < 41; ++rep) {
    const auto start = std::chrono::steady_clock::now();
    for (int inner = 0; inner < 10; ++inner) {
      const Tensor y = Attention(x, x, x, heads);
      sink += y.data()[0];
    }
    times.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count());
  }
  EXPECT_TRUE(std::isfinite(sink));
  std::nth_element(times.begin(), times.begin() + 20, times.end());
  return times[20];
}

TEST(DecoderTest, SelfAttentionCostGrowsQuadratically) {
  Rng rng(10);
  MedianSelfAttentionSeconds(150, 32, 4, rng);  // warm caches and allocator
  const double t30 = MedianSelfAttentionSeconds(30, 32, 4, rng);
  const double t150 = MedianSelfAttentionSeconds(150, 32, 4, rng);
  const double ratio = t150 / t30;
  RecordProperty("ratio", std::to_string(ratio));
  std::printf("self-attention k=150 / k=30 time ratio: %.1f\n", ratio);
  EXPECT_GE(ratio, 15.0);
  EXPECT_LE(ratio, 40.0);
}

}  // namespace
}  // namespace dynaquery
