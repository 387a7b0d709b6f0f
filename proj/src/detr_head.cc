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

#include <cmath>
#include <numbers>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

constexpr double kTemperature = 10000.0;

}  // namespace

Tensor SineEmbedding(const Tensor& boxes, int dim) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4) {
    Fail(ErrorKind::kDimension, "boxes must be [n, 4], got ",
         ShapeToString(boxes.shape()));
  }
  if (dim < 8 || dim % 8 != 0) {
    Fail(ErrorKind::kConfig, "sine embedding width ", dim,
         " must be a positive multiple of 8");
  }
  const int n = boxes.dim(0), per = dim / 4;
  std::vector<double> out(static_cast<size_t>(n) * dim);
  auto b = boxes.data();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 4; ++c) {
      const double v = b[4 * i + c] * 2.0 * std::numbers::pi;
      for (int j = 0; j < per / 2; ++j) {
        const double angle = v / std::pow(kTemperature, 2.0 * j / per);
        double* dst = &out[static_cast<size_t>(i) * dim + c * per + 2 * j];
        dst[0] = std::sin(angle);
        dst[1] = std::cos(angle);
      }
    }
  }
  return Tensor({n, dim}, std::move(out));
}

Tensor TokenPositions(const std::vector<LevelShape>& shapes, int dim,
                      double base_scale) {
  std::vector<AnchorBox> priors;
  for (size_t l = 0; l < shapes.size(); ++l) {
    for (int y = 0; y < shapes[l].h; ++y) {
      for (int x = 0; x < shapes[l].w; ++x) {
        priors.push_back(
            AnchorPrior({static_cast<int>(l) + 1, y, x}, shapes, base_scale));
      }
    }
  }
  return SineEmbedding(AnchorsToTensor(priors), dim);
}

AttentionBlock AttentionBlock::Make(int channels, Rng& rng) {
  LinearLayer key = LinearLayer::Make(channels, channels, rng);
  // A key bias shifts every score of a query equally and cancels in the
  // softmax.
  key.bias = Tensor();
  return {LinearLayer::Make(channels, channels, rng), std::move(key),
          LinearLayer::Make(channels, channels, rng),
          LinearLayer::Make(channels, channels, rng)};
}

void AttentionBlock::Collect(const std::string& prefix,
                             ParameterList* out) const {
  q.Collect(prefix + ".q", out);
  k.Collect(prefix + ".k", out);
  v.Collect(prefix + ".v", out);
  this->out.Collect(prefix + ".out", out);
}

Tensor AttentionBlock::Forward(const Tensor& query, const Tensor& query_pos,
                               const Tensor& memory, const Tensor& memory_pos,
                               int heads) const {
  Tensor attended =
      Attention(q.Forward(Add(query, query_pos)),
                k.Forward(Add(memory, memory_pos)), v.Forward(memory), heads);
  return out.Forward(attended);
}

EncoderLayer EncoderLayer::Make(const TransformerConfig& config, Rng& rng) {
  return {LayerNormLayer::Make(config.channels),
          LayerNormLayer::Make(config.channels),
          AttentionBlock::Make(config.channels, rng),
          Mlp::Make(config.channels, config.ffn_hidden, config.channels, rng)};
}

void EncoderLayer::Collect(const std::string& prefix,
                           ParameterList* out) const {
  norm1.Collect(prefix + ".norm1", out);
  norm2.Collect(prefix + ".norm2", out);
  attention.Collect(prefix + ".attention", out);
  ffn.Collect(prefix + ".ffn", out);
}

Tensor EncoderLayer::Forward(const Tensor& x, const Tensor& pos,
                             int heads) const {
  Tensor h = norm1.Forward(x);
  Tensor y = Add(x, attention.Forward(h, pos, h, pos, heads));
  return Add(y, ffn.Forward(norm2.Forward(y)));
}

Encoder::Encoder(const TransformerConfig& config, Rng& rng) : config_(config) {
  if (config.encoder_layers < 1) {
    Fail(ErrorKind::kConfig, "encoder needs at least one layer");
  }
  for (int i = 0; i < config.encoder_layers; ++i) {
    layers_.push_back(EncoderLayer::Make(config, rng));
  }
}

void Encoder::Collect(const std::string& prefix, ParameterList* out) const {
  for (size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].Collect(prefix + ".layer" + std::to_string(i), out);
  }
}

FlattenedFeatures Encoder::Forward(const FlattenedFeatures& flat) const {
  const Tensor pos = TokenPositions(flat.shapes, flat.channels());
  Tensor x = Transpose(flat.seq);
  for (const EncoderLayer& layer : layers_) {
    x = layer.Forward(x, pos, config_.heads);
  }
  FlattenedFeatures out = flat;
  out.seq = Transpose(x);
  return out;
}

FlattenedFeatures Encode(const FlattenedFeatures& flat,
                         const Encoder& encoder) {
  return encoder.Forward(flat);
}

DecoderLayer DecoderLayer::Make(const TransformerConfig& config, Rng& rng) {
  const int d = config.channels;
  return {AttentionBlock::Make(d, rng),
          AttentionBlock::Make(d, rng),
          LayerNormLayer::Make(d),
          LayerNormLayer::Make(d),
          LayerNormLayer::Make(d),
          Mlp::Make(d, config.ffn_hidden, d, rng),
          LinearLayer::Make(d, config.num_classes, rng),
          Mlp::Make(d, d, 4, rng)};
}

void DecoderLayer::Collect(const std::string& prefix,
                           ParameterList* out) const {
  self_attention.Collect(prefix + ".self_attention", out);
  cross_attention.Collect(prefix + ".cross_attention", out);
  norm1.Collect(prefix + ".norm1", out);
  norm2.Collect(prefix + ".norm2", out);
  norm3.Collect(prefix + ".norm3", out);
  ffn.Collect(prefix + ".ffn", out);
  class_head.Collect(prefix + ".class_head", out);
  box_head.Collect(prefix + ".box_head", out);
}

Decoder::Decoder(const TransformerConfig& config, Rng& rng)
    : config_(config),
      query_pos_head_(
          Mlp::Make(config.channels, config.channels, config.channels, rng)) {
  if (config.decoder_layers < 1) {
    Fail(ErrorKind::kConfig, "decoder needs at least one layer");
  }
  for (int i = 0; i < config.decoder_layers; ++i) {
    layers_.push_back(DecoderLayer::Make(config, rng));
  }
}

void Decoder::Collect(const std::string& prefix, ParameterList* out) const {
  query_pos_head_.Collect(prefix + ".query_pos_head", out);
  for (size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].Collect(prefix + ".layer" + std::to_string(i), out);
  }
}

DecoderOutput Decoder::Forward(const QuerySet& queries,
                               const FlattenedFeatures& memory,
                               const Tensor& memory_pos) const {
  if (queries.size() == 0 || !queries.content.defined()) {
    Fail(ErrorKind::kInput, "decoder received an empty query set");
  }
  const int heads = config_.heads;
  const Tensor mem = Transpose(memory.seq);
  Tensor tgt = queries.content;
  Tensor anchors = queries.anchors;
  DecoderOutput out;
  for (const DecoderLayer& layer : layers_) {
    const Tensor qpos = query_pos_head_.Forward(
        SineEmbedding(anchors.Detach(), config_.channels));
    tgt = layer.norm1.Forward(
        Add(tgt, layer.self_attention.Forward(tgt, qpos, tgt, qpos, heads)));
    tgt = layer.norm2.Forward(Add(
        tgt, layer.cross_attention.Forward(tgt, qpos, mem, memory_pos, heads)));
    tgt = layer.norm3.Forward(Add(tgt, layer.ffn.Forward(tgt)));
    LayerPrediction p{layer.class_head.Forward(tgt),
                      RefineInLogitSpace(anchors, layer.box_head.Forward(tgt))};
    anchors = p.boxes.Detach();
    out.per_layer.push_back(std::move(p));
  }
  return out;
}

DecoderOutput Decode(const QuerySet& queries, const FlattenedFeatures& memory,
                     const Decoder& decoder) {
  return decoder.Forward(
      queries, memory,
      TokenPositions(memory.shapes, decoder.config().channels));
}

}  // namespace dynaquery
