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

#ifndef DYNAQUERY_DETR_HEAD_H_
#define DYNAQUERY_DETR_HEAD_H_

#include <string>
#include <vector>

#include "dynaquery/nn.h"
#include "dynaquery/pyramid.h"
#include "dynaquery/query_select.h"

namespace dynaquery {

struct TransformerConfig {
  int channels = 32;
  int heads = 4;
  int ffn_hidden = 64;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_classes = 3;
};

// Sinusoidal code of normalized boxes [n, 4] -> [n, dim], dim / 4 features
// per coordinate as interleaved sin/cos pairs. Carries no gradient.
Tensor SineEmbedding(const Tensor& boxes, int dim);

// Sine code of every token's cell prior, in sequence order: [L, dim].
Tensor TokenPositions(const std::vector<LevelShape>& shapes, int dim,
                      double base_scale = kDefaultBaseScale);

struct AttentionBlock {
  LinearLayer q, k, v, out;

  static AttentionBlock Make(int channels, Rng& rng);
  void Collect(const std::string& prefix, ParameterList* out) const;
  // Positional codes are added to queries and keys only.
  Tensor Forward(const Tensor& query, const Tensor& query_pos,
                 const Tensor& memory, const Tensor& memory_pos,
                 int heads) const;
};

// Pre-norm layer: x + attn(ln(x)), then x + ffn(ln(x)). Zeroing the output
// projections makes it the identity.
struct EncoderLayer {
  LayerNormLayer norm1, norm2;
  AttentionBlock attention;
  Mlp ffn;

  static EncoderLayer Make(const TransformerConfig& config, Rng& rng);
  void Collect(const std::string& prefix, ParameterList* out) const;
  Tensor Forward(const Tensor& x, const Tensor& pos,
                 int heads) const;  // [L, d]
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const TransformerConfig& config, Rng& rng);

  std::vector<EncoderLayer>& layers() { return layers_; }
  void Collect(const std::string& prefix, ParameterList* out) const;
  FlattenedFeatures Forward(const FlattenedFeatures& flat) const;

 private:
  TransformerConfig config_;
  std::vector<EncoderLayer> layers_;
};

FlattenedFeatures Encode(const FlattenedFeatures& flat, const Encoder& encoder);

// Post-norm decoder layer with its own prediction heads.
struct DecoderLayer {
  AttentionBlock self_attention, cross_attention;
  LayerNormLayer norm1, norm2, norm3;
  Mlp ffn;
  LinearLayer class_head;
  Mlp box_head;  // 4-D delta in logit space

  static DecoderLayer Make(const TransformerConfig& config, Rng& rng);
  void Collect(const std::string& prefix, ParameterList* out) const;
};

struct LayerPrediction {
  Tensor class_logits;  // [k, m]
  Tensor boxes;         // [k, 4]
};

struct DecoderOutput {
  std::vector<LayerPrediction> per_layer;
  const LayerPrediction& final() const { return per_layer.back(); }
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const TransformerConfig& config, Rng& rng);

  std::vector<DecoderLayer>& layers() { return layers_; }
  const std::vector<DecoderLayer>& layers() const { return layers_; }
  Mlp& query_pos_head() { return query_pos_head_; }
  const TransformerConfig& config() const { return config_; }
  void Collect(const std::string& prefix, ParameterList* out) const;

  // The first layer refines the query anchors with gradient; later layers
  // start from detached boxes of the layer before.
  DecoderOutput Forward(const QuerySet& queries,
                        const FlattenedFeatures& memory,
                        const Tensor& memory_pos) const;

 private:
  TransformerConfig config_;
  std::vector<DecoderLayer> layers_;
  Mlp query_pos_head_;
};

DecoderOutput Decode(const QuerySet& queries, const FlattenedFeatures& memory,
                     const Decoder& decoder);

}  // namespace dynaquery

#endif  // DYNAQUERY_DETR_HEAD_H_
