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

#ifndef DYNAQUERY_PYRAMID_H_
#define DYNAQUERY_PYRAMID_H_

#include <utility>
#include <vector>

#include "dynaquery/nn.h"
#include "dynaquery/tensor.h"

namespace dynaquery {

struct LevelShape {
  int h = 0;
  int w = 0;
  bool operator==(const LevelShape&) const = default;
};

// One scale of the pyramid. `level_index` is 1-based; level 1 is the finest.
struct PyramidLevel {
  int level_index = 1;
  Tensor map;  // [d, h, w]
  int stride = 2;
};

// Levels flattened row-major and concatenated in level order.
struct FlattenedFeatures {
  Tensor seq;  // [d, sum h_i * w_i]
  std::vector<std::pair<int, int>> level_ranges;
  std::vector<LevelShape> shapes;

  int length() const { return seq.dim(1); }
  int channels() const { return seq.dim(0); }
};

struct TokenPosition {
  int level = 1;  // 1-based
  int y = 0;
  int x = 0;
  bool operator==(const TokenPosition&) const = default;
};

struct BackboneConfig {
  int levels = 3;
  int channels = 32;
  int in_channels = 3;
  // Convolutions per level block. The first one has stride 2; the rest keep
  // the resolution.
  int block_depth = 1;
  // Optional stride-2 convolution ahead of the level blocks, halving every
  // level's resolution.
  bool stem = false;
};

// Toy multi-scale backbone: one stride-2 conv block per level, each conv
// followed by ReLU.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, Rng& rng);

  std::vector<PyramidLevel> Forward(const Tensor& image) const;
  void Collect(const std::string& prefix, ParameterList* out) const;
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  std::vector<Conv2dLayer> stem_;
  std::vector<std::vector<Conv2dLayer>> blocks_;
};

// image [3, H, W]; H and W must be divisible by 2^levels.
std::vector<PyramidLevel> ExtractPyramid(const Tensor& image,
                                         const Backbone& backbone);

FlattenedFeatures FlattenLevels(const std::vector<PyramidLevel>& levels);
std::vector<PyramidLevel> UnflattenLevels(
    const FlattenedFeatures& flat, const std::vector<LevelShape>& shapes);

std::vector<LevelShape> ShapesOf(const std::vector<PyramidLevel>& levels);

TokenPosition LocateToken(const std::vector<LevelShape>& shapes, int index);
int TokenIndex(const std::vector<LevelShape>& shapes, const TokenPosition& pos);

}  // namespace dynaquery

#endif  // DYNAQUERY_PYRAMID_H_
