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

#include "dynaquery/pyramid.h"

#include "dynaquery/error.h"

namespace dynaquery {

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  if (config.levels < 1 || config.channels < 1 || config.block_depth < 1) {
    Fail(ErrorKind::kConfig, "backbone needs levels, channels and depth >= 1");
  }
  if (config.stem) {
    stem_.push_back(Conv2dLayer::Make(config.in_channels, config.channels, 3,
                                      {.stride = 2, .padding = 1}, rng));
  }
  for (int l = 0; l < config.levels; ++l) {
    std::vector<Conv2dLayer> block;
    const int in =
        l == 0 && !config.stem ? config.in_channels : config.channels;
    block.push_back(Conv2dLayer::Make(in, config.channels, 3,
                                      {.stride = 2, .padding = 1}, rng));
    for (int i = 1; i < config.block_depth; ++i) {
      block.push_back(Conv2dLayer::Make(config.channels, config.channels, 3,
                                        {.stride = 1, .padding = 1}, rng));
    }
    blocks_.push_back(std::move(block));
  }
}

std::vector<PyramidLevel> Backbone::Forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != config_.in_channels) {
    Fail(ErrorKind::kInput, "backbone expects [", config_.in_channels,
         ", H, W], got ", ShapeToString(image.shape()));
  }
  const int halvings = config_.levels + (config_.stem ? 1 : 0);
  if (image.dim(1) % (1 << halvings) != 0 ||
      image.dim(2) % (1 << halvings) != 0) {
    Fail(ErrorKind::kInput, "image ", image.dim(1), "x", image.dim(2),
         " not divisible by 2^", halvings);
  }
  std::vector<PyramidLevel> levels;
  Tensor x = Reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  int stride = 1;
  for (const Conv2dLayer& conv : stem_) {
    x = Relu(conv.Forward(x));
    stride *= 2;
  }
  for (int l = 0; l < config_.levels; ++l) {
    for (const Conv2dLayer& conv : blocks_[l]) x = Relu(conv.Forward(x));
    stride *= 2;
    levels.push_back(
        {l + 1, Reshape(x, {x.dim(1), x.dim(2), x.dim(3)}), stride});
  }
  return levels;
}

void Backbone::Collect(const std::string& prefix, ParameterList* out) const {
  for (const Conv2dLayer& conv : stem_) conv.Collect(prefix + ".stem", out);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    for (size_t i = 0; i < blocks_[l].size(); ++i) {
      blocks_[l][i].Collect(
          prefix + ".level" + std::to_string(l + 1) + "." + std::to_string(i),
          out);
    }
  }
}

std::vector<PyramidLevel> ExtractPyramid(const Tensor& image,
                                         const Backbone& backbone) {
  return backbone.Forward(image);
}

std::vector<LevelShape> ShapesOf(const std::vector<PyramidLevel>& levels) {
  std::vector<LevelShape> shapes;
  for (const auto& l : levels) shapes.push_back({l.map.dim(1), l.map.dim(2)});
  return shapes;
}

FlattenedFeatures FlattenLevels(const std::vector<PyramidLevel>& levels) {
  if (levels.empty()) Fail(ErrorKind::kInput, "no pyramid levels to flatten");
  const int d = levels[0].map.dim(0);
  FlattenedFeatures flat;
  std::vector<Tensor> parts;
  int start = 0;
  for (const auto& level : levels) {
    if (level.map.rank() != 3 || level.map.dim(0) != d) {
      Fail(ErrorKind::kDimension, "level ", level.level_index, " has shape ",
           ShapeToString(level.map.shape()), ", expected channels ", d);
    }
    const int hw = level.map.dim(1) * level.map.dim(2);
    parts.push_back(Reshape(level.map, {d, hw}));
    flat.level_ranges.emplace_back(start, start + hw);
    flat.shapes.push_back({level.map.dim(1), level.map.dim(2)});
    start += hw;
  }
  flat.seq = parts.size() == 1 ? parts[0] : Concat(parts, 1);
  return flat;
}

std::vector<PyramidLevel> UnflattenLevels(
    const FlattenedFeatures& flat, const std::vector<LevelShape>& shapes) {
  int total = 0;
  for (const auto& s : shapes) total += s.h * s.w;
  if (flat.seq.rank() != 2 || total != flat.seq.dim(1)) {
    Fail(ErrorKind::kDimension, "sequence ", ShapeToString(flat.seq.shape()),
         " does not hold ", total, " positions");
  }
  const int d = flat.seq.dim(0);
  std::vector<PyramidLevel> levels;
  int start = 0, stride = 2;
  for (size_t i = 0; i < shapes.size(); ++i) {
    const int hw = shapes[i].h * shapes[i].w;
    Tensor part = shapes.size() == 1 ? flat.seq : Slice(flat.seq, 1, start, hw);
    levels.push_back({static_cast<int>(i) + 1,
                      Reshape(part, {d, shapes[i].h, shapes[i].w}), stride});
    start += hw;
    stride *= 2;
  }
  return levels;
}

TokenPosition LocateToken(const std::vector<LevelShape>& shapes, int index) {
  int start = 0;
  for (size_t i = 0; i < shapes.size(); ++i) {
    const int hw = shapes[i].h * shapes[i].w;
    if (index >= start && index < start + hw) {
      const int local = index - start;
      return {static_cast<int>(i) + 1, local / shapes[i].w,
              local % shapes[i].w};
    }
    start += hw;
  }
  Fail(ErrorKind::kIndex, "token ", index, " outside sequence of ", start);
}

int TokenIndex(const std::vector<LevelShape>& shapes,
               const TokenPosition& pos) {
  if (pos.level < 1 || pos.level > static_cast<int>(shapes.size())) {
    Fail(ErrorKind::kIndex, "level ", pos.level, " out of range");
  }
  int start = 0;
  for (int i = 0; i + 1 < pos.level; ++i) start += shapes[i].h * shapes[i].w;
  const LevelShape& s = shapes[pos.level - 1];
  if (pos.y < 0 || pos.y >= s.h || pos.x < 0 || pos.x >= s.w) {
    Fail(ErrorKind::kIndex, "cell (", pos.y, ", ", pos.x, ") outside level ",
         pos.level);
  }
  return start + pos.y * s.w + pos.x;
}

}  // namespace dynaquery
