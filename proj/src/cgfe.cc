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

#include "dynaquery/cgfe.h"

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

Tensor AsBatch(const Tensor& x) {
  return Reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
}

Tensor DropBatch(const Tensor& x) {
  return Reshape(x, {x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace

CgfeLevelWeights CgfeLevelWeights::Make(int channels, int reduction, Rng& rng) {
  return {Conv2dLayer::Make(channels, channels, 1, {}, rng),
          Conv2dLayer::Make(channels, channels, 1, {}, rng),
          Conv2dLayer::Make(2, 1, 7, {.stride = 1, .padding = 3}, rng),
          Mlp::Make(channels, channels / reduction, channels, rng)};
}

void CgfeLevelWeights::Collect(const std::string& prefix,
                               ParameterList* out) const {
  resample.Collect(prefix + ".resample", out);
  pointwise.Collect(prefix + ".pointwise", out);
  spatial.Collect(prefix + ".spatial", out);
  channel_mlp.Collect(prefix + ".channel_mlp", out);
}

Cgfe::Cgfe(int channels, int reduction, int levels, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    Fail(ErrorKind::kConfig, "channel reduction ", reduction,
         " does not divide width ", channels);
  }
  for (int i = 0; i < levels; ++i) {
    levels_.push_back(CgfeLevelWeights::Make(channels, reduction, rng));
  }
}

void Cgfe::Collect(const std::string& prefix, ParameterList* out) const {
  for (size_t i = 0; i < levels_.size(); ++i) {
    levels_[i].Collect(prefix + ".level" + std::to_string(i + 1), out);
  }
}

std::vector<Tensor> DownsampleCounting(const DensityMap& density,
                                       const std::vector<LevelShape>& shapes,
                                       const Cgfe& cgfe) {
  if (static_cast<int>(shapes.size()) > cgfe.num_levels()) {
    Fail(ErrorKind::kConfig, "enhancement built for ", cgfe.num_levels(),
         " levels, pyramid has ", shapes.size());
  }
  std::vector<Tensor> out;
  for (size_t i = 0; i < shapes.size(); ++i) {
    Tensor resized = ResizeBilinear(density.map, shapes[i].h, shapes[i].w);
    out.push_back(DropBatch(cgfe.level(i).resample.Forward(AsBatch(resized))));
  }
  return out;
}

Tensor SpatialAttention(const Tensor& counting_feature,
                        const CgfeLevelWeights& weights) {
  if (counting_feature.rank() != 3) {
    Fail(ErrorKind::kInput, "spatial attention expects [d, h, w], got ",
         ShapeToString(counting_feature.shape()));
  }
  Tensor mixed = weights.pointwise.Forward(AsBatch(counting_feature));
  const Tensor pools[] = {PoolChannel(mixed, PoolMode::kAvg),
                          PoolChannel(mixed, PoolMode::kMax)};
  return DropBatch(Sigmoid(weights.spatial.Forward(Concat(pools, 1))));
}

Tensor ApplySpatial(const Tensor& gate, const Tensor& s) {
  if (gate.rank() != 3 || s.rank() != 3 || gate.dim(0) != 1 ||
      gate.dim(1) != s.dim(1) || gate.dim(2) != s.dim(2)) {
    Fail(ErrorKind::kDimension, "spatial gate ", ShapeToString(gate.shape()),
         " vs feature ", ShapeToString(s.shape()));
  }
  return Mul(gate, s);
}

Tensor ChannelAttention(const Tensor& e, const CgfeLevelWeights& weights) {
  if (e.rank() != 3) {
    Fail(ErrorKind::kInput, "channel attention expects [d, h, w], got ",
         ShapeToString(e.shape()));
  }
  const int d = e.dim(0);
  Tensor batched = AsBatch(e);
  Tensor avg = Reshape(PoolSpatial(batched, PoolMode::kAvg), {d});
  Tensor max = Reshape(PoolSpatial(batched, PoolMode::kMax), {d});
  Tensor logits =
      Add(weights.channel_mlp.Forward(avg), weights.channel_mlp.Forward(max));
  return Reshape(Sigmoid(logits), {d, 1, 1});
}

Tensor ApplyChannel(const Tensor& gate, const Tensor& e) {
  if (gate.rank() != 3 || e.rank() != 3 || gate.dim(0) != e.dim(0) ||
      gate.dim(1) != 1 || gate.dim(2) != 1) {
    Fail(ErrorKind::kDimension, "channel gate ", ShapeToString(gate.shape()),
         " vs feature ", ShapeToString(e.shape()));
  }
  return Mul(gate, e);
}

CgfeOutput EnhanceFeatures(const DensityMap& density,
                           const std::vector<PyramidLevel>& emsv,
                           const Cgfe& cgfe) {
  const std::vector<Tensor> counting =
      DownsampleCounting(density, ShapesOf(emsv), cgfe);
  CgfeOutput out;
  for (size_t i = 0; i < emsv.size(); ++i) {
    const CgfeLevelWeights& w = cgfe.level(i);
    Tensor spatial = SpatialAttention(counting[i], w);
    Tensor e = ApplySpatial(spatial, emsv[i].map);
    Tensor channel = ChannelAttention(e, w);
    out.features.levels.push_back(ApplyChannel(channel, e));
    out.maps.spatial.push_back(spatial);
    out.maps.channel.push_back(channel);
  }
  return out;
}

}  // namespace dynaquery
