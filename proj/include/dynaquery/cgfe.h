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

#ifndef DYNAQUERY_CGFE_H_
#define DYNAQUERY_CGFE_H_

#include <string>
#include <vector>

#include "dynaquery/counting.h"
#include "dynaquery/nn.h"
#include "dynaquery/pyramid.h"

namespace dynaquery {

struct AttentionMaps {
  std::vector<Tensor> spatial;  // [1, h_i, w_i], values in (0, 1)
  std::vector<Tensor> channel;  // [d, 1, 1], values in (0, 1)
};

struct IntensifiedFeatures {
  std::vector<Tensor> levels;  // [d, h_i, w_i]
};

// Weights for one pyramid level of the counting-guided enhancement.
struct CgfeLevelWeights {
  Conv2dLayer resample;   // 1x1, mixes channels after bilinear resize
  Conv2dLayer pointwise;  // 1x1 applied before the channel pools
  Conv2dLayer spatial;    // 7x7, 2 -> 1, padding 3
  Mlp channel_mlp;        // d -> d/r -> d, shared by both pools

  static CgfeLevelWeights Make(int channels, int reduction, Rng& rng);
  void Collect(const std::string& prefix, ParameterList* out) const;
};

class Cgfe {
 public:
  Cgfe() = default;
  // `reduction` must divide `channels`.
  Cgfe(int channels, int reduction, int levels, Rng& rng);

  const CgfeLevelWeights& level(int i) const { return levels_.at(i); }
  CgfeLevelWeights& mutable_level(int i) { return levels_.at(i); }
  int num_levels() const { return static_cast<int>(levels_.size()); }
  void Collect(const std::string& prefix, ParameterList* out) const;

 private:
  std::vector<CgfeLevelWeights> levels_;
};

// Bilinear resize of the density map to every level's resolution followed by
// that level's 1x1 convolution.
std::vector<Tensor> DownsampleCounting(const DensityMap& density,
                                       const std::vector<LevelShape>& shapes,
                                       const Cgfe& cgfe);

// sigmoid(conv7x7([avg_c(conv1x1(f)), max_c(conv1x1(f))])) -> [1, h, w].
Tensor SpatialAttention(const Tensor& counting_feature,
                        const CgfeLevelWeights& weights);
// gate [1, h, w] broadcast over the channels of s [d, h, w].
Tensor ApplySpatial(const Tensor& gate, const Tensor& s);
// sigmoid(mlp(avg_hw(e)) + mlp(max_hw(e))) -> [d, 1, 1].
Tensor ChannelAttention(const Tensor& e, const CgfeLevelWeights& weights);
// gate [d, 1, 1] broadcast over the space of e [d, h, w].
Tensor ApplyChannel(const Tensor& gate, const Tensor& e);

struct CgfeOutput {
  IntensifiedFeatures features;
  AttentionMaps maps;
};

// Spatial gating then channel gating on every level.
CgfeOutput EnhanceFeatures(const DensityMap& density,
                           const std::vector<PyramidLevel>& emsv,
                           const Cgfe& cgfe);

}  // namespace dynaquery

#endif  // DYNAQUERY_CGFE_H_
