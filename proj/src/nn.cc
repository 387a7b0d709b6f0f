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

#include "dynaquery/nn.h"

#include <algorithm>
#include <cmath>

namespace dynaquery {

Tensor UniformParameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = u(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor ConstantParameter(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

LinearLayer LinearLayer::Make(int in, int out, Rng& rng) {
  // Xavier-uniform weights, zero bias.
  const double bound = std::sqrt(6.0 / (in + out));
  return {UniformParameter({out, in}, bound, rng),
          ConstantParameter({out}, 0.0)};
}

void LinearLayer::Collect(const std::string& prefix, ParameterList* out) const {
  out->push_back({prefix + ".weight", weight});
  if (bias.defined()) out->push_back({prefix + ".bias", bias});
}

void LinearLayer::ZeroInit() {
  auto w = weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  if (!bias.defined()) return;
  auto b = bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

Conv2dLayer Conv2dLayer::Make(int in, int out, int kernel_size,
                              Conv2dOptions options, Rng& rng) {
  // He-uniform for ReLU stacks.
  const double bound = std::sqrt(6.0 / (in * kernel_size * kernel_size));
  return {UniformParameter({out, in, kernel_size, kernel_size}, bound, rng),
          ConstantParameter({out}, 0.0), options};
}

void Conv2dLayer::Collect(const std::string& prefix, ParameterList* out) const {
  out->push_back({prefix + ".kernel", kernel});
  out->push_back({prefix + ".bias", bias});
}

LayerNormLayer LayerNormLayer::Make(int width) {
  return {ConstantParameter({width}, 1.0), ConstantParameter({width}, 0.0)};
}

void LayerNormLayer::Collect(const std::string& prefix,
                             ParameterList* out) const {
  out->push_back({prefix + ".gamma", gamma});
  out->push_back({prefix + ".beta", beta});
}

Mlp Mlp::Make(int in, int hidden, int out, Rng& rng) {
  return {LinearLayer::Make(in, hidden, rng),
          LinearLayer::Make(hidden, out, rng)};
}

void Mlp::Collect(const std::string& prefix, ParameterList* out) const {
  first.Collect(prefix + ".0", out);
  second.Collect(prefix + ".1", out);
}

}  // namespace dynaquery
