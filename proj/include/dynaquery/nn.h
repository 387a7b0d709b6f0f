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

#ifndef DYNAQUERY_NN_H_
#define DYNAQUERY_NN_H_

#include <random>
#include <string>
#include <vector>

#include "dynaquery/ops.h"
#include "dynaquery/tensor.h"

namespace dynaquery {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

// Trainable leaf drawn from U(-bound, bound).
Tensor UniformParameter(Shape shape, double bound, Rng& rng);
Tensor ConstantParameter(Shape shape, double value);

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static LinearLayer Make(int in, int out, Rng& rng);
  Tensor Forward(const Tensor& x) const { return Linear(x, weight, bias); }
  void Collect(const std::string& prefix, ParameterList* out) const;
  void ZeroInit();
};

struct Conv2dLayer {
  Tensor kernel;  // [out, in, kh, kw]
  Tensor bias;    // [out]
  Conv2dOptions options;

  static Conv2dLayer Make(int in, int out, int kernel_size,
                          Conv2dOptions options, Rng& rng);
  Tensor Forward(const Tensor& x) const {
    return Conv2d(x, kernel, bias, options);
  }
  void Collect(const std::string& prefix, ParameterList* out) const;
};

struct LayerNormLayer {
  Tensor gamma;
  Tensor beta;

  static LayerNormLayer Make(int width);
  Tensor Forward(const Tensor& x) const { return LayerNorm(x, gamma, beta); }
  void Collect(const std::string& prefix, ParameterList* out) const;
};

// Two linear layers with a ReLU in between.
struct Mlp {
  LinearLayer first;
  LinearLayer second;

  static Mlp Make(int in, int hidden, int out, Rng& rng);
  Tensor Forward(const Tensor& x) const {
    return second.Forward(Relu(first.Forward(x)));
  }
  void Collect(const std::string& prefix, ParameterList* out) const;
};

}  // namespace dynaquery

#endif  // DYNAQUERY_NN_H_
