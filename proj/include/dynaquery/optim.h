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

#ifndef DYNAQUERY_OPTIM_H_
#define DYNAQUERY_OPTIM_H_

#include <string>
#include <vector>

#include "dynaquery/nn.h"

namespace dynaquery {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.1;
};

OptimizerKind ParseOptimizerKind(const std::string& name);
std::string OptimizerKindName(OptimizerKind kind);

// Gradient descent over a fixed parameter list. Parameters without a gradient
// are left alone.
class Optimizer {
 public:
  Optimizer(ParameterList params, const OptimizerConfig& config);

  void ZeroGrad();
  // Returns the gradient norm before clipping.
  double Step();

  const ParameterList& params() const { return params_; }
  int64_t steps() const { return steps_; }

 private:
  ParameterList params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> first_, second_;
  int64_t steps_ = 0;
};

double GradientNorm(const ParameterList& params);

}  // namespace dynaquery

#endif  // DYNAQUERY_OPTIM_H_
