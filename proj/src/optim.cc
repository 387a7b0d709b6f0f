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

#include "dynaquery/optim.h"

#include <cmath>

#include "dynaquery/error.h"

namespace dynaquery {

OptimizerKind ParseOptimizerKind(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd") return OptimizerKind::kSgd;
  Fail(ErrorKind::kConfig, "unknown optimizer ", name);
}

std::string OptimizerKindName(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd";
}

Optimizer::Optimizer(ParameterList params, const OptimizerConfig& config)
    : params_(std::move(params)), config_(config) {
  if (!(config.lr > 0) || !(config.momentum >= 0 && config.momentum < 1) ||
      !(config.beta1 >= 0 && config.beta1 < 1) ||
      !(config.beta2 >= 0 && config.beta2 < 1) || !(config.epsilon > 0)) {
    Fail(ErrorKind::kConfig, "bad optimizer hyperparameters");
  }
  for (NamedTensor& p : params_) {
    p.tensor.set_requires_grad(true);
    first_.emplace_back(p.tensor.numel(), 0.0);
    second_.emplace_back(
        config.kind == OptimizerKind::kAdam ? p.tensor.numel() : 0, 0.0);
  }
}

void Optimizer::ZeroGrad() {
  for (NamedTensor& p : params_) p.tensor.ZeroGrad();
}

double GradientNorm(const ParameterList& params) {
  double sum = 0;
  for (const NamedTensor& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sum += g * g;
  }
  return std::sqrt(sum);
}

double Optimizer::Step() {
  const double norm = GradientNorm(params_);
  const double scale = config_.clip_norm > 0 && norm > config_.clip_norm
                           ? config_.clip_norm / norm
                           : 1.0;
  ++steps_;
  const double c1 = 1 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    const auto grad = t.grad();
    const auto data = t.mutable_data();
    std::vector<double>& m = first_[i];
    for (size_t k = 0; k < data.size(); ++k) {
      const double g = grad[k] * scale;
      if (config_.kind == OptimizerKind::kSgd) {
        m[k] = config_.momentum * m[k] + g;
        data[k] -= config_.lr * m[k];
      } else {
        std::vector<double>& v = second_[i];
        m[k] = config_.beta1 * m[k] + (1 - config_.beta1) * g;
        v[k] = config_.beta2 * v[k] + (1 - config_.beta2) * g * g;
        data[k] -=
            config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.epsilon);
      }
    }
  }
  return norm;
}

}  // namespace dynaquery
