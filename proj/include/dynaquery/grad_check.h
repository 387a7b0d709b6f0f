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

#ifndef DYNAQUERY_GRAD_CHECK_H_
#define DYNAQUERY_GRAD_CHECK_H_

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dynaquery/tensor.h"

namespace dynaquery {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double eps = 0.0;
  // Where the worst mismatch occurred.
  int worst_input = -1;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

using DifferentiableFn = std::function<Tensor(std::span<const Tensor>)>;

// Compares reverse-mode gradients of `fn` against central differences for
// every element of every input. Non-scalar outputs are reduced with a fixed
// pseudo-random weighting so all output entries take part. The relative
// error uses max(|a|, |b|, 1e-8) as denominator.
GradCheckReport GradCheck(const std::string& op_name,
                          const DifferentiableFn& fn,
                          std::vector<Tensor> inputs, double eps = 1e-5);

// Same comparison for tensors owned elsewhere, typically module parameters:
// they are perturbed in place and `fn` must read them. At most
// `max_probes_per_tensor` evenly spaced entries of each tensor are probed
// (0 probes all of them).
GradCheckReport GradCheckInPlace(const std::string& name,
                                 const std::function<Tensor()>& fn,
                                 std::vector<Tensor> params, double eps = 1e-5,
                                 int max_probes_per_tensor = 0);

}  // namespace dynaquery

#endif  // DYNAQUERY_GRAD_CHECK_H_
