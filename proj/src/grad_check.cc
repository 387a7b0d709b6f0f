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

#include "dynaquery/grad_check.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "dynaquery/error.h"
#include "dynaquery/ops.h"

namespace dynaquery {
namespace {

Tensor Scalarize(const Tensor& out) {
  if (out.numel() == 1) return out;
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> w(out.numel());
  for (double& x : w) x = u(rng) * ((rng() & 1) ? 1.0 : -1.0);
  return Sum(Mul(out, Tensor(out.shape(), std::move(w))));
}

double Evaluate(const DifferentiableFn& fn, std::span<const Tensor> inputs,
                const std::string& name) {
  NoGradGuard no_grad;
  const double v = Scalarize(fn(inputs)).item();
  if (!std::isfinite(v)) {
    Fail(ErrorKind::kInput, "grad check of ", name,
         " aborted: non-finite forward value");
  }
  return v;
}

void CheckEps(double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    Fail(ErrorKind::kInput, "grad check eps ", eps, " outside (0, 1e-2]");
  }
}

void CheckFinite(const Tensor& t, const std::string& name) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      Fail(ErrorKind::kInput, "grad check of ", name, ": non-finite input");
    }
  }
}

// Backpropagates once, then probes entries of `leaves` by central
// differences. `evaluate` recomputes the scalarized output.
GradCheckReport Compare(const std::string& name, const Tensor& root,
                        std::vector<Tensor>& leaves,
                        const std::function<double()>& evaluate, double eps,
                        int max_probes) {
  if (!std::isfinite(root.item())) {
    Fail(ErrorKind::kInput, "grad check of ", name,
         " aborted: non-finite forward value");
  }
  root.Backward();

  GradCheckReport report{name, 0.0, eps};
  for (size_t i = 0; i < leaves.size(); ++i) {
    Tensor& leaf = leaves[i];
    const bool touched = leaf.has_grad();
    auto values = leaf.mutable_data();
    const size_t n = values.size();
    size_t step = 1;
    if (max_probes > 0 && n > static_cast<size_t>(max_probes)) {
      step = (n + max_probes - 1) / max_probes;
    }
    for (size_t j = 0; j < n; j += step) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double up = evaluate();
      values[j] = saved - eps;
      const double down = evaluate();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = touched ? leaf.grad()[j] : 0.0;
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > report.max_rel_error || report.worst_input < 0) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        report.worst_input = static_cast<int>(i);
        report.worst_index = static_cast<int64_t>(j);
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace

GradCheckReport GradCheck(const std::string& op_name,
                          const DifferentiableFn& fn,
                          std::vector<Tensor> inputs, double eps) {
  CheckEps(eps);
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    CheckFinite(t, op_name);
    Tensor leaf = t.Detach();
    leaf.set_requires_grad(true);
    leaves.push_back(leaf);
  }
  const Tensor root = Scalarize(fn(leaves));
  return Compare(
      op_name, root, leaves, [&] { return Evaluate(fn, leaves, op_name); }, eps,
      0);
}

GradCheckReport GradCheckInPlace(const std::string& name,
                                 const std::function<Tensor()>& fn,
                                 std::vector<Tensor> params, double eps,
                                 int max_probes_per_tensor) {
  CheckEps(eps);
  for (Tensor& p : params) {
    CheckFinite(p, name);
    p.set_requires_grad(true);
    p.ZeroGrad();
  }
  const Tensor root = Scalarize(fn());
  const DifferentiableFn wrapped = [&](std::span<const Tensor>) {
    return fn();
  };
  return Compare(
      name, root, params, [&] { return Evaluate(wrapped, {}, name); }, eps,
      max_probes_per_tensor);
}

}  // namespace dynaquery
