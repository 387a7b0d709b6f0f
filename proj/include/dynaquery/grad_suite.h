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

#ifndef DYNAQUERY_GRAD_SUITE_H_
#define DYNAQUERY_GRAD_SUITE_H_

#include <cstdint>
#include <string>
#include <vector>

#include "dynaquery/grad_check.h"

namespace dynaquery {

struct GradSuiteEntry {
  std::string group;  // "op" or "block"
  GradCheckReport report;
};

// Central-difference checks of every differentiable op on random inputs and
// of the composite blocks (density extractor, CGFE, score head, query
// refinement, encoder layer, decoder, selection and total losses) with small
// random weights.
std::vector<GradSuiteEntry> RunGradCheckSuite(uint64_t seed = 1,
                                              double eps = 1e-5);

}  // namespace dynaquery

#endif  // DYNAQUERY_GRAD_SUITE_H_
