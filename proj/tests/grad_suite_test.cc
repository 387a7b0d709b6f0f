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

#include "dynaquery/grad_suite.h"

#include <gtest/gtest.h>

#include <set>

namespace dynaquery {
namespace {

TEST(GradSuiteTest, EveryEntryPasses) {
  const std::vector<GradSuiteEntry> entries = RunGradCheckSuite(3);
  std::set<std::string> blocks;
  for (const GradSuiteEntry& e : entries) {
    EXPECT_LT(e.report.max_rel_error, 1e-4)
        << e.report.op_name << " analytic " << e.report.analytic << " numeric "
        << e.report.numeric;
    if (e.group == "block") blocks.insert(e.report.op_name);
  }
  for (const char* name : {"density_extractor", "cgfe", "query_refinement",
                           "encoder_layer", "total_loss"}) {
    EXPECT_TRUE(blocks.count(name)) << name;
  }
}

TEST(GradSuiteTest, SeedChangesInputsNotVerdicts) {
  for (uint64_t seed : {11u, 12u}) {
    for (const GradSuiteEntry& e : RunGradCheckSuite(seed)) {
      EXPECT_LT(e.report.max_rel_error, 1e-4)
          << seed << " " << e.report.op_name;
    }
  }
}

}  // namespace
}  // namespace dynaquery
