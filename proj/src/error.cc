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

#include "dynaquery/error.h"

namespace dynaquery {

std::string_view ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension:
      return "dimension";
    case ErrorKind::kInput:
      return "input";
    case ErrorKind::kConfig:
      return "config";
    case ErrorKind::kBudget:
      return "budget";
    case ErrorKind::kIndex:
      return "index";
    case ErrorKind::kParse:
      return "parse";
    case ErrorKind::kDivergence:
      return "divergence";
    case ErrorKind::kUsage:
      return "usage";
  }
  return "unknown";
}

}  // namespace dynaquery
