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

#ifndef DYNAQUERY_ERROR_H_
#define DYNAQUERY_ERROR_H_

#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dynaquery {

// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  kDimension = 2,
  kInput = 3,
  kConfig = 4,
  kBudget = 5,
  kIndex = 6,
  kParse = 7,
  kDivergence = 8,
  kUsage = 9,
};

std::string_view ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(ErrorKindName(kind)) +
                           " error: " + message),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

template <typename... Args>
std::string StrCat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
[[noreturn]] void Fail(ErrorKind kind, const Args&... args) {
  throw Error(kind, StrCat(args...));
}

}  // namespace dynaquery

#endif  // DYNAQUERY_ERROR_H_
