// Copyright (c) 2026 The ctxbias Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace ctxbias {

// Maps onto CLI exit codes: usage 1, data 2, runtime 3.
enum class ErrorKind { kUsage = 1, kData = 2, kRuntime = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void ThrowData(const std::string& what) {
  throw Error(ErrorKind::kData, what);
}

[[noreturn]] inline void ThrowUsage(const std::string& what) {
  throw Error(ErrorKind::kUsage, what);
}

[[noreturn]] inline void ThrowRuntime(const std::string& what) {
  throw Error(ErrorKind::kRuntime, what);
}

}  // namespace ctxbias
