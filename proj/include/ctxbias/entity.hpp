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

#include <array>
#include <string>
#include <string_view>

#include "ctxbias/error.hpp"

namespace ctxbias {

// Entity classes carried by biasing lists and predicted by the class head.
// kNone is a prediction target only; it never keys a biasing list.
enum class EntityClass : int { kPer = 0, kLoc = 1, kOrg = 2, kNone = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr int kNumEntityClasses = 3;
inline constexpr std::array<EntityClass, 3> kEntityClasses = {
    EntityClass::kPer, EntityClass::kLoc, EntityClass::kOrg};

inline int ClassIndex(EntityClass c) { return static_cast<int>(c); }

inline EntityClass ClassFromIndex(int i) {
  if (i < 0 || i >= kNumClasses) {
    ThrowData("entity class index out of range: " + std::to_string(i));
  }
  return static_cast<EntityClass>(i);
}

inline std::string_view ClassName(EntityClass c) {
  switch (c) {
    case EntityClass::kPer: return "PER";
    case EntityClass::kLoc: return "LOC";
    case EntityClass::kOrg: return "ORG";
    case EntityClass::kNone: return "NONE";
  }
  return "NONE";
}

inline EntityClass ParseClassName(std::string_view name) {
  if (name == "PER") return EntityClass::kPer;
  if (name == "LOC") return EntityClass::kLoc;
  if (name == "ORG") return EntityClass::kOrg;
  if (name == "NONE") return EntityClass::kNone;
  ThrowData("unknown entity class '" + std::string(name) + "'");
}

}  // namespace ctxbias
