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

#include "ctxbias/checkpoint.hpp"
#include "ctxbias/corpus.hpp"
#include "ctxbias/datagen.hpp"
#include "ctxbias/entity.hpp"
#include "ctxbias/error.hpp"
#include "ctxbias/eval.hpp"
#include "ctxbias/experiment.hpp"
#include "ctxbias/loss.hpp"
#include "ctxbias/metrics.hpp"
#include "ctxbias/model.hpp"
#include "ctxbias/optimizer.hpp"
#include "ctxbias/prompting.hpp"
#include "ctxbias/random.hpp"
#include "ctxbias/rescoring.hpp"
#include "ctxbias/tokenizer.hpp"
#include "ctxbias/training.hpp"
