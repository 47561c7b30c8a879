// Copyright 2026 The SimCut Lab Authors
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

#include "simcut/rng.hpp"
#include "simcut/tensor.hpp"
#include "simcut/text.hpp"
#include "simcut/transformer.hpp"
#include "simcut/losses.hpp"
#include "simcut/decode.hpp"
#include "simcut/trainer.hpp"
#include "simcut/config.hpp"
