// Copyright 2026 The cwnm Authors. All Rights Reserved.
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

#include "cwnm/conv.hpp"
#include "cwnm/error.hpp"
#include "cwnm/kernels.hpp"
#include "cwnm/manifest.hpp"
#include "cwnm/packer.hpp"
#include "cwnm/prune.hpp"
#include "cwnm/random.hpp"
#include "cwnm/reference.hpp"
#include "cwnm/tensor.hpp"
#include "cwnm/tuner.hpp"
#include "cwnm/vector.hpp"
