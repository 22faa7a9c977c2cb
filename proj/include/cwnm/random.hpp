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

#include <cstdint>
#include <random>
#include <vector>

#include "cwnm/tensor.hpp"

namespace cwnm {

inline constexpr std::uint64_t kDefaultSeed = 42;

/// Seeded source of test tensors and weights, uniform in [lo, hi).
class TensorRng {
 public:
  explicit TensorRng(std::uint64_t seed = kDefaultSeed) : gen_(seed) {}

  float uniform(float lo = -1.0f, float hi = 1.0f) { return std::uniform_real_distribution<float>(lo, hi)(gen_); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen_);
  }

  std::vector<float> fill(std::size_t count, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(count);
    for (float& x : v) x = uniform(lo, hi);
    return v;
  }

  Tensor tensor(Dims4 d, Layout layout) { return Tensor({d.n, d.c, d.h, d.w}, layout, fill(d.count())); }
  Matrix matrix(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, fill(rows * cols)); }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cwnm
