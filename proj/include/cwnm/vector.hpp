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

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstring>
#include <string>

#include "cwnm/error.hpp"

// A portable model of a length-agnostic vector unit. Registers hold VL f32
// lanes where VL = (vlen_bits / 32) * lmul; grouping `lmul` architectural
// registers leaves 32 / lmul logical registers.

namespace cwnm {

inline constexpr unsigned kArchVectorRegs = 32;
inline constexpr unsigned kDefaultVlenBits = 256;

struct VectorEnv {
  unsigned vlen_bits = kDefaultVlenBits;
  unsigned lmul = 1;

  std::size_t vl_f32() const { return static_cast<std::size_t>(vlen_bits / 32) * lmul; }
  unsigned logical_regs() const { return kArchVectorRegs / lmul; }

  void validate() const {
    if (lmul != 1 && lmul != 2 && lmul != 4 && lmul != 8)
      throw ConfigError("lmul must be one of 1, 2, 4, 8 (got " + std::to_string(lmul) + ")");
    if (vlen_bits < 32 || vlen_bits % 32 != 0 || (vlen_bits & (vlen_bits - 1)) != 0)
      throw ConfigError("vlen_bits must be a power of two >= 32");
  }

  friend bool operator==(const VectorEnv&, const VectorEnv&) = default;
};

/// vsetvl: elements granted for `avl` requested with a maximum of `vlmax`.
constexpr std::size_t setvl(std::size_t avl, std::size_t vlmax) { return std::min(avl, vlmax); }

/// A vector register group with a compile-time lane count.
template <std::size_t VL>
struct VReg {
  alignas(64) std::array<float, VL> lane;

  static VReg zero() {
    VReg r;
    r.lane.fill(0.0f);
    return r;
  }
  static VReg load(const float* p) {
    VReg r;
    std::memcpy(r.lane.data(), p, VL * sizeof(float));
    return r;
  }
  void store(float* p) const { std::memcpy(p, lane.data(), VL * sizeof(float)); }

  /// vfmacc.vf: this += s * x
  void fmacc(float s, const VReg& x) {
    for (std::size_t l = 0; l < VL; ++l) lane[l] += s * x.lane[l];
  }
  void fmacc(float s, const float* x) {
    for (std::size_t l = 0; l < VL; ++l) lane[l] += s * x[l];
  }
};

// Runtime-VL forms of the same operations, used when no compile-time
// specialization exists for a lane count.
namespace vrt {

inline void fmacc(float* acc, float s, const float* x, std::size_t vl) {
  for (std::size_t l = 0; l < vl; ++l) acc[l] += s * x[l];
}

/// Unit-stride copy of `vl` elements (vle32 + vse32).
inline void copy(float* dst, const float* src, std::size_t vl) { std::memcpy(dst, src, vl * sizeof(float)); }

/// Strided load into a contiguous destination (vlse32 + vse32).
inline void copy_strided(float* dst, const float* src, std::ptrdiff_t stride, std::size_t vl) {
  for (std::size_t l = 0; l < vl; ++l) dst[l] = src[static_cast<std::ptrdiff_t>(l) * stride];
}

inline void fill_zero(float* dst, std::size_t vl) { std::fill(dst, dst + vl, 0.0f); }

}  // namespace vrt
}  // namespace cwnm
