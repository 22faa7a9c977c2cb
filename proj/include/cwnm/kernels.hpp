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
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cwnm/error.hpp"
#include "cwnm/prune.hpp"
#include "cwnm/vector.hpp"

// GEMM micro-kernels computing one t x vl output tile from a weight row-tile
// and one packed data strip (K rows x vl lanes):
//
//   Dense           outer-product schedule over all K columns
//   InnerProductNM  conventional N:M, one row at a time (reloads data rows)
//   OuterProductNM  conventional N:M traversed by column (scattered partial sums)
//   ColumnWise      column-wise N:M; each kept data row is loaded once and
//                   broadcast against t register-resident accumulators
//
// Every kernel reports the element traffic it generated.

namespace cwnm {

enum class KernelKind { Dense, InnerProductNM, OuterProductNM, ColumnWise };

inline constexpr std::array<KernelKind, 4> kAllKernelKinds = {
    KernelKind::Dense, KernelKind::InnerProductNM, KernelKind::OuterProductNM, KernelKind::ColumnWise};

inline const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::Dense: return "dense";
    case KernelKind::InnerProductNM: return "inner_nm";
    case KernelKind::OuterProductNM: return "outer_nm";
    case KernelKind::ColumnWise: return "columnwise";
  }
  return "?";
}

inline KernelKind kernel_kind_from_string(const std::string& s) {
  for (KernelKind k : kAllKernelKinds)
    if (s == to_string(k)) return k;
  if (s == "Dense") return KernelKind::Dense;
  if (s == "InnerProductNM") return KernelKind::InnerProductNM;
  if (s == "OuterProductNM") return KernelKind::OuterProductNM;
  if (s == "ColumnWise") return KernelKind::ColumnWise;
  throw ConfigError("unknown kernel kind '" + s + "'");
}

/// True if `t` accumulators plus one data register fit the register file.
constexpr bool fits_register_budget(std::size_t t, unsigned lmul) {
  return t >= 1 && (t + 1) * lmul <= kArchVectorRegs;
}

struct KernelConfig {
  KernelKind kind = KernelKind::ColumnWise;
  std::size_t t = 1;
  VectorEnv env{};

  std::size_t vl() const { return env.vl_f32(); }

  void validate() const {
    env.validate();
    if (t < 1) throw ConfigError("tile height t must be >= 1");
    if (kind == KernelKind::ColumnWise && !fits_register_budget(t, env.lmul))
      throw ConfigError("column-wise config t=" + std::to_string(t) + ", lmul=" + std::to_string(env.lmul) +
                        " needs " + std::to_string((t + 1) * env.lmul) + " vector registers (> 32)");
  }

  std::string str() const {
    return std::string(to_string(kind)) + "(t=" + std::to_string(t) + ",lmul=" + std::to_string(env.lmul) + ")";
  }

  friend bool operator==(const KernelConfig&, const KernelConfig&) = default;
};

/// Logical element accesses made by a kernel invocation.
struct TrafficCounters {
  std::uint64_t data_elem_loads = 0;
  std::uint64_t weight_elem_loads = 0;
  std::uint64_t output_elem_loads = 0;
  std::uint64_t output_elem_stores = 0;
  std::uint64_t macs = 0;

  TrafficCounters& operator+=(const TrafficCounters& o) {
    data_elem_loads += o.data_elem_loads;
    weight_elem_loads += o.weight_elem_loads;
    output_elem_loads += o.output_elem_loads;
    output_elem_stores += o.output_elem_stores;
    macs += o.macs;
    return *this;
  }
  std::uint64_t output_traffic() const { return output_elem_loads + output_elem_stores; }
  friend bool operator==(const TrafficCounters&, const TrafficCounters&) = default;
};

/// Overwrite: acc = W*X (acc is not read). Accumulate: acc += W*X.
enum class AccMode { Overwrite, Accumulate };

/// One tile of a conventional N:M weight stored for column traversal: for
/// each column with at least one kept weight, the (tile row, value) pairs.
struct ScatteredTile {
  std::size_t t = 0;
  std::size_t live_rows = 0;  // rows of the tile that exist in the matrix
  std::vector<std::uint32_t> cols;
  std::vector<std::size_t> entry_ptr{0};
  std::vector<std::uint32_t> entry_row;
  std::vector<float> entry_val;
  /// Column-major t-value blocks, filled when column_consistent().
  std::vector<float> block;

  /// Every listed column keeps all live rows, so partial sums never scatter.
  bool column_consistent() const {
    for (std::size_t j = 0; j < cols.size(); ++j)
      if (entry_ptr[j + 1] - entry_ptr[j] != live_rows) return false;
    return true;
  }
};

/// Splits a masked weight into `t`-row tiles traversed column by column.
inline std::vector<ScatteredTile> scatter_tiles(const Matrix& w, const Mask& mask, std::size_t t) {
  if (t < 1) throw ConfigError("t must be >= 1");
  if (w.rows != mask.rows || w.cols != mask.cols) throw ShapeError("mask shape does not match matrix");
  std::vector<ScatteredTile> tiles;
  for (std::size_t r0 = 0; r0 < w.rows; r0 += t) {
    ScatteredTile st;
    st.t = t;
    st.live_rows = std::min(t, w.rows - r0);
    for (std::size_t c = 0; c < w.cols; ++c) {
      const std::size_t before = st.entry_row.size();
      for (std::size_t r = 0; r < st.live_rows; ++r)
        if (mask(r0 + r, c)) {
          st.entry_row.push_back(static_cast<std::uint32_t>(r));
          st.entry_val.push_back(w(r0 + r, c));
        }
      if (st.entry_row.size() != before) {
        st.cols.push_back(static_cast<std::uint32_t>(c));
        st.entry_ptr.push_back(st.entry_row.size());
      }
    }
    if (st.column_consistent()) {
      st.block.assign(st.cols.size() * t, 0.0f);
      for (std::size_t j = 0; j < st.cols.size(); ++j)
        for (std::size_t e = st.entry_ptr[j]; e < st.entry_ptr[j + 1]; ++e)
          st.block[j * t + st.entry_row[e]] = st.entry_val[e];
    }
    tiles.push_back(std::move(st));
  }
  return tiles;
}

namespace detail {

inline void check_tile_buffers(const KernelConfig& cfg, std::span<const float> strip, std::span<float> acc,
                               std::size_t max_row_needed) {
  cfg.validate();
  const std::size_t vl = cfg.vl();
  if (strip.size() % vl != 0) throw ShapeError("strip size is not a multiple of vl");
  if (max_row_needed > strip.size() / vl)
    throw ShapeError("weight references data row " + std::to_string(max_row_needed - 1) + " beyond the strip");
  if (acc.size() != cfg.t * vl) throw ShapeError("accumulator tile must be t x vl");
}

// Outer-product schedule with t register accumulators. `cols == nullptr`
// walks columns 0..kept-1 (dense).
template <std::size_t T, std::size_t VL>
void outer_product_tile(const float* values, const std::uint32_t* cols, std::size_t kept, const float* strip,
                        float* acc, bool accumulate) {
  // Accumulators live in one flat block; the compiler maps each row to a
  // register group when T * VL fits the physical file.
  alignas(64) float a[T * VL];
  if (accumulate)
    std::memcpy(a, acc, sizeof(a));
  else
    std::fill_n(a, T * VL, 0.0f);
  for (std::size_t j = 0; j < kept; ++j) {
    const float* x = strip + (cols ? cols[j] : j) * VL;
    const float* v = values + j * T;
    for (std::size_t r = 0; r < T; ++r) vrt::fmacc(a + r * VL, v[r], x, VL);
  }
  std::memcpy(acc, a, sizeof(a));
}

inline void outer_product_tile_rt(std::size_t t, std::size_t vl, const float* values, const std::uint32_t* cols,
                                  std::size_t kept, const float* strip, float* acc, bool accumulate) {
  std::vector<float> a(t * vl, 0.0f);
  if (accumulate) std::copy(acc, acc + t * vl, a.begin());
  for (std::size_t j = 0; j < kept; ++j) {
    const float* x = strip + (cols ? cols[j] : j) * vl;
    const float* v = values + j * t;
    for (std::size_t r = 0; r < t; ++r) vrt::fmacc(a.data() + r * vl, v[r], x, vl);
  }
  std::copy(a.begin(), a.end(), acc);
}

using OuterTileFn = void (*)(const float*, const std::uint32_t*, std::size_t, const float*, float*, bool);

template <std::size_t VL, std::size_t... Ts>
constexpr std::array<OuterTileFn, kArchVectorRegs> make_outer_table(std::index_sequence<Ts...>) {
  return {nullptr, &outer_product_tile<Ts + 1, VL>...};
}

// Specializations for every (t, lmul) within the register budget at the
// default 256-bit vector length.
inline constexpr std::array<std::array<OuterTileFn, kArchVectorRegs>, 4> kOuterTables = {
    make_outer_table<8>(std::make_index_sequence<31>{}), make_outer_table<16>(std::make_index_sequence<15>{}),
    make_outer_table<32>(std::make_index_sequence<7>{}), make_outer_table<64>(std::make_index_sequence<3>{})};

inline OuterTileFn find_outer_tile(std::size_t t, std::size_t vl) {
  std::size_t idx;
  switch (vl) {
    case 8: idx = 0; break;
    case 16: idx = 1; break;
    case 32: idx = 2; break;
    case 64: idx = 3; break;
    default: return nullptr;
  }
  return t < kArchVectorRegs ? kOuterTables[idx][t] : nullptr;
}

inline void run_outer_tile(std::size_t t, std::size_t vl, const float* values, const std::uint32_t* cols,
                           std::size_t kept, const float* strip, float* acc, bool accumulate) {
  if (auto fn = find_outer_tile(t, vl))
    fn(values, cols, kept, strip, acc, accumulate);
  else
    outer_product_tile_rt(t, vl, values, cols, kept, strip, acc, accumulate);
}

template <std::size_t VL>
void inner_row(const float* values, const std::uint32_t* cols, std::size_t kept, const float* strip, float* acc,
               bool accumulate) {
  VReg<VL> a = accumulate ? VReg<VL>::load(acc) : VReg<VL>::zero();
  for (std::size_t j = 0; j < kept; ++j) a.fmacc(values[j], strip + cols[j] * VL);
  a.store(acc);
}

inline void inner_row_rt(std::size_t vl, const float* values, const std::uint32_t* cols, std::size_t kept,
                         const float* strip, float* acc, bool accumulate) {
  std::vector<float> a(vl, 0.0f);
  if (accumulate) std::copy(acc, acc + vl, a.begin());
  for (std::size_t j = 0; j < kept; ++j) vrt::fmacc(a.data(), values[j], strip + cols[j] * vl, vl);
  std::copy(a.begin(), a.end(), acc);
}

}  // namespace detail

/// Column-wise N:M micro-kernel. For each kept column j the data row
/// col_index[j] is loaded once and accumulated into all t rows.
inline TrafficCounters microkernel_columnwise(const ColumnTileView& w, std::span<const float> strip,
                                              const KernelConfig& cfg, std::span<float> acc,
                                              AccMode mode = AccMode::Overwrite) {
  if (cfg.kind != KernelKind::ColumnWise) throw ConfigError("config kind is not columnwise");
  if (w.t != cfg.t) throw ShapeError("weight tile height does not match kernel t");
  if (w.values.size() != w.kept() * w.t) throw ShapeError("tile values length must be kept x t");
  detail::check_tile_buffers(cfg, strip, acc, w.kept() ? w.cols.back() + 1 : 0);
  const std::size_t vl = cfg.vl();
  const bool accumulate = mode == AccMode::Accumulate;
  detail::run_outer_tile(cfg.t, vl, w.values.data(), w.cols.data(), w.kept(), strip.data(), acc.data(), accumulate);

  TrafficCounters tc;
  tc.data_elem_loads = w.kept() * vl;
  tc.weight_elem_loads = w.kept() * cfg.t;
  tc.output_elem_loads = accumulate ? cfg.t * vl : 0;
  tc.output_elem_stores = cfg.t * vl;
  tc.macs = w.kept() * cfg.t * vl;
  return tc;
}

/// Dense tiled GEMM. `w` holds all K columns of the tile (indices ignored).
inline TrafficCounters microkernel_dense(const ColumnTileView& w, std::span<const float> strip,
                                         const KernelConfig& cfg, std::span<float> acc,
                                         AccMode mode = AccMode::Overwrite) {
  if (cfg.kind != KernelKind::Dense) throw ConfigError("config kind is not dense");
  if (w.t != cfg.t) throw ShapeError("weight tile height does not match kernel t");
  const std::size_t k = w.values.size() / w.t;
  if (k * w.t != w.values.size()) throw ShapeError("dense tile values length must be K x t");
  detail::check_tile_buffers(cfg, strip, acc, k);
  if (k != strip.size() / cfg.vl()) throw ShapeError("dense tile K does not match strip rows");
  const std::size_t vl = cfg.vl();
  const bool accumulate = mode == AccMode::Accumulate;
  detail::run_outer_tile(cfg.t, vl, w.values.data(), nullptr, k, strip.data(), acc.data(), accumulate);

  TrafficCounters tc;
  tc.data_elem_loads = k * vl;
  tc.weight_elem_loads = k * cfg.t;
  tc.output_elem_loads = accumulate ? cfg.t * vl : 0;
  tc.output_elem_stores = cfg.t * vl;
  tc.macs = k * cfg.t * vl;
  return tc;
}

/// Conventional N:M inner-product kernel over rows [r0, r0 + t) of `w`.
/// Each row reloads the data rows it references. Rows past `w.rows` produce zeros.
inline TrafficCounters microkernel_inner_nm(const RowSparseWeight& w, std::size_t r0, std::span<const float> strip,
                                            const KernelConfig& cfg, std::span<float> acc,
                                            AccMode mode = AccMode::Overwrite) {
  if (cfg.kind != KernelKind::InnerProductNM) throw ConfigError("config kind is not inner_nm");
  std::size_t max_row = 0;
  for (std::size_t r = r0; r < std::min(w.rows, r0 + cfg.t); ++r)
    if (w.kept(r)) max_row = std::max<std::size_t>(max_row, w.col_index[w.row_ptr[r + 1] - 1] + 1);
  detail::check_tile_buffers(cfg, strip, acc, max_row);
  const std::size_t vl = cfg.vl();
  const bool accumulate = mode == AccMode::Accumulate;
  using RowFn = void (*)(const float*, const std::uint32_t*, std::size_t, const float*, float*, bool);
  RowFn fn = nullptr;
  switch (vl) {
    case 8: fn = &detail::inner_row<8>; break;
    case 16: fn = &detail::inner_row<16>; break;
    case 32: fn = &detail::inner_row<32>; break;
    case 64: fn = &detail::inner_row<64>; break;
    default: break;
  }

  TrafficCounters tc;
  for (std::size_t r = 0; r < cfg.t; ++r) {
    float* out = acc.data() + r * vl;
    const std::size_t row = r0 + r;
    const std::size_t kept = row < w.rows ? w.kept(row) : 0;
    const float* vals = kept ? w.values.data() + w.row_ptr[row] : nullptr;
    const std::uint32_t* cols = kept ? w.col_index.data() + w.row_ptr[row] : nullptr;
    if (fn)
      fn(vals, cols, kept, strip.data(), out, accumulate);
    else
      detail::inner_row_rt(vl, vals, cols, kept, strip.data(), out, accumulate);
    tc.data_elem_loads += kept * vl;
    tc.weight_elem_loads += kept;
    tc.macs += kept * vl;
  }
  tc.output_elem_loads = accumulate ? cfg.t * vl : 0;
  tc.output_elem_stores = cfg.t * vl;
  return tc;
}

/// Conventional N:M outer-product kernel. Columns are traversed once each;
/// when kept weights of a column occupy only some tile rows, partial sums
/// go through the output buffer (load + store per kept weight). A tile whose
/// columns are all complete keeps its accumulators in registers.
inline TrafficCounters microkernel_outer_nm(const ScatteredTile& w, std::span<const float> strip,
                                            const KernelConfig& cfg, std::span<float> acc,
                                            AccMode mode = AccMode::Overwrite) {
  if (cfg.kind != KernelKind::OuterProductNM) throw ConfigError("config kind is not outer_nm");
  if (w.t != cfg.t) throw ShapeError("weight tile height does not match kernel t");
  detail::check_tile_buffers(cfg, strip, acc, w.cols.empty() ? 0 : w.cols.back() + 1);
  const std::size_t vl = cfg.vl(), t = cfg.t;
  const bool accumulate = mode == AccMode::Accumulate;
  TrafficCounters tc;
  tc.data_elem_loads = w.cols.size() * vl;
  tc.weight_elem_loads = w.entry_val.size();
  tc.macs = w.entry_val.size() * vl;

  if (w.column_consistent()) {
    // Same register schedule as the column-wise kernel.
    if (w.block.size() != w.cols.size() * t) throw ShapeError("scattered tile is missing its register block");
    detail::run_outer_tile(t, vl, w.block.data(), w.cols.data(), w.cols.size(), strip.data(), acc.data(), accumulate);
    tc.output_elem_loads = accumulate ? t * vl : 0;
    tc.output_elem_stores = t * vl;
    return tc;
  }

  if (!accumulate) {
    std::fill(acc.begin(), acc.end(), 0.0f);
    tc.output_elem_stores += t * vl;
  }
  for (std::size_t j = 0; j < w.cols.size(); ++j) {
    const float* x = strip.data() + w.cols[j] * vl;
    for (std::size_t e = w.entry_ptr[j]; e < w.entry_ptr[j + 1]; ++e)
      vrt::fmacc(acc.data() + w.entry_row[e] * vl, w.entry_val[e], x, vl);
    const std::size_t touched = w.entry_ptr[j + 1] - w.entry_ptr[j];
    tc.output_elem_loads += touched * vl;
    tc.output_elem_stores += touched * vl;
  }
  return tc;
}

}  // namespace cwnm
