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
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cwnm/detail/binary_io.hpp"
#include "cwnm/error.hpp"
#include "cwnm/tensor.hpp"

namespace cwnm {

enum class PruneMode { RowWise, ColumnWise };

/// N:M pruning parameters. In column-wise mode the pruning unit is a column
/// segment of a `tile_t`-row tile of the weight matrix.
struct PruneSpec {
  std::size_t n = 1;
  std::size_t m = 1;
  std::size_t tile_t = 1;
  PruneMode mode = PruneMode::ColumnWise;
  double sparsity_ratio = 0.0;

  void validate() const {
    if (n < 1 || m < 1) throw ConfigError("n and m must be >= 1");
    if (n > m)
      throw ConfigError("n (" + std::to_string(n) + ") must not exceed m (" + std::to_string(m) + ")");
    if (tile_t < 1) throw ConfigError("tile_t must be >= 1");
  }

  /// Kept count per group of `m`: round((1 - ratio) * m).
  static std::size_t kept_for_ratio(double ratio, std::size_t m) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("sparsity ratio must lie in [0, 1)");
    if (m < 1) throw ConfigError("m must be >= 1");
    const auto n = static_cast<std::size_t>(std::llround((1.0 - ratio) * static_cast<double>(m)));
    if (n < 1) throw ConfigError("sparsity ratio leaves no kept unit per group of " + std::to_string(m));
    return n;
  }

  static PruneSpec from_ratio(double ratio, std::size_t m, std::size_t tile_t,
                              PruneMode mode = PruneMode::ColumnWise) {
    PruneSpec s{kept_for_ratio(ratio, m), m, tile_t, mode, ratio};
    s.validate();
    return s;
  }

  static PruneSpec from_nm(std::size_t n, std::size_t m, std::size_t tile_t,
                           PruneMode mode = PruneMode::ColumnWise) {
    PruneSpec s{n, m, tile_t, mode, 0.0};
    s.validate();
    s.sparsity_ratio = 1.0 - static_cast<double>(n) / static_cast<double>(m);
    return s;
  }
};

/// Number of units kept in a group of width `g`. Full groups keep `n`; a
/// trailing partial group keeps round(n*g/m), at least one.
inline std::size_t group_keep(std::size_t n, std::size_t m, std::size_t g) {
  if (g >= m) return n;
  if (g == 0 || n == 0) return 0;
  const auto k = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * static_cast<double>(g) / static_cast<double>(m)));
  return std::clamp<std::size_t>(k, 1, g);
}

/// Keep/prune flag per weight, row-major like the matrix it masks.
struct Mask {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool value = false)
      : rows(r), cols(c), keep(r * c, value ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { keep[r * cols + c] = v ? 1 : 0; }

  std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }
  double sparsity() const {
    return keep.empty() ? 0.0 : 1.0 - static_cast<double>(kept()) / static_cast<double>(keep.size());
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

namespace detail {

// Indices of the `k` largest scores, lower index first on ties, returned ascending.
inline std::vector<std::size_t> top_k(std::span<const double> score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return score[a] != score[b] ? score[a] > score[b] : a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline void check_nm(std::size_t n, std::size_t m) {
  if (m < 1 || n < 1) throw ConfigError("n and m must be >= 1");
  if (n > m) throw ConfigError("n (" + std::to_string(n) + ") must not exceed m (" + std::to_string(m) + ")");
}

}  // namespace detail

/// Conventional N:M mask: in each row, every window of `m` consecutive
/// weights keeps its `n` largest magnitudes.
inline Mask select_mask_rowwise(const Matrix& w, std::size_t n, std::size_t m) {
  detail::check_nm(n, m);
  Mask mask(w.rows, w.cols);
  std::vector<double> score;
  for (std::size_t r = 0; r < w.rows; ++r) {
    for (std::size_t g0 = 0; g0 < w.cols; g0 += m) {
      const std::size_t g = std::min(m, w.cols - g0);
      score.assign(g, 0.0);
      for (std::size_t j = 0; j < g; ++j) score[j] = std::fabs(static_cast<double>(w(r, g0 + j)));
      for (std::size_t j : detail::top_k(score, group_keep(n, m, g))) mask.set(r, g0 + j, true);
    }
  }
  return mask;
}

/// Column-wise N:M mask. Within each `tile_t`-row tile, each window of `m`
/// columns keeps the `n` column segments with the largest L1 norm; kept
/// segments keep every row of the tile. A trailing short tile is scored over
/// the rows it has.
inline Mask select_mask_columnwise(const Matrix& w, std::size_t n, std::size_t m, std::size_t tile_t) {
  detail::check_nm(n, m);
  if (tile_t < 1) throw ConfigError("tile_t must be >= 1");
  Mask mask(w.rows, w.cols);
  std::vector<double> l1(w.cols);
  for (std::size_t r0 = 0; r0 < w.rows; r0 += tile_t) {
    const std::size_t r1 = std::min(w.rows, r0 + tile_t);
    std::fill(l1.begin(), l1.end(), 0.0);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = 0; c < w.cols; ++c) l1[c] += std::fabs(static_cast<double>(w(r, c)));
    for (std::size_t g0 = 0; g0 < w.cols; g0 += m) {
      const std::size_t g = std::min(m, w.cols - g0);
      for (std::size_t j : detail::top_k(std::span<const double>(l1).subspan(g0, g), group_keep(n, m, g)))
        for (std::size_t r = r0; r < r1; ++r) mask.set(r, g0 + j, true);
    }
  }
  return mask;
}

inline Mask select_mask(const Matrix& w, const PruneSpec& spec) {
  spec.validate();
  return spec.mode == PruneMode::RowWise ? select_mask_rowwise(w, spec.n, spec.m)
                                         : select_mask_columnwise(w, spec.n, spec.m, spec.tile_t);
}

inline Matrix apply_mask(const Matrix& w, const Mask& mask) {
  if (w.rows != mask.rows || w.cols != mask.cols) throw ShapeError("mask shape does not match matrix");
  Matrix out = w;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (!mask.keep[i]) out.data[i] = 0.0f;
  return out;
}

/// One row-tile of a SparseWeight: the kept column indices and, per kept
/// column, `t` consecutive values (one per tile row).
struct ColumnTileView {
  std::size_t t = 0;
  std::span<const std::uint32_t> cols;
  std::span<const float> values;

  std::size_t kept() const { return cols.size(); }
  std::span<const float> column(std::size_t j) const { return values.subspan(j * t, t); }
};

/// Tile-compressed column-wise N:M weight matrix.
struct SparseWeight {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t tile_t = 1;
  std::size_t n = 0, m = 0;
  /// col_index[tile_ptr[i] .. tile_ptr[i+1]) are the kept columns of tile i.
  std::vector<std::size_t> tile_ptr{0};
  std::vector<std::uint32_t> col_index;
  std::vector<float> values;

  std::size_t tiles() const { return tile_ptr.size() - 1; }
  std::size_t kept_total() const { return col_index.size(); }

  ColumnTileView tile(std::size_t i) const {
    const std::size_t b = tile_ptr[i], e = tile_ptr[i + 1];
    return {tile_t, std::span<const std::uint32_t>(col_index).subspan(b, e - b),
            std::span<const float>(values).subspan(b * tile_t, (e - b) * tile_t)};
  }

  /// Structural invariants; throws FormatError on violation.
  void validate() const {
    if (tile_t < 1) throw FormatError("tile_t must be >= 1");
    const std::size_t want_tiles = (rows + tile_t - 1) / tile_t;
    if (tiles() != want_tiles) throw FormatError("tile count does not match rows / tile_t");
    if (tile_ptr.front() != 0 || tile_ptr.back() != col_index.size())
      throw FormatError("tile pointer array inconsistent with index array");
    if (values.size() != col_index.size() * tile_t)
      throw FormatError("values length must equal kept columns x tile_t");
    for (std::size_t i = 0; i < tiles(); ++i) {
      if (tile_ptr[i] > tile_ptr[i + 1]) throw FormatError("tile pointers must be non-decreasing");
      for (std::size_t k = tile_ptr[i]; k < tile_ptr[i + 1]; ++k) {
        if (col_index[k] >= cols) throw FormatError("column index out of range");
        if (k > tile_ptr[i] && col_index[k] <= col_index[k - 1])
          throw FormatError("column indices must be strictly increasing within a tile");
      }
    }
  }

  /// True if every tile keeps exactly group_keep(n, m, width) columns per window of m.
  bool satisfies_nm() const {
    if (m == 0) return false;
    for (std::size_t i = 0; i < tiles(); ++i) {
      const auto tv = tile(i);
      for (std::size_t g0 = 0; g0 < cols; g0 += m) {
        const std::size_t g = std::min(m, cols - g0);
        const auto cnt = std::count_if(tv.cols.begin(), tv.cols.end(),
                                       [&](std::uint32_t c) { return c >= g0 && c < g0 + g; });
        if (static_cast<std::size_t>(cnt) != group_keep(n, m, g)) return false;
      }
    }
    return true;
  }
};

/// Packs the kept column segments of `w` into per-tile blocks. The mask must
/// keep or prune each column segment of a tile as a whole. Rows past the end
/// of the matrix in the last tile are stored as zeros. `n`/`m` are recorded
/// as metadata only; 0 means "same as cols" (unpruned).
inline SparseWeight compress(const Matrix& w, const Mask& mask, std::size_t tile_t,
                             std::size_t n = 0, std::size_t m = 0) {
  if (tile_t < 1) throw ConfigError("tile_t must be >= 1");
  if (w.rows != mask.rows || w.cols != mask.cols) throw ShapeError("mask shape does not match matrix");
  SparseWeight sw;
  sw.rows = w.rows;
  sw.cols = w.cols;
  sw.tile_t = tile_t;
  sw.m = m == 0 ? w.cols : m;
  sw.n = n == 0 ? sw.m : n;
  for (std::size_t r0 = 0; r0 < w.rows; r0 += tile_t) {
    const std::size_t r1 = std::min(w.rows, r0 + tile_t);
    for (std::size_t c = 0; c < w.cols; ++c) {
      const bool k = mask(r0, c);
      for (std::size_t r = r0 + 1; r < r1; ++r)
        if (mask(r, c) != k)
          throw ConfigError("mask is not column-wise: column " + std::to_string(c) +
                            " is split inside the tile starting at row " + std::to_string(r0));
      if (!k) continue;
      sw.col_index.push_back(static_cast<std::uint32_t>(c));
      for (std::size_t r = r0; r < r0 + tile_t; ++r) sw.values.push_back(r < r1 ? w(r, c) : 0.0f);
    }
    sw.tile_ptr.push_back(sw.col_index.size());
  }
  return sw;
}

inline Matrix decompress(const SparseWeight& sw) {
  Matrix out(sw.rows, sw.cols);
  for (std::size_t i = 0; i < sw.tiles(); ++i) {
    const auto tv = sw.tile(i);
    const std::size_t r0 = i * sw.tile_t;
    for (std::size_t j = 0; j < tv.kept(); ++j) {
      const auto col = tv.column(j);
      for (std::size_t r = 0; r < sw.tile_t && r0 + r < sw.rows; ++r) out(r0 + r, tv.cols[j]) = col[r];
    }
  }
  return out;
}

/// Mask selection plus compression in one call.
inline SparseWeight prune_and_compress(const Matrix& w, const PruneSpec& spec) {
  spec.validate();
  if (spec.mode == PruneMode::RowWise && spec.tile_t != 1)
    throw ConfigError("row-wise masks compress only with tile_t = 1");
  const Mask mask = select_mask(w, spec);
  return compress(w, mask, spec.tile_t, spec.n, spec.m);
}

/// Kept count of every (row-tile, column group) pair, tile-major.
inline std::vector<std::size_t> group_kept_counts(const Mask& mask, std::size_t m, std::size_t tile_t) {
  std::vector<std::size_t> counts;
  for (std::size_t r0 = 0; r0 < mask.rows; r0 += tile_t)
    for (std::size_t g0 = 0; g0 < mask.cols; g0 += m) {
      std::size_t k = 0;
      for (std::size_t c = g0; c < std::min(mask.cols, g0 + m); ++c) k += mask(r0, c) ? 1 : 0;
      counts.push_back(k);
    }
  return counts;
}

/// Conventional row-compressed N:M weight (CSR with the row's kept columns).
struct RowSparseWeight {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::uint32_t> col_index;
  std::vector<float> values;

  std::size_t kept(std::size_t r) const { return row_ptr[r + 1] - row_ptr[r]; }
};

inline RowSparseWeight compress_rows(const Matrix& w, const Mask& mask) {
  if (w.rows != mask.rows || w.cols != mask.cols) throw ShapeError("mask shape does not match matrix");
  RowSparseWeight rs;
  rs.rows = w.rows;
  rs.cols = w.cols;
  for (std::size_t r = 0; r < w.rows; ++r) {
    for (std::size_t c = 0; c < w.cols; ++c)
      if (mask(r, c)) {
        rs.col_index.push_back(static_cast<std::uint32_t>(c));
        rs.values.push_back(w(r, c));
      }
    rs.row_ptr.push_back(rs.col_index.size());
  }
  return rs;
}

// Sparse weight file: "CWSW" | u32 version=1 | rows | cols | tile_t | n | m (u32) |
// per tile: u32 kept_count, kept_count x u32 indices, kept_count x tile_t x f32.
inline constexpr std::uint32_t kSparseFileVersion = 1;

inline std::string encode_sparse_weight(const SparseWeight& sw) {
  sw.validate();
  detail::ByteWriter w;
  w.magic("CWSW");
  w.put<std::uint32_t>(kSparseFileVersion);
  for (std::size_t v : {sw.rows, sw.cols, sw.tile_t, sw.n, sw.m}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  for (std::size_t i = 0; i < sw.tiles(); ++i) {
    const auto tv = sw.tile(i);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tv.kept()));
    for (std::uint32_t c : tv.cols) w.put<std::uint32_t>(c);
    w.put_floats(tv.values);
  }
  return w.bytes();
}

inline SparseWeight decode_sparse_weight(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  r.expect_magic("CWSW");
  if (auto v = r.get<std::uint32_t>("version"); v != kSparseFileVersion)
    throw FormatError("unsupported sparse weight file version " + std::to_string(v));
  SparseWeight sw;
  sw.rows = r.get<std::uint32_t>("rows");
  sw.cols = r.get<std::uint32_t>("cols");
  sw.tile_t = r.get<std::uint32_t>("tile_t");
  sw.n = r.get<std::uint32_t>("n");
  sw.m = r.get<std::uint32_t>("m");
  if (sw.tile_t < 1) throw FormatError("tile_t must be >= 1");
  const std::size_t tiles = (sw.rows + sw.tile_t - 1) / sw.tile_t;
  for (std::size_t i = 0; i < tiles; ++i) {
    const std::size_t k = r.get<std::uint32_t>("kept_count");
    if (k > sw.cols) throw FormatError("kept_count exceeds cols");
    for (std::size_t j = 0; j < k; ++j) sw.col_index.push_back(r.get<std::uint32_t>("column index"));
    const std::size_t off = sw.values.size();
    sw.values.resize(off + k * sw.tile_t);
    r.get_floats(std::span<float>(sw.values).subspan(off), "values");
    sw.tile_ptr.push_back(sw.col_index.size());
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after sparse weight payload");
  sw.validate();
  return sw;
}

inline void write_sparse_weight(const SparseWeight& sw, const std::string& path) {
  detail::write_file(path, encode_sparse_weight(sw));
}

inline SparseWeight read_sparse_weight(const std::string& path) {
  return decode_sparse_weight(detail::read_file(path));
}

}  // namespace cwnm
