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
#include <span>
#include <string>
#include <vector>

#include "cwnm/error.hpp"
#include "cwnm/tensor.hpp"
#include "cwnm/vector.hpp"

namespace cwnm {

/// Convolution input geometry. Padding may differ per side; the `_end`
/// paddings default to the leading ones.
struct ConvGeometry {
  std::size_t n = 1, cin = 1, in_h = 1, in_w = 1;
  std::size_t kh = 1, kw = 1;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;
  std::size_t ph_end = 0, pw_end = 0;

  static ConvGeometry make(Dims4 input, std::size_t kh, std::size_t kw, std::size_t stride_h,
                           std::size_t stride_w, std::size_t pad_h, std::size_t pad_w) {
    ConvGeometry g{input.n, input.c, input.h, input.w, kh, kw, stride_h, stride_w, pad_h, pad_w, pad_h, pad_w};
    g.validate();
    return g;
  }

  std::size_t out_h() const { return (in_h + ph + ph_end - kh) / sh + 1; }
  std::size_t out_w() const { return (in_w + pw + pw_end - kw) / sw + 1; }
  /// Rows of the data matrix (the GEMM reduction length).
  std::size_t k() const { return cin * kh * kw; }
  /// Columns of the data matrix.
  std::size_t cols() const { return n * out_h() * out_w(); }
  Dims4 input_dims() const { return {n, cin, in_h, in_w}; }

  void validate() const {
    if (n == 0 || cin == 0 || in_h == 0 || in_w == 0) throw ShapeError("geometry has an empty input extent");
    if (kh == 0 || kw == 0 || sh == 0 || sw == 0) throw ShapeError("kernel and stride extents must be >= 1");
    if (in_h + ph + ph_end < kh || in_w + pw + pw_end < kw)
      throw ShapeError("kernel larger than padded input; output would be empty");
  }

  void check_input(const Tensor& src) const {
    validate();
    if (src.layout() != Layout::CNHW) throw ShapeError("convolution input must be CNHW");
    if (src.dims4() != input_dims())
      throw ShapeError("input dims do not match convolution geometry");
  }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// The data matrix cut into strips of `vl` consecutive columns. Strip s
/// holds columns [s*vl, s*vl + vl) row-major over (row, lane); lanes past
/// `logical_cols` are zero.
struct PackedMatrix {
  std::size_t rows = 0;
  std::size_t logical_cols = 0;
  std::size_t vl = 1;
  std::vector<float> data;

  PackedMatrix() = default;
  PackedMatrix(std::size_t r, std::size_t c, std::size_t v) : rows(r), logical_cols(c), vl(v) {
    if (v == 0) throw ConfigError("vl must be >= 1");
    data.assign(strips() * rows * vl, 0.0f);
  }

  std::size_t strips() const { return (logical_cols + vl - 1) / vl; }
  std::size_t offset(std::size_t r, std::size_t c) const { return (c / vl) * rows * vl + r * vl + c % vl; }
  float at(std::size_t r, std::size_t c) const { return data[offset(r, c)]; }

  std::span<const float> strip(std::size_t s) const {
    return std::span<const float>(data).subspan(s * rows * vl, rows * vl);
  }
  /// Live lanes in strip s.
  std::size_t strip_width(std::size_t s) const { return std::min(vl, logical_cols - s * vl); }

  bool bit_equal(const PackedMatrix& o) const {
    return rows == o.rows && logical_cols == o.logical_cols && vl == o.vl && data.size() == o.data.size() &&
           std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0;
  }
};

/// One vector transfer issued by the fused packer: `len` source elements of
/// data-matrix row `row`, output line `line` (= n * out_h + oh), starting at
/// output column `ox`.
struct PackRun {
  std::uint32_t row, line, ox, len;
};

/// Instrumentation for the packing routines.
struct PackStats {
  std::uint64_t source_reads = 0;
  std::uint64_t zero_writes = 0;
  bool record_runs = false;
  std::vector<PackRun> runs;
};

/// Patch matrix: row (c, i, j) with j fastest, column (n, oh, ow) with ow
/// fastest. Taps that fall into the padding read as 0.
inline Matrix im2col(const Tensor& src, const ConvGeometry& g, PackStats* stats = nullptr) {
  g.check_input(src);
  const std::size_t oh = g.out_h(), ow = g.out_w();
  Matrix out(g.k(), g.cols());
  const auto in = src.data();
  std::uint64_t reads = 0;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        float* dst = out.data.data() + ((c * g.kh + i) * g.kw + j) * out.cols;
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t y = 0; y < oh; ++y) {
            const auto ih = static_cast<std::ptrdiff_t>(y * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
            for (std::size_t x = 0; x < ow; ++x, ++dst) {
              const auto iw = static_cast<std::ptrdiff_t>(x * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
              if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h) ||
                  iw >= static_cast<std::ptrdiff_t>(g.in_w)) {
                *dst = 0.0f;
                continue;
              }
              *dst = in[((c * g.n + n) * g.in_h + static_cast<std::size_t>(ih)) * g.in_w +
                        static_cast<std::size_t>(iw)];
              ++reads;
            }
          }
      }
  if (stats) stats->source_reads += reads;
  return out;
}

inline PackedMatrix pack(const Matrix& m, std::size_t vl, PackStats* stats = nullptr) {
  if (vl == 0) throw ConfigError("vl must be >= 1");
  PackedMatrix pm(m.rows, m.cols, vl);
  for (std::size_t s = 0; s < pm.strips(); ++s) {
    const std::size_t c0 = s * vl, w = pm.strip_width(s);
    float* dst = pm.data.data() + s * pm.rows * vl;
    for (std::size_t r = 0; r < m.rows; ++r, dst += vl) vrt::copy(dst, m.data.data() + r * m.cols + c0, w);
  }
  if (stats) stats->source_reads += m.rows * m.cols;
  return pm;
}

inline Matrix unpack(const PackedMatrix& pm) {
  Matrix m(pm.rows, pm.logical_cols);
  for (std::size_t r = 0; r < pm.rows; ++r)
    for (std::size_t c = 0; c < pm.logical_cols; ++c) m(r, c) = pm.at(r, c);
  return m;
}

/// Copy-chunk length whose vector length is closest to `in_w` among
/// (vlen_bits/32) * {1, 2, 4, 8}; ties pick the shorter chunk.
inline std::size_t auto_copy_chunk(std::size_t in_w, unsigned vlen_bits = kDefaultVlenBits) {
  const std::size_t base = vlen_bits / 32;
  std::size_t best = base;
  for (std::size_t lmul : {1u, 2u, 4u, 8u}) {
    const std::size_t cand = base * lmul;
    const auto dist = [&](std::size_t v) { return v > in_w ? v - in_w : in_w - v; };
    if (dist(cand) < dist(best)) best = cand;
  }
  return best;
}

struct FusedPackOptions {
  enum class Chunk { StripVl, Auto, Fixed };
  Chunk chunk = Chunk::StripVl;
  std::size_t fixed_chunk = 0;
  unsigned vlen_bits = kDefaultVlenBits;

  std::size_t resolve(std::size_t strip_vl, std::size_t in_w) const {
    switch (chunk) {
      case Chunk::StripVl: return strip_vl;
      case Chunk::Auto: return auto_copy_chunk(in_w, vlen_bits);
      case Chunk::Fixed:
        if (fixed_chunk == 0) throw ConfigError("fixed copy chunk must be >= 1");
        return fixed_chunk;
    }
    return strip_vl;
  }
};

/// im2col and strip packing in one pass over the CNHW input. For each
/// (row, output line) the in-bounds source span is moved with vector
/// transfers of at most `chunk` elements, the last one shortened to the
/// remainder; padding taps are written as zeros without touching the source.
/// Result is bit-identical to pack(im2col(src, g), vl).
inline PackedMatrix fused_im2col_pack(const Tensor& src, const ConvGeometry& g, std::size_t vl,
                                      const FusedPackOptions& opts = {}, PackStats* stats = nullptr) {
  g.check_input(src);
  if (vl == 0) throw ConfigError("vl must be >= 1");
  const std::size_t chunk = opts.resolve(vl, g.in_w);
  const std::size_t oh = g.out_h(), ow = g.out_w(), rows = g.k();
  PackedMatrix pm(rows, g.cols(), vl);
  const float* in = src.data().data();
  float* out = pm.data.data();
  std::uint64_t reads = 0, zeros = 0;

  // Both writers cover `len` data-matrix columns of row `r` starting at `col`,
  // split at strip boundaries.
  const auto zero_cols = [&](std::size_t r, std::size_t col, std::size_t len) {
    while (len > 0) {
      const std::size_t lane = col % vl, seg = std::min(len, vl - lane);
      vrt::fill_zero(out + (col / vl) * rows * vl + r * vl + lane, seg);
      zeros += seg;
      col += seg;
      len -= seg;
    }
  };
  const auto copy_cols = [&](std::size_t r, std::size_t col, const float* s, std::size_t stride, std::size_t len) {
    while (len > 0) {
      const std::size_t lane = col % vl, seg = std::min(len, vl - lane);
      float* d = out + (col / vl) * rows * vl + r * vl + lane;
      if (stride == 1)
        vrt::copy(d, s, seg);
      else
        vrt::copy_strided(d, s, static_cast<std::ptrdiff_t>(stride), seg);
      s += seg * stride;
      col += seg;
      len -= seg;
    }
  };

  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const std::size_t r = (c * g.kh + i) * g.kw + j;
        // In-bounds output columns for this horizontal tap: ox*sw + j - pw in [0, in_w).
        const std::size_t ox_lo = j >= g.pw ? 0 : (g.pw - j + g.sw - 1) / g.sw;
        const std::size_t ox_hi =
            g.in_w + g.pw <= j ? 0 : std::min(ow, (g.in_w - 1 + g.pw - j) / g.sw + 1);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t y = 0; y < oh; ++y) {
            const std::size_t line = n * oh + y;
            const std::size_t col0 = line * ow;
            const std::size_t ih_p = y * g.sh + i;
            if (ih_p < g.ph || ih_p - g.ph >= g.in_h || ox_lo >= ox_hi) {
              zero_cols(r, col0, ow);
              continue;
            }
            const std::size_t ih = ih_p - g.ph;
            zero_cols(r, col0, ox_lo);
            const float* s = in + ((c * g.n + n) * g.in_h + ih) * g.in_w + (ox_lo * g.sw + j - g.pw);
            std::size_t ox = ox_lo;
            for (std::size_t remaining = ox_hi - ox_lo; remaining > 0;) {
              const std::size_t run = setvl(remaining, chunk);
              copy_cols(r, col0 + ox, s, g.sw, run);
              if (stats && stats->record_runs)
                stats->runs.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(line),
                                       static_cast<std::uint32_t>(ox), static_cast<std::uint32_t>(run)});
              reads += run;
              s += run * g.sw;
              ox += run;
              remaining -= run;
            }
            zero_cols(r, col0 + ox_hi, ow - ox_hi);
          }
      }
  if (stats) {
    stats->source_reads += reads;
    stats->zero_writes += zeros;
  }
  return pm;
}

/// Two-step baseline: explicit patch matrix, then strip packing.
inline PackedMatrix two_step_im2col_pack(const Tensor& src, const ConvGeometry& g, std::size_t vl,
                                         PackStats* stats = nullptr) {
  return pack(im2col(src, g, stats), vl, stats);
}

}  // namespace cwnm
