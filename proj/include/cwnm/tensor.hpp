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

#include <array>
#include <cstring>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cwnm/detail/binary_io.hpp"
#include "cwnm/error.hpp"

namespace cwnm {

/// Physical linearization of a tensor. The numeric values are the on-disk tags.
enum class Layout : std::uint8_t { NHWC = 0, CNHW = 1, RowMajor2D = 2 };

inline const char* to_string(Layout l) {
  switch (l) {
    case Layout::NHWC: return "NHWC";
    case Layout::CNHW: return "CNHW";
    case Layout::RowMajor2D: return "RowMajor2D";
  }
  return "?";
}

inline Layout layout_from_string(const std::string& s) {
  if (s == "NHWC" || s == "nhwc") return Layout::NHWC;
  if (s == "CNHW" || s == "cnhw") return Layout::CNHW;
  if (s == "RowMajor2D" || s == "rowmajor" || s == "2d") return Layout::RowMajor2D;
  throw ConfigError("unknown layout tag '" + s + "'");
}

/// Logical 4-D extents. Always ordered (N, C, H, W) regardless of layout.
struct Dims4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const { return n * c * h * w; }
  friend bool operator==(const Dims4&, const Dims4&) = default;
};

/// Dense f32 tensor. `dims()` holds logical extents: (N, C, H, W) for 4-D
/// tensors and (rows, cols) for RowMajor2D; `layout()` fixes how they map
/// onto `data()`.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> dims, Layout layout)
      : dims_(std::move(dims)), layout_(layout), data_(element_count(dims_), 0.0f) {
    check_rank();
  }

  Tensor(std::vector<std::size_t> dims, Layout layout, std::vector<float> data)
      : dims_(std::move(dims)), layout_(layout), data_(std::move(data)) {
    check_rank();
    if (data_.size() != element_count(dims_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match product of dims " +
                       std::to_string(element_count(dims_)));
  }

  static Tensor make4(Dims4 d, Layout layout) { return Tensor({d.n, d.c, d.h, d.w}, layout); }

  const std::vector<std::size_t>& dims() const { return dims_; }
  Layout layout() const { return layout_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  Dims4 dims4() const {
    if (rank() != 4) throw ShapeError("expected a 4-D tensor, got rank " + std::to_string(rank()));
    return {dims_[0], dims_[1], dims_[2], dims_[3]};
  }

  /// Linear offset of logical element (n, c, h, w).
  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Dims4 d{dims_[0], dims_[1], dims_[2], dims_[3]};
    switch (layout_) {
      case Layout::NHWC: return ((n * d.h + h) * d.w + w) * d.c + c;
      case Layout::CNHW: return ((c * d.n + n) * d.h + h) * d.w + w;
      case Layout::RowMajor2D: break;
    }
    throw ShapeError("4-D indexing on a RowMajor2D tensor");
  }

  float& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  /// Byte-level equality, so -0.0f and +0.0f differ and NaN payloads are compared.
  bool bit_equal(const Tensor& o) const {
    return dims_ == o.dims_ && layout_ == o.layout_ && data_.size() == o.data_.size() &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(float)) == 0;
  }

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  void check_rank() const {
    if (layout_ == Layout::RowMajor2D ? dims_.size() != 2 : dims_.size() != 4)
      throw ShapeError(std::string(to_string(layout_)) + " tensor must have rank " +
                       (layout_ == Layout::RowMajor2D ? "2" : "4"));
  }

  std::vector<std::size_t> dims_;
  Layout layout_ = Layout::RowMajor2D;
  std::vector<float> data_;
};

/// Row-major 2-D f32 matrix. Weight matrices (cout x cin*kh*kw) and im2col
/// data matrices use this type.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
  Matrix(std::size_t r, std::size_t c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != r * c) throw ShapeError("matrix data length does not match rows*cols");
  }

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  Tensor to_tensor() const { return Tensor({rows, cols}, Layout::RowMajor2D, data); }

  static Matrix from_tensor(const Tensor& t) {
    if (t.layout() != Layout::RowMajor2D) throw ShapeError("expected a RowMajor2D tensor");
    return Matrix(t.dims()[0], t.dims()[1], std::vector<float>(t.data().begin(), t.data().end()));
  }
};

/// Reorders a 4-D tensor into `target` by explicit index remapping. Values
/// are copied, never recomputed, so the conversion is exact.
inline Tensor convert_layout(const Tensor& t, Layout target) {
  if (t.rank() != 4) throw ShapeError("convert_layout requires a 4-D tensor");
  if (target != Layout::NHWC && target != Layout::CNHW)
    throw ConfigError("convert_layout target must be NHWC or CNHW");
  if (t.layout() == target) return t;
  const Dims4 d = t.dims4();
  Tensor out = Tensor::make4(d, target);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t h = 0; h < d.h; ++h)
        for (std::size_t w = 0; w < d.w; ++w) out.at(n, c, h, w) = t.at(n, c, h, w);
  return out;
}

// Tensor file: "CWNM" | u32 version=1 | u8 dtype=0 (f32) | u8 layout | u8 ndims |
// u8 reserved=0 | ndims x u32 dims | product(dims) x f32. Little-endian.
inline constexpr std::uint32_t kTensorFileVersion = 1;

inline std::string encode_tensor(const Tensor& t) {
  detail::ByteWriter w;
  w.magic("CWNM");
  w.put<std::uint32_t>(kTensorFileVersion);
  w.put<std::uint8_t>(0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.layout()));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  w.put<std::uint8_t>(0);
  for (std::size_t d : t.dims()) {
    if (d > UINT32_MAX) throw ShapeError("tensor extent exceeds u32");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  }
  w.put_floats(t.data());
  return w.bytes();
}

inline Tensor decode_tensor(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  r.expect_magic("CWNM");
  if (auto v = r.get<std::uint32_t>("version"); v != kTensorFileVersion)
    throw FormatError("unsupported tensor file version " + std::to_string(v));
  if (auto dt = r.get<std::uint8_t>("dtype"); dt != 0)
    throw FormatError("unsupported dtype " + std::to_string(dt) + " (only f32 = 0)");
  const auto tag = r.get<std::uint8_t>("layout");
  if (tag > 2) throw FormatError("unknown layout tag " + std::to_string(tag));
  const auto layout = static_cast<Layout>(tag);
  const auto ndims = r.get<std::uint8_t>("ndims");
  r.get<std::uint8_t>("reserved");
  if ((layout == Layout::RowMajor2D && ndims != 2) || (layout != Layout::RowMajor2D && ndims != 4))
    throw FormatError("ndims " + std::to_string(ndims) + " inconsistent with layout " +
                      to_string(layout));
  std::vector<std::size_t> dims(ndims);
  for (auto& d : dims) d = r.get<std::uint32_t>("dims");
  const std::size_t count = Tensor::element_count(dims);
  if (r.remaining() != count * sizeof(float)) {
    if (r.remaining() < count * sizeof(float))
      throw FormatError("truncated payload: need " + std::to_string(count) + " f32 values");
    throw FormatError("dim/data-length mismatch: trailing bytes after payload");
  }
  std::vector<float> data(count);
  r.get_floats(data, "payload");
  return Tensor(std::move(dims), layout, std::move(data));
}

inline void write_tensor(const Tensor& t, const std::string& path) {
  detail::write_file(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::string& path) { return decode_tensor(detail::read_file(path)); }

}  // namespace cwnm
