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
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "cwnm/packer.hpp"
#include "cwnm/tensor.hpp"

// Ground-truth routines: direct convolution and plain matrix products,
// evaluated in double with no packing or tiling.

namespace cwnm {

/// Direct convolution result together with, per output element, the sum of
/// |w * x| over its taps plus |bias| (the magnitude scale used for error checks).
struct ReferenceOutput {
  Tensor value;
  std::vector<double> exact;
  std::vector<double> magnitude;
};

/// `weights` is cout x (cin*kh*kw) with rows ordered (c, i, j), j fastest.
/// Input may be NHWC or CNHW; the output uses the same layout.
inline ReferenceOutput conv_reference_detailed(const ConvGeometry& g, const Matrix& weights, const Tensor& input,
                                               std::span<const float> bias = {}, bool relu = false) {
  g.validate();
  if (input.rank() != 4 || input.layout() == Layout::RowMajor2D) throw ShapeError("reference input must be 4-D");
  if (input.dims4() != g.input_dims()) throw ShapeError("input dims do not match geometry");
  if (weights.cols != g.k()) throw ShapeError("weight columns must equal cin*kh*kw");
  if (!bias.empty() && bias.size() != weights.rows) throw ShapeError("bias length must equal output channels");
  const std::size_t cout = weights.rows, oh = g.out_h(), ow = g.out_w();
  ReferenceOutput ref{Tensor::make4({g.n, cout, oh, ow}, input.layout()), {}, {}};
  ref.exact.resize(ref.value.size());
  ref.magnitude.resize(ref.value.size());
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double sum = bias.empty() ? 0.0 : bias[co];
          double mag = std::fabs(sum);
          for (std::size_t c = 0; c < g.cin; ++c)
            for (std::size_t i = 0; i < g.kh; ++i)
              for (std::size_t j = 0; j < g.kw; ++j) {
                const long ih = static_cast<long>(y * g.sh + i) - static_cast<long>(g.ph);
                const long iw = static_cast<long>(x * g.sw + j) - static_cast<long>(g.pw);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.in_h) || iw >= static_cast<long>(g.in_w)) continue;
                const double p = static_cast<double>(weights(co, (c * g.kh + i) * g.kw + j)) *
                                 input.at(n, c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
                sum += p;
                mag += std::fabs(p);
              }
          if (relu) sum = std::max(sum, 0.0);
          const std::size_t off = ref.value.offset(n, co, y, x);
          ref.exact[off] = sum;
          ref.magnitude[off] = mag;
          ref.value.data()[off] = static_cast<float>(sum);
        }
  return ref;
}

inline Tensor conv_forward_reference(const ConvGeometry& g, const Matrix& weights, const Tensor& input,
                                     std::span<const float> bias = {}, bool relu = false) {
  return conv_reference_detailed(g, weights, input, bias, relu).value;
}

/// Largest per-element |actual - exact| / (sum of |w*x| + |bias|). Elements
/// with a zero scale must match exactly (else +inf).
inline double max_relative_error(const Tensor& actual, const ReferenceOutput& ref) {
  if (actual.dims() != ref.value.dims()) throw ShapeError("output dims differ from reference");
  const Tensor a = actual.layout() == ref.value.layout() ? actual : convert_layout(actual, ref.value.layout());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::fabs(static_cast<double>(a.data()[i]) - ref.exact[i]);
    if (ref.magnitude[i] == 0.0) {
      if (diff != 0.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, diff / ref.magnitude[i]);
  }
  return worst;
}

/// Plain triple-loop product a (m x k) * b (k x n) in double, rounded to f32.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("matmul inner dimensions differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<float>(s);
    }
  return c;
}

}  // namespace cwnm
