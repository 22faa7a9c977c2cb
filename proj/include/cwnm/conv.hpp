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
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cwnm/error.hpp"
#include "cwnm/kernels.hpp"
#include "cwnm/packer.hpp"
#include "cwnm/prune.hpp"
#include "cwnm/tensor.hpp"

namespace cwnm {

/// Kernel window, strides and paddings of a convolution; the input extents
/// come from the tensor at run time.
struct ConvParams {
  std::size_t kh = 1, kw = 1;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;
  std::size_t ph_end = 0, pw_end = 0;
  bool relu = false;

  static ConvParams square(std::size_t k, std::size_t stride, std::size_t pad, bool relu = false) {
    return {k, k, stride, stride, pad, pad, pad, pad, relu};
  }

  ConvGeometry geometry(Dims4 in) const {
    ConvGeometry g{in.n, in.c, in.h, in.w, kh, kw, sh, sw, ph, pw, ph_end, pw_end};
    g.validate();
    return g;
  }
};

/// Structural keep mask of a compressed weight.
inline Mask mask_of(const SparseWeight& sw) {
  Mask mask(sw.rows, sw.cols);
  for (std::size_t i = 0; i < sw.tiles(); ++i)
    for (std::uint32_t c : sw.tile(i).cols)
      for (std::size_t r = i * sw.tile_t; r < std::min(sw.rows, (i + 1) * sw.tile_t); ++r) mask.set(r, c, true);
  return mask;
}

/// A convolution layer with its weights in the form the configured kernel consumes.
class ConvLayer {
 public:
  /// `weights` is cout x (cin*kh*kw); entries outside `mask` are treated as
  /// pruned. ColumnWise configs need a mask that is column-wise over tiles of cfg.t.
  ConvLayer(ConvParams params, const Matrix& weights, const Mask& mask, std::vector<float> bias, KernelConfig cfg)
      : params_(params), masked_(apply_mask(weights, mask)), bias_(std::move(bias)), cfg_(cfg) {
    cfg_.validate();
    if (params_.kh == 0 || params_.kw == 0 || masked_.cols % (params_.kh * params_.kw) != 0)
      throw ShapeError("weight columns must be a multiple of kh*kw");
    if (!bias_.empty() && bias_.size() != masked_.rows)
      throw ShapeError("bias length must equal output channels");
    switch (cfg_.kind) {
      case KernelKind::ColumnWise: blocks_ = compress(masked_, mask, cfg_.t); break;
      case KernelKind::Dense: blocks_ = compress(masked_, Mask(masked_.rows, masked_.cols, true), cfg_.t); break;
      case KernelKind::InnerProductNM: rows_ = compress_rows(masked_, mask); break;
      case KernelKind::OuterProductNM: scattered_ = scatter_tiles(masked_, mask, cfg_.t); break;
    }
  }

  /// Unpruned dense layer.
  ConvLayer(ConvParams params, const Matrix& weights, std::vector<float> bias, KernelConfig cfg)
      : ConvLayer(params, weights, Mask(weights.rows, weights.cols, true), std::move(bias), cfg) {}

  /// From a compressed weight. A ColumnWise config must use t == sw.tile_t.
  static ConvLayer from_sparse(ConvParams params, const SparseWeight& sw, std::vector<float> bias, KernelConfig cfg) {
    if (cfg.kind == KernelKind::ColumnWise && cfg.t != sw.tile_t)
      throw ConfigError("column-wise kernel t=" + std::to_string(cfg.t) + " must equal the pruning tile " +
                        std::to_string(sw.tile_t));
    return ConvLayer(params, decompress(sw), mask_of(sw), std::move(bias), cfg);
  }

  const ConvParams& params() const { return params_; }
  const KernelConfig& config() const { return cfg_; }
  const Matrix& masked_weights() const { return masked_; }
  std::span<const float> bias() const { return bias_; }
  std::size_t out_channels() const { return masked_.rows; }
  std::size_t in_channels() const { return masked_.cols / (params_.kh * params_.kw); }
  std::size_t row_tiles() const { return (masked_.rows + cfg_.t - 1) / cfg_.t; }

  /// Kept columns summed over row-tiles (meaningful for ColumnWise / Dense).
  std::size_t kept_columns_total() const { return blocks_.kept_total(); }

  /// Runs the configured micro-kernel for one (row tile, strip) pair.
  TrafficCounters run_tile(std::size_t tile, std::span<const float> strip, std::span<float> acc) const {
    switch (cfg_.kind) {
      case KernelKind::ColumnWise: return microkernel_columnwise(blocks_.tile(tile), strip, cfg_, acc);
      case KernelKind::Dense: return microkernel_dense(blocks_.tile(tile), strip, cfg_, acc);
      case KernelKind::InnerProductNM: return microkernel_inner_nm(rows_, tile * cfg_.t, strip, cfg_, acc);
      case KernelKind::OuterProductNM: return microkernel_outer_nm(scattered_[tile], strip, cfg_, acc);
    }
    return {};
  }

 private:
  ConvParams params_;
  Matrix masked_;
  std::vector<float> bias_;
  KernelConfig cfg_;
  SparseWeight blocks_;
  RowSparseWeight rows_;
  std::vector<ScatteredTile> scattered_;
};

struct ConvOptions {
  /// Worker count; 0 means std::thread::hardware_concurrency().
  std::size_t threads = 1;
  FusedPackOptions packing{};
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Sparse GEMM of the layer's weights against a packed data matrix, writing
/// the cout x pm.logical_cols result (plus bias / ReLU) to `dst`. Work items
/// are (row tile, strip) pairs split into contiguous static ranges, one per
/// worker; each output element is written by exactly one worker.
inline void run_gemm(const ConvLayer& layer, const PackedMatrix& pm, std::span<float> dst, std::size_t threads = 1,
                     TrafficCounters* counters = nullptr) {
  const KernelConfig& cfg = layer.config();
  const std::size_t vl = cfg.vl(), t = cfg.t;
  if (pm.vl != vl) throw ShapeError("packed strip width does not match the kernel vl");
  if (pm.rows != layer.masked_weights().cols) throw ShapeError("packed rows do not match the weight K");
  const std::size_t cout = layer.out_channels(), cols = pm.logical_cols;
  if (dst.size() != cout * cols) throw ShapeError("output buffer must be cout x cols");
  const auto bias = layer.bias();
  const bool relu = layer.params().relu;

  const std::size_t strips = pm.strips(), tiles = layer.row_tiles();
  const std::size_t items = strips * tiles;
  const std::size_t workers = std::clamp<std::size_t>(resolve_threads(threads), 1, std::max<std::size_t>(1, items));
  std::vector<TrafficCounters> per_worker(workers);

  const auto work = [&](std::size_t wid) {
    const std::size_t begin = items * wid / workers, end = items * (wid + 1) / workers;
    std::vector<float> acc(t * vl);
    TrafficCounters tc;
    for (std::size_t item = begin; item < end; ++item) {
      const std::size_t tile = item / strips, s = item % strips;
      tc += layer.run_tile(tile, pm.strip(s), acc);
      const std::size_t r0 = tile * t, c0 = s * vl, width = pm.strip_width(s);
      for (std::size_t r = 0; r < t && r0 + r < cout; ++r) {
        const float b = bias.empty() ? 0.0f : bias[r0 + r];
        const float* src = acc.data() + r * vl;
        float* o = dst.data() + (r0 + r) * cols + c0;
        for (std::size_t l = 0; l < width; ++l) {
          const float v = src[l] + b;
          o[l] = relu ? std::max(v, 0.0f) : v;
        }
      }
    }
    per_worker[wid] = tc;
  };

  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
    work(0);
  }
  if (counters)
    for (const auto& tc : per_worker) *counters += tc;
}

/// Sparse GEMM convolution over a CNHW input: fused im2col + packing, then
/// run_gemm. Returns (n, cout, out_h, out_w) in CNHW.
inline Tensor conv_forward(const ConvLayer& layer, const Tensor& input, const ConvOptions& opts = {},
                           TrafficCounters* counters = nullptr) {
  if (input.rank() != 4 || input.layout() != Layout::CNHW) throw ShapeError("conv_forward input must be 4-D CNHW");
  const Dims4 in = input.dims4();
  if (in.c != layer.in_channels())
    throw ShapeError("input has " + std::to_string(in.c) + " channels, layer expects " +
                     std::to_string(layer.in_channels()));
  const ConvGeometry g = layer.params().geometry(in);
  const PackedMatrix pm = fused_im2col_pack(input, g, layer.config().vl(), opts.packing);
  // CNHW output is exactly the cout x (n*out_h*out_w) GEMM result.
  Tensor out = Tensor::make4({g.n, layer.out_channels(), g.out_h(), g.out_w()}, Layout::CNHW);
  run_gemm(layer, pm, out.data(), opts.threads, counters);
  return out;
}

/// Runs a chain of layers on an NHWC input: one conversion to CNHW at entry,
/// one back to NHWC at exit.
inline Tensor run_model(std::span<const ConvLayer> layers, const Tensor& input_nhwc, const ConvOptions& opts = {},
                        TrafficCounters* counters = nullptr) {
  if (input_nhwc.rank() != 4 || input_nhwc.layout() != Layout::NHWC) throw ShapeError("run_model input must be NHWC");
  Tensor x = convert_layout(input_nhwc, Layout::CNHW);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (x.dims4().c != layers[i].in_channels())
      throw ShapeError("layer " + std::to_string(i) + " expects " + std::to_string(layers[i].in_channels()) +
                       " input channels, got " + std::to_string(x.dims4().c));
    x = conv_forward(layers[i], x, opts, counters);
  }
  return convert_layout(x, Layout::NHWC);
}

}  // namespace cwnm
