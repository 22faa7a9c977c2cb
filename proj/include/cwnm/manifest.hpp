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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cwnm/conv.hpp"
#include "cwnm/tuner.hpp"

// Model manifest: a JSON list of convolution layers.
//
//   { "layers": [ { "weights_file": "w0.cwsw",      // CWSW sparse or CWNM 2-D dense
//                   "bias_file": "b0.cwnm",         // optional, cout values
//                   "kernel": [3, 3],               // optional; square inferred otherwise
//                   "stride": 1, "padding": 1,      // scalar or [h, w]
//                   "relu": false,                  // optional
//                   "kernel_config": {"kind": "columnwise", "t": 8, "lmul": 4} | "auto" } ] }
//
// Relative paths are resolved against the manifest's directory.

namespace cwnm {

struct LayerEntry {
  std::string weights_file;
  std::string bias_file;
  std::optional<std::pair<std::size_t, std::size_t>> kernel;
  ConvParams params;
  std::optional<KernelConfig> config;  // nullopt = "auto"
  std::variant<SparseWeight, Matrix> weights;
  std::vector<float> bias;

  bool is_auto() const { return !config.has_value(); }
  bool sparse() const { return std::holds_alternative<SparseWeight>(weights); }
  std::size_t rows() const {
    return sparse() ? std::get<SparseWeight>(weights).rows : std::get<Matrix>(weights).rows;
  }
  std::size_t cols() const {
    return sparse() ? std::get<SparseWeight>(weights).cols : std::get<Matrix>(weights).cols;
  }
  /// Dense source matrix (decompressed for sparse files).
  Matrix dense() const { return sparse() ? decompress(std::get<SparseWeight>(weights)) : std::get<Matrix>(weights); }
  /// (n, m) the weights were pruned with; unpruned weights report (K, K).
  std::pair<std::size_t, std::size_t> nm() const {
    if (sparse()) {
      const auto& sw = std::get<SparseWeight>(weights);
      return {sw.n, sw.m};
    }
    return {cols(), cols()};
  }
};

namespace detail {

inline std::pair<std::size_t, std::size_t> pair_field(const nlohmann::json& j, const char* name, std::size_t dflt) {
  if (!j.contains(name)) return {dflt, dflt};
  const auto& v = j.at(name);
  if (v.is_number_unsigned() || v.is_number_integer()) {
    const auto x = v.get<long long>();
    if (x < 0) throw FormatError(std::string(name) + " must be non-negative");
    return {static_cast<std::size_t>(x), static_cast<std::size_t>(x)};
  }
  if (v.is_array() && v.size() == 2) return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  throw FormatError(std::string(name) + " must be an integer or a [h, w] pair");
}

inline std::vector<float> load_bias(const std::string& path) {
  const Tensor t = read_tensor(path);
  return {t.data().begin(), t.data().end()};
}

}  // namespace detail

/// Parses the manifest and loads every weight and bias file it references.
inline std::vector<LayerEntry> load_manifest(const std::string& path, unsigned vlen_bits = kDefaultVlenBits) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open manifest '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path + ": " + e.what());
  }
  const auto base = std::filesystem::path(path).parent_path();
  const auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() || base.empty() ? fp : base / fp).string();
  };
  const nlohmann::json& layers = doc.is_array() ? doc : doc.at("layers");
  std::vector<LayerEntry> out;
  try {
    for (const auto& lj : layers) {
      LayerEntry e;
      e.weights_file = resolve(lj.at("weights_file").get<std::string>());
      if (lj.contains("bias_file") && !lj.at("bias_file").is_null())
        e.bias_file = resolve(lj.at("bias_file").get<std::string>());
      if (lj.contains("kernel")) e.kernel = detail::pair_field(lj, "kernel", 1);
      const auto [sh, sw] = detail::pair_field(lj, "stride", 1);
      const auto [ph, pw] = detail::pair_field(lj, "padding", 0);
      e.params = {1, 1, sh, sw, ph, pw, ph, pw, lj.value("relu", false)};
      const auto& kc = lj.at("kernel_config");
      if (kc.is_string()) {
        if (kc.get<std::string>() != "auto") throw FormatError("kernel_config must be an object or \"auto\"");
      } else {
        e.config = config_from_json(kc, vlen_bits);
      }

      const std::string bytes = detail::read_file(e.weights_file);
      if (bytes.compare(0, 4, "CWSW") == 0)
        e.weights = decode_sparse_weight(bytes);
      else
        e.weights = Matrix::from_tensor(decode_tensor(bytes));
      if (!e.bias_file.empty()) {
        e.bias = detail::load_bias(e.bias_file);
        if (e.bias.size() != e.rows()) throw ShapeError("bias file " + e.bias_file + " length != output channels");
      }
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("manifest " + path + ": " + ex.what());
  }
  return out;
}

/// Fills in kernel extents and returns each layer's geometry for the given
/// input dims (N, C, H, W).
inline std::vector<ConvGeometry> resolve_geometry(std::vector<LayerEntry>& layers, Dims4 input) {
  std::vector<ConvGeometry> geoms;
  Dims4 cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& e = layers[i];
    const std::size_t cols = e.cols();
    if (cur.c == 0 || cols % cur.c != 0)
      throw ShapeError("layer " + std::to_string(i) + ": weight columns " + std::to_string(cols) +
                       " are not a multiple of the " + std::to_string(cur.c) + " input channels");
    const std::size_t taps = cols / cur.c;
    if (!e.kernel) {
      const auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(taps))));
      if (k * k != taps)
        throw ShapeError("layer " + std::to_string(i) + ": cannot infer a square kernel from " +
                         std::to_string(taps) + " taps; set \"kernel\"");
      e.kernel = {k, k};
    }
    if (e.kernel->first * e.kernel->second != taps)
      throw ShapeError("layer " + std::to_string(i) + ": kernel extents do not match weight columns");
    e.params.kh = e.kernel->first;
    e.params.kw = e.kernel->second;
    const ConvGeometry g = e.params.geometry(cur);
    geoms.push_back(g);
    cur = {g.n, e.rows(), g.out_h(), g.out_w()};
  }
  return geoms;
}

inline LayerShape layer_shape(const LayerEntry& e, const ConvGeometry& g) {
  const auto [n, m] = e.nm();
  return {g, e.rows(), n, m, KernelKind::ColumnWise};
}

/// Default config for an "auto" layer with no usable cache entry: the pruning
/// tile height (at most 31) with the largest lmul that still fits the
/// register budget.
inline KernelConfig fallback_config(const LayerEntry& e, unsigned vlen_bits = kDefaultVlenBits) {
  const std::size_t t = std::min(kMaxTileRows, e.sparse() ? std::get<SparseWeight>(e.weights).tile_t
                                                          : std::min<std::size_t>(8, e.rows()));
  unsigned lmul = 1;
  for (unsigned l : kTunedLmuls)
    if (fits_register_budget(t, l)) lmul = l;
  return {KernelKind::ColumnWise, t, VectorEnv{vlen_bits, lmul}};
}

/// Builds the layer for `cfg`. With `reprune`, sparse weights used by a
/// column-wise kernel of a different height are re-pruned from their dense
/// form with the same (n, m); otherwise such a mismatch is an error.
inline ConvLayer make_layer(const LayerEntry& e, const KernelConfig& cfg, bool reprune = false) {
  if (e.sparse()) {
    const auto& sw = std::get<SparseWeight>(e.weights);
    if (!reprune || cfg.kind != KernelKind::ColumnWise || cfg.t == sw.tile_t)
      return ConvLayer::from_sparse(e.params, sw, e.bias, cfg);
    const Matrix dense = decompress(sw);
    return ConvLayer(e.params, dense, select_mask_columnwise(dense, sw.n, sw.m, cfg.t), e.bias, cfg);
  }
  return ConvLayer(e.params, std::get<Matrix>(e.weights), e.bias, cfg);
}

struct BuiltModel {
  std::vector<ConvLayer> layers;
  std::vector<ConvGeometry> geometry;
  std::vector<std::string> warnings;
};

/// Resolves configs ("auto" via `cache` when compatible with `env`) and builds the layers.
inline BuiltModel build_model(std::vector<LayerEntry>& entries, Dims4 input, const TuneCache* cache,
                              const EnvFingerprint& env) {
  BuiltModel model;
  model.geometry = resolve_geometry(entries, input);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    KernelConfig cfg;
    if (e.config) {
      cfg = *e.config;
    } else {
      const std::string key = layer_shape(e, model.geometry[i]).key();
      const CacheStatus st = cache ? cache->lookup(key, env) : CacheStatus::Miss;
      if (st == CacheStatus::Hit) {
        cfg = cache->get(key)->winner;
      } else {
        cfg = fallback_config(e, env.vlen_bits);
        model.warnings.push_back("layer " + std::to_string(i) + ": " +
                                 (st == CacheStatus::Stale ? "tune cache entry is from another environment"
                                                           : "no tune cache entry") +
                                 "; using " + cfg.str());
      }
    }
    model.layers.push_back(make_layer(e, cfg, e.is_auto()));
  }
  return model;
}

}  // namespace cwnm
