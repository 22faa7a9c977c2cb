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

#include <chrono>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cwnm/conv.hpp"
#include "cwnm/packer.hpp"
#include "cwnm/random.hpp"
#include "cwnm/tuner.hpp"

// Benchmark suites behind `cwnm bench`. Every suite returns a versioned JSON
// report whose rows carry a median wall-clock time and the element counters.

namespace cwnm::bench {

inline constexpr int kReportVersion = 1;

/// A convolution layer shape used by the suites.
struct ShapeCase {
  std::string name;
  std::size_t n = 1, cin = 1, cout = 1, h = 1, w = 1, k = 1, stride = 1, pad = 0;

  ConvGeometry geometry() const { return ConvGeometry::make({n, cin, h, w}, k, k, stride, stride, pad, pad); }
};

inline std::vector<ShapeCase> parse_shapes(const nlohmann::json& doc) {
  std::vector<ShapeCase> out;
  for (const auto& j : doc.at("shapes")) {
    ShapeCase s;
    s.name = j.at("name").get<std::string>();
    s.n = j.value("n", std::size_t{1});
    s.cin = j.at("cin").get<std::size_t>();
    s.cout = j.at("cout").get<std::size_t>();
    s.h = j.at("h").get<std::size_t>();
    s.w = j.at("w").get<std::size_t>();
    s.k = j.at("k").get<std::size_t>();
    s.stride = j.value("stride", std::size_t{1});
    s.pad = j.value("pad", std::size_t{0});
    out.push_back(s);
  }
  return out;
}

inline std::vector<ShapeCase> load_shapes(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open shapes file '" + path + "'");
  try {
    return parse_shapes(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("shapes file " + path + ": " + e.what());
  }
}

/// Desk-scaled ResNet-50 bottleneck layers: channel counts of stages 1-4
/// with spatial extents cut to at most 16.
inline std::vector<ShapeCase> default_stage_shapes() {
  return {
      {"stage1-conv1", 1, 64, 64, 16, 16, 1, 1, 0},     {"stage1-conv2", 1, 64, 64, 16, 16, 3, 1, 1},
      {"stage1-conv3", 1, 64, 256, 16, 16, 1, 1, 0},    {"stage2-conv1", 1, 256, 128, 12, 12, 1, 1, 0},
      {"stage2-conv2", 1, 128, 128, 12, 12, 3, 1, 1},   {"stage2-conv3", 1, 128, 512, 12, 12, 1, 1, 0},
      {"stage3-conv1", 1, 512, 256, 8, 8, 1, 1, 0},     {"stage3-conv2", 1, 256, 256, 8, 8, 3, 1, 1},
      {"stage3-conv3", 1, 256, 1024, 8, 8, 1, 1, 0},    {"stage4-conv1", 1, 1024, 512, 4, 4, 1, 1, 0},
      {"stage4-conv2", 1, 512, 512, 4, 4, 3, 1, 1},     {"stage4-conv3", 1, 512, 2048, 4, 4, 1, 1, 0},
  };
}

struct BenchOptions {
  std::size_t repeats = 9;
  std::size_t warmups = 3;
  std::size_t tune_repeats = 9;
  std::size_t tune_warmups = 3;
  double sparsity = 0.5;
  std::size_t m = 8;
  std::size_t threads = 1;
  std::uint64_t seed = kDefaultSeed;
  unsigned vlen_bits = kDefaultVlenBits;
  /// Baseline kernels run at this (t, lmul).
  std::size_t baseline_t = 8;
  unsigned baseline_lmul = 4;
};

inline double time_median_ns(const std::function<void()>& fn, std::size_t repeats, std::size_t warmups) {
  for (std::size_t i = 0; i < warmups; ++i) fn();
  std::vector<double> samples;
  samples.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  return median_of(std::move(samples));
}

/// Alternates runs of `a` and `b` so both medians see the same machine state.
inline std::pair<double, double> time_interleaved_ns(const std::function<void()>& a, const std::function<void()>& b,
                                                     std::size_t repeats, std::size_t warmups) {
  for (std::size_t i = 0; i < warmups; ++i) {
    a();
    b();
  }
  std::vector<double> sa, sb;
  for (std::size_t i = 0; i < repeats; ++i) {
    for (int which = 0; which < 2; ++which) {
      const bool first = (i + which) % 2 == 0;
      const auto t0 = std::chrono::steady_clock::now();
      first ? a() : b();
      const auto t1 = std::chrono::steady_clock::now();
      (first ? sa : sb).push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
  }
  return {median_of(std::move(sa)), median_of(std::move(sb))};
}

inline nlohmann::json counters_json(const TrafficCounters& tc) {
  return {{"data_elem_loads", tc.data_elem_loads},
          {"weight_elem_loads", tc.weight_elem_loads},
          {"output_elem_loads", tc.output_elem_loads},
          {"output_elem_stores", tc.output_elem_stores},
          {"macs", tc.macs}};
}

inline nlohmann::json report_header(const std::string& suite, const BenchOptions& o) {
  const auto fp = current_fingerprint(o.vlen_bits, o.threads);
  return {{"report_version", kReportVersion},
          {"suite", suite},
          {"env", {{"vlen_bits", fp.vlen_bits}, {"host", fp.host}, {"threads", o.threads}}},
          {"params",
           {{"repeats", o.repeats}, {"warmups", o.warmups}, {"sparsity", o.sparsity}, {"m", o.m}, {"seed", o.seed}}},
          {"rows", nlohmann::json::array()}};
}

/// Mask a benchmark kernel of `cfg` runs with for `(n, m)` pruning.
inline Mask bench_mask(const Matrix& w, std::size_t n, std::size_t m, const KernelConfig& cfg) {
  LayerShape shape;
  shape.n = n;
  shape.m = m;
  return candidate_mask(w, shape, cfg);
}

/// Per-layer measurements for one stage shape.
struct StageResult {
  std::string name;
  KernelConfig tuned;
  double tuned_ns = 0.0;
  double inner_ns = 0.0;
  TrafficCounters tuned_counters, inner_counters, dense_counters;
};

/// Tunes the column-wise kernel for `s`, then times the winner against the
/// inner-product N:M baseline with interleaved runs.
inline StageResult measure_stage(const ShapeCase& s, const BenchOptions& o, nlohmann::json* rows = nullptr) {
  TensorRng rng(o.seed);
  const ConvGeometry g = s.geometry();
  const Matrix w = rng.matrix(s.cout, g.k());
  const Tensor x = rng.tensor(g.input_dims(), Layout::CNHW);
  const std::size_t n = PruneSpec::kept_for_ratio(o.sparsity, o.m);
  const ConvOptions run{o.threads, {}};
  const ConvParams params{g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.ph_end, g.pw_end, false};

  TuneOptions topts;
  topts.repeats = o.tune_repeats;
  topts.warmups = o.tune_warmups;
  topts.vlen_bits = o.vlen_bits;
  const LayerShape shape{g, s.cout, n, o.m, KernelKind::ColumnWise};
  const TuneReport rep = tune_layer(shape, w, {}, x, topts);

  const std::size_t bt = std::min(o.baseline_t, s.cout);
  const KernelConfig inner_cfg{KernelKind::InnerProductNM, bt, VectorEnv{o.vlen_bits, o.baseline_lmul}};
  const ConvLayer tuned(params, w, bench_mask(w, n, o.m, rep.winner), {}, rep.winner);
  const ConvLayer inner(params, w, bench_mask(w, n, o.m, inner_cfg), {}, inner_cfg);

  StageResult r;
  r.name = s.name;
  r.tuned = rep.winner;
  conv_forward(tuned, x, run, &r.tuned_counters);
  conv_forward(inner, x, run, &r.inner_counters);
  std::tie(r.tuned_ns, r.inner_ns) = time_interleaved_ns([&] { conv_forward(tuned, x, run); },
                                                         [&] { conv_forward(inner, x, run); }, o.repeats, o.warmups);

  const KernelConfig dense_cfg{KernelKind::Dense, bt, VectorEnv{o.vlen_bits, o.baseline_lmul}};
  const ConvLayer dense(params, w, {}, dense_cfg);
  conv_forward(dense, x, run, &r.dense_counters);

  if (rows) {
    const Tensor nhwc = rng.tensor(g.input_dims(), Layout::NHWC);
    rows->push_back({{"case", s.name},
                     {"config", "layout_nhwc_to_cnhw"},
                     {"median_ns", time_median_ns([&] { (void)convert_layout(nhwc, Layout::CNHW); }, o.repeats,
                                                  o.warmups)}});
    const auto row = [&](const KernelConfig& cfg, double ns, const TrafficCounters& tc, bool is_tuned) {
      rows->push_back({{"case", s.name},
                       {"config", config_to_json(cfg)},
                       {"tuned", is_tuned},
                       {"median_ns", ns},
                       {"traffic", counters_json(tc)}});
    };
    row(dense_cfg, time_median_ns([&] { conv_forward(dense, x, run); }, o.repeats, o.warmups), r.dense_counters,
        false);
    row(inner_cfg, r.inner_ns, r.inner_counters, false);
    const KernelConfig outer_cfg{KernelKind::OuterProductNM, bt, VectorEnv{o.vlen_bits, o.baseline_lmul}};
    const ConvLayer outer(params, w, bench_mask(w, n, o.m, outer_cfg), {}, outer_cfg);
    TrafficCounters otc;
    conv_forward(outer, x, run, &otc);
    row(outer_cfg, time_median_ns([&] { conv_forward(outer, x, run); }, o.repeats, o.warmups), otc, false);
    row(rep.winner, r.tuned_ns, r.tuned_counters, true);
  }
  return r;
}

inline nlohmann::json stage_shapes_suite(const std::vector<ShapeCase>& shapes, const BenchOptions& o) {
  auto report = report_header("stage-shapes", o);
  for (const auto& s : shapes) measure_stage(s, o, &report["rows"]);
  return report;
}

/// Geometries for the packing suite: the 3x3 stage shapes, a ResNet stem
/// (7x7, stride 2, pad 3) and a 56-wide map.
inline std::vector<ShapeCase> default_packing_shapes() {
  std::vector<ShapeCase> out;
  for (const auto& s : default_stage_shapes())
    if (s.k == 3) out.push_back(s);
  out.push_back({"stem-7x7-s2", 1, 3, 64, 16, 16, 7, 2, 3});
  out.push_back({"wide-56", 1, 8, 8, 4, 56, 1, 1, 0});
  out.push_back({"wide-56-3x3", 1, 8, 8, 4, 56, 3, 1, 1});
  return out;
}

struct PackingComparison {
  std::string name;
  std::size_t vl = 0;
  std::uint64_t two_step_reads = 0, fused_reads = 0;
  double two_step_ns = 0.0, fused_ns = 0.0;
  bool identical = false;
};

inline PackingComparison compare_packing(const ShapeCase& s, std::size_t vl, const BenchOptions& o,
                                         const FusedPackOptions& fopts = {}) {
  TensorRng rng(o.seed);
  const ConvGeometry g = s.geometry();
  const Tensor x = rng.tensor(g.input_dims(), Layout::CNHW);
  PackingComparison c{s.name, vl};
  PackStats two, fused;
  const PackedMatrix a = two_step_im2col_pack(x, g, vl, &two);
  const PackedMatrix b = fused_im2col_pack(x, g, vl, fopts, &fused);
  c.two_step_reads = two.source_reads;
  c.fused_reads = fused.source_reads;
  c.identical = a.bit_equal(b);
  std::tie(c.two_step_ns, c.fused_ns) = time_interleaved_ns([&] { (void)two_step_im2col_pack(x, g, vl); },
                                                            [&] { (void)fused_im2col_pack(x, g, vl, fopts); },
                                                            o.repeats, o.warmups);
  return c;
}

inline nlohmann::json packing_suite(const std::vector<ShapeCase>& shapes, const BenchOptions& o) {
  auto report = report_header("packing", o);
  for (const auto& s : shapes)
    for (unsigned lmul : kTunedLmuls) {
      const std::size_t vl = VectorEnv{o.vlen_bits, lmul}.vl_f32();
      for (const bool auto_chunk : {false, true}) {
        FusedPackOptions fo;
        fo.vlen_bits = o.vlen_bits;
        if (auto_chunk) fo.chunk = FusedPackOptions::Chunk::Auto;
        const auto c = compare_packing(s, vl, o, fo);
        report["rows"].push_back({{"case", s.name},
                                  {"vl", vl},
                                  {"lmul", lmul},
                                  {"copy_chunk", fo.resolve(vl, s.w)},
                                  {"two_step_ns", c.two_step_ns},
                                  {"fused_ns", c.fused_ns},
                                  {"two_step_source_reads", c.two_step_reads},
                                  {"fused_source_reads", c.fused_reads},
                                  {"bit_identical", c.identical}});
      }
    }
  return report;
}

/// GEMM-only cases for the kernels suite, expressed as 1x1 convolutions
/// (K = cin, rows = cout, cols = n*h*w).
inline std::vector<ShapeCase> default_kernel_cases() {
  return {{"gemm-k256-r64-c256", 1, 256, 64, 16, 16, 1, 1, 0}, {"gemm-k576-r32-c196", 1, 576, 32, 14, 14, 1, 1, 0}};
}

/// Every kernel kind at every legal (t, lmul) on every case, timing the GEMM only.
inline nlohmann::json kernels_suite(const std::vector<ShapeCase>& cases, const BenchOptions& o) {
  auto report = report_header("kernels", o);
  const std::size_t n = PruneSpec::kept_for_ratio(o.sparsity, o.m);
  for (const auto& s : cases) {
    TensorRng rng(o.seed);
    const ConvGeometry g = s.geometry();
    const Matrix w = rng.matrix(s.cout, g.k());
    const Tensor x = rng.tensor(g.input_dims(), Layout::CNHW);
    const ConvParams params{g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.ph_end, g.pw_end, false};
    std::vector<float> out(s.cout * g.cols());
    for (KernelKind kind : kAllKernelKinds)
      for (const KernelConfig& cfg : enumerate_candidates(s.cout, VectorEnv{o.vlen_bits, 1}, kind)) {
        const PackedMatrix pm = fused_im2col_pack(x, g, cfg.vl());
        const ConvLayer layer(params, w, bench_mask(w, n, o.m, cfg), {}, cfg);
        TrafficCounters tc;
        run_gemm(layer, pm, out, o.threads, &tc);
        const double ns = time_median_ns([&] { run_gemm(layer, pm, out, o.threads); }, o.repeats, o.warmups);
        report["rows"].push_back({{"case", s.name},
                                  {"config", config_to_json(cfg)},
                                  {"median_ns", ns},
                                  {"traffic", counters_json(tc)}});
      }
  }
  return report;
}

}  // namespace cwnm::bench
