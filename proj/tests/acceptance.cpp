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

// Acceptance suite: one PASS/FAIL line per criterion. Every tolerance and
// sample count is pinned below; the exit status is nonzero if any criterion
// fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cwnm/bench.hpp"
#include "cwnm/cwnm.hpp"
#include "oracles.hpp"

namespace {

using namespace cwnm;

// Pinned tolerances and sample sizes.
constexpr double kOracleTolerance = 1e-4;         // criterion 1: per-element relative error
constexpr double kOracleBudgetSeconds = 300.0;    // criterion 1: runtime budget
constexpr std::size_t kMinOracleCases = 200;      // criterion 1
constexpr std::size_t kPackingGeometries = 150;   // criterion 2 (>= 100 required)
constexpr std::size_t kRowVsColumnMatrices = 1000;  // criterion 4
constexpr double kMacScalingTolerance = 0.01;     // criterion 7: |ratio / (1 - s) - 1|
constexpr double kStageSparsity = 0.5;            // criterion 7
constexpr std::size_t kStageRepeats = 15;         // criterion 7: interleaved timed runs per kernel
constexpr std::size_t kStageWarmups = 3;
constexpr std::uint64_t kSeed = 42;

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (failures.size() < 5) failures.push_back(what);
    }
  }
};

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mask mask_for(KernelKind kind, const Matrix& w, std::size_t n, std::size_t m, std::size_t t) {
  switch (kind) {
    case KernelKind::ColumnWise: return select_mask_columnwise(w, n, m, t);
    case KernelKind::Dense: return Mask(w.rows, w.cols, true);
    default: return select_mask_rowwise(w, n, m);
  }
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence

Outcome oracle_equivalence() {
  Outcome o;
  TensorRng rng(kSeed);
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cases = 0;
  double worst = 0.0;
  std::set<std::pair<std::size_t, unsigned>> configs_seen;
  for (std::size_t k : {1u, 3u, 7u})
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u, 3u})
        for (double sparsity : {0.0, 0.25, 0.5, 0.75})
          for (KernelKind kind : kAllKernelKinds) {
            const std::size_t cin = rng.index(3, 64), cout = rng.index(3, 64);
            const std::size_t min_extent = k > 2 * pad ? k - 2 * pad : 1;
            const std::size_t h = rng.index(min_extent, min_extent + 8), w = rng.index(min_extent, min_extent + 8);
            const std::size_t batch = rng.index(1, 2);
            const std::size_t m = std::array<std::size_t, 3>{4, 8, 16}[rng.index(0, 2)];
            const std::size_t n = PruneSpec::kept_for_ratio(sparsity, m);
            const auto candidates = enumerate_candidates(cout, VectorEnv{kDefaultVlenBits, 1}, kind);
            const KernelConfig cfg = candidates[rng.index(0, candidates.size() - 1)];
            configs_seen.insert({cfg.t, cfg.env.lmul});
            const bool relu = rng.index(0, 1) == 1;

            const Matrix wt = rng.matrix(cout, cin * k * k);
            const std::vector<float> bias = rng.fill(cout);
            const Mask mask = mask_for(kind, wt, n, m, cfg.t);
            const ConvLayer layer(ConvParams::square(k, stride, pad, relu), wt, mask, bias, cfg);
            const Tensor x = rng.tensor({batch, cin, h, w}, Layout::CNHW);
            const Tensor y = conv_forward(layer, x);
            const auto ref = oracle::scaled_direct_conv(x, apply_mask(wt, mask), bias, relu, k, k, stride, stride, pad,
                                                        pad);
            const double err = oracle::scaled_error(y.data(), ref);
            worst = std::max(worst, err);
            o.check(y.size() == ref.exact.size() && err <= kOracleTolerance,
                    fmt("k=%zu s=%zu p=%zu sp=%.2f %s err=%.3g", k, stride, pad, sparsity, cfg.str().c_str(), err));
            ++cases;
          }
  const double secs = seconds_since(t0);
  o.check(cases >= kMinOracleCases, "too few cases");
  o.check(secs < kOracleBudgetSeconds, fmt("runtime %.1f s over budget", secs));
  o.detail = fmt("%zu cases, %zu distinct (t,lmul), max rel err %.3g (tol %.0e), %.1f s (budget %.0f s)", cases,
                 configs_seen.size(), worst, kOracleTolerance, secs, kOracleBudgetSeconds);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Fusion bit-exactness

Outcome fusion_bit_exact() {
  Outcome o;
  TensorRng rng(kSeed + 1);
  std::size_t geometries = 0;
  for (std::size_t i = 0; i < kPackingGeometries; ++i) {
    const std::size_t k = std::array<std::size_t, 4>{1, 3, 5, 7}[rng.index(0, 3)];
    const std::size_t pad = rng.index(0, 3), stride = rng.index(1, 2);
    const std::size_t min_extent = k > 2 * pad ? k - 2 * pad : 1;
    const Dims4 d{rng.index(1, 2), rng.index(1, 6), rng.index(min_extent, min_extent + 12),
                  rng.index(min_extent, min_extent + 60)};
    const auto g = ConvGeometry::make(d, k, k, stride, stride, pad, pad);
    const std::size_t vl = std::array<std::size_t, 5>{4, 8, 16, 32, 64}[rng.index(0, 4)];
    const Tensor x = rng.tensor(d, Layout::CNHW);
    FusedPackOptions fo;
    if (i % 3 == 1) fo.chunk = FusedPackOptions::Chunk::Auto;
    if (i % 3 == 2) {
      fo.chunk = FusedPackOptions::Chunk::Fixed;
      fo.fixed_chunk = rng.index(1, 40);
    }
    const bool same = fused_im2col_pack(x, g, vl, fo).bit_equal(pack(im2col(x, g), vl));
    o.check(same, fmt("geometry %zu: n=%zu c=%zu h=%zu w=%zu k=%zu s=%zu p=%zu vl=%zu", i, d.n, d.c, d.h, d.w, k,
                      stride, pad, vl));
    ++geometries;
  }

  // Tail case: a 56-wide row copied with a 32-lane vector is one run of 32
  // and one of 24.
  const Tensor x = TensorRng(kSeed + 2).tensor({1, 2, 4, 56}, Layout::CNHW);
  const auto g = ConvGeometry::make(x.dims4(), 1, 1, 1, 1, 0, 0);
  PackStats st;
  st.record_runs = true;
  const bool tail_same = fused_im2col_pack(x, g, 32, {}, &st).bit_equal(pack(im2col(x, g), 32));
  bool runs_ok = st.runs.size() == 2 * 2 * 4;
  for (std::size_t i = 0; runs_ok && i < st.runs.size(); ++i) runs_ok = st.runs[i].len == (i % 2 == 0 ? 32u : 24u);
  o.check(tail_same, "tail case bytes differ");
  o.check(runs_ok, "tail case runs are not 32 then 24 per row");
  ++geometries;
  o.detail = fmt("%zu geometries byte-identical incl. in_w=56/vl=32 tail (runs 32+24 per row: %s)", geometries,
                 runs_ok ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 3. Traffic theorem

Outcome traffic_theorem() {
  Outcome o;
  TensorRng rng(kSeed + 3);
  std::string ratios;
  for (std::size_t t : {2u, 4u, 8u, 16u}) {
    unsigned lmul = 1;
    for (unsigned l : kTunedLmuls)
      if (fits_register_budget(t, l)) lmul = l;
    const KernelConfig col{KernelKind::ColumnWise, t, VectorEnv{kDefaultVlenBits, lmul}};
    const KernelConfig inner{KernelKind::InnerProductNM, t, VectorEnv{kDefaultVlenBits, lmul}};
    for (int rep = 0; rep < 3; ++rep) {
      const std::size_t cout = t * rng.index(1, 4), cin = rng.index(4, 24);
      const Matrix w = rng.matrix(cout, cin * 9);
      const Mask mask = select_mask_columnwise(w, rng.index(1, 7), 8, t);
      const ConvParams p = ConvParams::square(3, 1, 1);
      const Tensor x = rng.tensor({1, cin, rng.index(3, 12), rng.index(3, 40)}, Layout::CNHW);
      TrafficCounters tc, ti;
      conv_forward(ConvLayer(p, w, mask, {}, col), x, {}, &tc);
      conv_forward(ConvLayer(p, w, mask, {}, inner), x, {}, &ti);
      o.check(tc.data_elem_loads * t == ti.data_elem_loads,
              fmt("t=%zu: columnwise %llu x t != inner %llu", t, static_cast<unsigned long long>(tc.data_elem_loads),
                  static_cast<unsigned long long>(ti.data_elem_loads)));
      if (rep == 0)
        ratios += fmt("%st=%zu: %.1f", ratios.empty() ? "" : ", ",
                      t, static_cast<double>(ti.data_elem_loads) / static_cast<double>(tc.data_elem_loads));
    }
  }

  std::size_t compared = 0;
  double worst_fraction = 0.0;
  for (const auto& s : bench::default_packing_shapes()) {
    const ConvGeometry g = s.geometry();
    const Tensor x = rng.tensor(g.input_dims(), Layout::CNHW);
    for (unsigned lmul : kTunedLmuls)
      for (bool auto_chunk : {false, true}) {
        const std::size_t vl = VectorEnv{kDefaultVlenBits, lmul}.vl_f32();
        FusedPackOptions fo;
        if (auto_chunk) fo.chunk = FusedPackOptions::Chunk::Auto;
        PackStats two, fused;
        two_step_im2col_pack(x, g, vl, &two);
        fused_im2col_pack(x, g, vl, fo, &fused);
        o.check(fused.source_reads < two.source_reads, fmt("%s vl=%zu: fused reads %llu >= two-step %llu",
                                                           s.name.c_str(), vl,
                                                           static_cast<unsigned long long>(fused.source_reads),
                                                           static_cast<unsigned long long>(two.source_reads)));
        worst_fraction = std::max(worst_fraction, static_cast<double>(fused.source_reads) /
                                                      static_cast<double>(two.source_reads));
        ++compared;
      }
  }
  o.detail = fmt("inner/columnwise data loads == t exactly (%s); fused < two-step reads on %zu packing runs "
                 "(worst fused/two-step %.3f)",
                 ratios.c_str(), compared, worst_fraction);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Pruning formula and structure

Outcome pruning_structure() {
  Outcome o;
  TensorRng rng(kSeed + 4);
  std::size_t formula_cases = 0;
  for (double s : {0.25, 0.5, 0.75})
    for (std::size_t m : {4u, 8u, 16u, 64u}) {
      const auto expect = static_cast<std::size_t>(std::lround((1.0 - s) * static_cast<double>(m)));
      o.check(PruneSpec::kept_for_ratio(s, m) == expect, fmt("kept_for_ratio(%.2f, %zu)", s, m));
      const std::size_t t = 4;
      const Matrix w = rng.matrix(8, 2 * m);
      const Mask mask = select_mask(w, PruneSpec::from_ratio(s, m, t));
      for (std::size_t k : group_kept_counts(mask, m, t)) o.check(k == expect, fmt("group kept %zu != %zu", k, expect));
      ++formula_cases;
    }

  std::size_t oracle_groups = 0;
  for (std::size_t m = 1; m <= 12; ++m)
    for (std::size_t n = 1; n <= m; ++n) {
      const std::size_t t = rng.index(1, 5), rows = rng.index(1, 9), cols = rng.index(m, 3 * m + 2);
      Matrix w = rng.matrix(rows, cols);
      // Quantize half the matrices so L1 ties exercise the lower-index rule.
      if (n % 2 == 0)
        for (float& v : w.data) v = std::round(v * 2.0f) / 2.0f;
      const Mask mask = select_mask_columnwise(w, n, m, t);
      for (std::size_t r0 = 0; r0 < rows; r0 += t)
        for (std::size_t c0 = 0; c0 < cols; c0 += m) {
          const std::size_t g = std::min(m, cols - c0), r1 = std::min(rows, r0 + t);
          const auto want = oracle::columnwise_group(w, r0, r1, c0, g, group_keep(n, m, g));
          std::vector<std::size_t> got;
          for (std::size_t c = 0; c < g; ++c)
            if (mask(r0, c0 + c)) got.push_back(c);
          o.check(got == want, fmt("m=%zu n=%zu tile@%zu group@%zu differs from exhaustive oracle", m, n, r0, c0));
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = 0; c < g; ++c)
              o.check(mask(r, c0 + c) == mask(r0, c0 + c), "mask not uniform down a tile");
          ++oracle_groups;
        }
    }

  for (std::size_t i = 0; i < kRowVsColumnMatrices; ++i) {
    const std::size_t m = rng.index(1, 16), n = rng.index(1, m);
    const Matrix w = rng.matrix(rng.index(1, 12), rng.index(1, 40));
    o.check(select_mask_columnwise(w, n, m, 1).keep == select_mask_rowwise(w, n, m).keep,
            fmt("matrix %zu: tile_t=1 column-wise != row-wise", i));
  }
  o.detail = fmt("%zu (s,m) formula cases, %zu groups vs exhaustive oracle (m<=12), %zu tile_t=1 matrices",
                 formula_cases, oracle_groups, kRowVsColumnMatrices);
  return o;
}

// ---------------------------------------------------------------------------
// 5. Tuner contract

Outcome tuner_contract() {
  Outcome o;
  for (std::size_t rows : {1u, 2u, 3u, 7u, 16u, 31u, 64u, 2048u}) {
    std::set<std::pair<std::size_t, unsigned>> want, got;
    for (unsigned lmul = 1; lmul <= 8; ++lmul) {
      if (lmul != 1 && lmul != 2 && lmul != 4 && lmul != 8) continue;
      for (std::size_t t = 1; t <= 64; ++t)
        if ((t + 1) * lmul <= 32 && t <= 31 && t <= rows) want.insert({t, lmul});
    }
    const auto cs = enumerate_candidates(rows);
    for (const auto& c : cs) got.insert({c.t, c.env.lmul});
    o.check(got == want && got.size() == cs.size(), fmt("enumeration for rows=%zu", rows));
  }
  std::set<std::size_t> lmul8;
  for (const auto& c : enumerate_candidates(64))
    if (c.env.lmul == 8) lmul8.insert(c.t);
  o.check(lmul8 == std::set<std::size_t>{1, 2, 3}, "lmul=8 must allow exactly t in {1,2,3}");

  TensorRng rng(kSeed + 5);
  LayerShape shape;
  shape.geometry = ConvGeometry::make({1, 8, 8, 8}, 3, 3, 1, 1, 1, 1);
  shape.cout = 16;
  shape.n = 4;
  shape.m = 8;
  const Matrix w = rng.matrix(16, shape.geometry.k());
  const Tensor x = rng.tensor(shape.geometry.input_dims(), Layout::CNHW);
  TuneOptions opts;
  const TuneReport rep = tune_layer(shape, w, {}, x, opts);
  for (const auto& c : rep.candidates)
    o.check(c.disqualified || c.median_ns >= rep.winner_median_ns, "winner median is not minimal");
  o.check(rep.candidates.size() == enumerate_candidates(16).size(), "not every candidate measured");

  // Delay harness: slowing the natural winner must hand the win to another candidate.
  TuneOptions delayed = opts;
  delayed.repeats = 3;
  delayed.warmups = 0;
  const KernelConfig fast{KernelKind::ColumnWise, 4, VectorEnv{kDefaultVlenBits, 2}};
  const KernelConfig other{KernelKind::ColumnWise, 2, VectorEnv{kDefaultVlenBits, 1}};
  delayed.candidates = std::vector<KernelConfig>{fast, other};
  bool flipped = true;
  for (const KernelConfig& slow : {fast, other}) {
    delayed.on_timed_run = [slow](const KernelConfig& c) {
      if (c == slow) std::this_thread::sleep_for(std::chrono::milliseconds(25));
    };
    flipped = flipped && tune_layer(shape, w, {}, x, delayed).winner == (slow == fast ? other : fast);
  }
  o.check(flipped, "injected delay did not flip the winner");
  o.detail = fmt("enumeration == {(t,lmul): (t+1)*lmul<=32, t<=31} for 8 row counts; winner %s minimal over %zu "
                 "candidates; delay flips winner: %s",
                 rep.winner.str().c_str(), rep.candidates.size(), flipped ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 6. Determinism and round trips

Outcome determinism() {
  Outcome o;
  TensorRng rng(kSeed + 6);
  std::size_t layers = 0;
  for (KernelKind kind : kAllKernelKinds)
    for (int rep = 0; rep < 3; ++rep) {
      const std::size_t cin = rng.index(3, 32), cout = rng.index(3, 64), k = rep == 0 ? 1 : 3;
      const auto cs = enumerate_candidates(cout, {}, kind);
      const KernelConfig cfg = cs[rng.index(0, cs.size() - 1)];
      const Matrix w = rng.matrix(cout, cin * k * k);
      const ConvLayer layer(ConvParams::square(k, 1, k / 2, true), w, mask_for(kind, w, 2, 4, cfg.t),
                            rng.fill(cout), cfg);
      const Tensor x = rng.tensor({2, cin, rng.index(4, 14), rng.index(4, 14)}, Layout::CNHW);
      const Tensor ref = conv_forward(layer, x, {1});
      for (std::size_t threads : {2u, 8u})
        o.check(conv_forward(layer, x, {threads}).bit_equal(ref),
                fmt("%s: %zu threads differ from 1", cfg.str().c_str(), threads));
      ++layers;
    }

  std::size_t round_trips = 0;
  const auto dir = std::filesystem::temp_directory_path() / "cwnm_acceptance";
  std::filesystem::create_directories(dir);
  for (int i = 0; i < 20; ++i) {
    const Dims4 d{rng.index(1, 3), rng.index(1, 9), rng.index(1, 9), rng.index(1, 9)};
    const Tensor nhwc = rng.tensor(d, Layout::NHWC);
    o.check(convert_layout(convert_layout(nhwc, Layout::CNHW), Layout::NHWC).bit_equal(nhwc), "layout round trip");
    const std::string tpath = (dir / "t.cwnm").string();
    write_tensor(nhwc, tpath);
    o.check(read_tensor(tpath).bit_equal(nhwc), "tensor file round trip");

    const Matrix w = rng.matrix(rng.index(1, 20), rng.index(1, 50));
    const SparseWeight sw = prune_and_compress(w, PruneSpec::from_nm(rng.index(1, 4), 4, rng.index(1, 8)));
    const std::string spath = (dir / "w.cwsw").string();
    write_sparse_weight(sw, spath);
    const SparseWeight back = read_sparse_weight(spath);
    o.check(encode_sparse_weight(back) == encode_sparse_weight(sw) && decompress(back).data == decompress(sw).data,
            "sparse weight file round trip");
    round_trips += 3;
  }
  std::filesystem::remove_all(dir);
  o.detail = fmt("%zu layers byte-identical for threads {1,2,8}; %zu layout/tensor/sparse round trips exact", layers,
                 round_trips);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Performance sanity

Outcome performance_sanity() {
  Outcome o;
  bench::BenchOptions bo;
  bo.sparsity = kStageSparsity;
  bo.repeats = kStageRepeats;
  bo.warmups = kStageWarmups;
  const auto t0 = std::chrono::steady_clock::now();
  double worst_time_ratio = 0.0, worst_mac_dev = 0.0;
  std::size_t shapes = 0;
  for (const auto& s : bench::default_stage_shapes()) {
    const bench::StageResult r = bench::measure_stage(s, bo);
    const double ratio = r.tuned_ns / r.inner_ns;
    worst_time_ratio = std::max(worst_time_ratio, ratio);
    o.check(r.tuned_ns <= r.inner_ns, fmt("%s: tuned %s %.0f ns > inner baseline %.0f ns", s.name.c_str(),
                                          r.tuned.str().c_str(), r.tuned_ns, r.inner_ns));

    // MACs of the tuned kernel against the same (t, lmul) run dense.
    TensorRng rng(bo.seed);
    const ConvGeometry g = s.geometry();
    const Matrix w = rng.matrix(s.cout, g.k());
    const Tensor x = rng.tensor(g.input_dims(), Layout::CNHW);
    const ConvParams p = ConvParams::square(s.k, s.stride, s.pad);
    const KernelConfig dense_cfg{KernelKind::Dense, r.tuned.t, r.tuned.env};
    TrafficCounters dense;
    conv_forward(ConvLayer(p, w, {}, dense_cfg), x, {}, &dense);
    const double mac_ratio = static_cast<double>(r.tuned_counters.macs) / static_cast<double>(dense.macs);
    const double dev = std::fabs(mac_ratio / (1.0 - kStageSparsity) - 1.0);
    worst_mac_dev = std::max(worst_mac_dev, dev);
    o.check(dev <= kMacScalingTolerance, fmt("%s: MAC ratio %.4f", s.name.c_str(), mac_ratio));
    std::printf("  %-14s tuned %-24s %10.0f ns  inner(t=%zu,lmul=%u) %10.0f ns  ratio %.3f  macs %.4f\n",
                s.name.c_str(), r.tuned.str().c_str(), r.tuned_ns, std::min(bo.baseline_t, s.cout), bo.baseline_lmul,
                r.inner_ns, ratio, mac_ratio);
    ++shapes;
  }
  o.detail = fmt("%zu stage shapes at %.0f%%: worst tuned/inner time %.3f (<= 1), worst MAC deviation %.2e (tol %.0e), "
                 "%.1f s",
                 shapes, kStageSparsity * 100, worst_time_ratio, worst_mac_dev, kMacScalingTolerance,
                 seconds_since(t0));
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"oracle-equivalence", oracle_equivalence}, {"fusion-bit-exact", fusion_bit_exact},
      {"traffic-theorem", traffic_theorem},       {"pruning-structure", pruning_structure},
      {"tuner-contract", tuner_contract},         {"determinism", determinism},
      {"performance-sanity", performance_sanity}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    for (const auto& f : o.failures) std::printf("    %s\n", f.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
