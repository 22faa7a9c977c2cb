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

// cwnm: command-line driver for pruning, layout conversion, convolution,
// tuning and benchmarking.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cwnm/bench.hpp"
#include "cwnm/cwnm.hpp"
#include "cwnm/manifest.hpp"

namespace {

using namespace cwnm;

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitVerify = 3;
constexpr double kVerifyTolerance = 1e-4;

/// Parses "N,C,H,W" (or any comma-separated extents).
std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size() || v == 0) throw ConfigError("bad dimension '" + item + "' in '" + text + "'");
    dims.push_back(static_cast<std::size_t>(v));
  }
  if (dims.empty()) throw ConfigError("empty dimension list");
  return dims;
}

Dims4 dims4_of(const std::vector<std::size_t>& d) {
  if (d.size() != 4) throw ConfigError("expected four extents N,C,H,W");
  return {d[0], d[1], d[2], d[3]};
}

/// Worker count: CWNM_THREADS wins over the flag; 0 means hardware parallelism.
std::size_t effective_threads(std::size_t flag) {
  if (const char* env = std::getenv("CWNM_THREADS"); env && *env) {
    try {
      return static_cast<std::size_t>(std::stoull(env));
    } catch (const std::exception&) {
      throw ConfigError(std::string("CWNM_THREADS must be a non-negative integer, got '") + env + "'");
    }
  }
  return flag;
}

/// Weight matrix from a tensor file: 2-D as is, higher ranks flattened to
/// dims[0] x (product of the rest).
Matrix load_weight_matrix(const std::string& path) {
  const Tensor t = read_tensor(path);
  if (t.rank() < 2) throw ShapeError("weights in " + path + " must have rank >= 2");
  const std::size_t rows = t.dims()[0];
  return Matrix(rows, t.size() / rows, std::vector<float>(t.data().begin(), t.data().end()));
}

Tensor load_nhwc_input(const std::string& path) {
  Tensor t = read_tensor(path);
  if (t.rank() != 4) throw ShapeError("input " + path + " must be a 4-D tensor");
  return t.layout() == Layout::NHWC ? t : convert_layout(t, Layout::NHWC);
}

void write_json(const nlohmann::json& doc, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << doc.dump(2) << '\n';
    return;
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << doc.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// prune

struct PruneArgs {
  std::string weights, out, mode = "column";
  std::optional<double> sparsity;
  std::optional<std::size_t> n;
  std::size_t m = 8, tile = 8;
};

int cmd_prune(const PruneArgs& a, bool tile_given) {
  const PruneMode mode = a.mode == "row" ? PruneMode::RowWise : PruneMode::ColumnWise;
  std::size_t tile = a.tile;
  if (mode == PruneMode::RowWise) {
    if (tile_given && tile != 1) throw ConfigError("row-wise pruning stores one row per tile; use --tile 1");
    tile = 1;
  }
  const PruneSpec spec = a.n ? PruneSpec::from_nm(*a.n, a.m, tile, mode)
                             : PruneSpec::from_ratio(*a.sparsity, a.m, tile, mode);
  const Matrix w = load_weight_matrix(a.weights);
  const SparseWeight sw = prune_and_compress(w, spec);
  write_sparse_weight(sw, a.out);

  const Mask mask = select_mask(w, spec);
  std::cout << "n=" << spec.n << " m=" << spec.m << " tile=" << spec.tile_t << " mode=" << a.mode << '\n';
  std::cout << "achieved sparsity: " << mask.sparsity() << '\n';
  std::cout << "kept per group:";
  for (std::size_t k : group_kept_counts(mask, spec.m, spec.tile_t)) std::cout << ' ' << k;
  std::cout << '\n' << "wrote " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// convert / random

int cmd_convert(const std::string& in, const std::string& out, const std::string& layout) {
  write_tensor(convert_layout(read_tensor(in), layout_from_string(layout)), out);
  return 0;
}

int cmd_random(const std::string& dims, const std::string& layout, std::uint64_t seed, float lo, float hi,
               const std::string& out) {
  const auto d = parse_dims(dims);
  TensorRng rng(seed);
  std::size_t count = 1;
  for (std::size_t x : d) count *= x;
  const Layout l = layout_from_string(layout);
  if (l != Layout::RowMajor2D && d.size() != 4) throw ConfigError("NHWC/CNHW tensors need four extents N,C,H,W");
  if (l == Layout::RowMajor2D && d.size() != 2) throw ConfigError("rowmajor tensors need two extents R,C");
  write_tensor(Tensor(d, l, rng.fill(count, lo, hi)), out);
  return 0;
}

// ---------------------------------------------------------------------------
// conv

struct ConvArgs {
  std::string manifest, input, out, cache;
  std::size_t threads = 0;
  unsigned vlen = kDefaultVlenBits;
  bool verify = false;
};

int cmd_conv(const ConvArgs& a) {
  auto entries = load_manifest(a.manifest, a.vlen);
  const Tensor x = load_nhwc_input(a.input);
  std::optional<TuneCache> cache;
  if (!a.cache.empty()) cache.emplace(a.cache);
  const BuiltModel model = build_model(entries, x.dims4(), cache ? &*cache : nullptr, current_fingerprint(a.vlen));
  for (const auto& w : model.warnings) std::cerr << "warning: " << w << '\n';

  ConvOptions opts;
  opts.threads = effective_threads(a.threads);
  const Tensor y = run_model(model.layers, x, opts);
  write_tensor(y, a.out);
  std::cout << "layers=" << model.layers.size() << " output=" << y.dims4().n << 'x' << y.dims4().h << 'x'
            << y.dims4().w << 'x' << y.dims4().c << " (NHWC) threads=" << resolve_threads(opts.threads) << '\n';
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    std::cout << "  layer " << i << ": " << model.layers[i].config().str() << '\n';

  if (!a.verify) return 0;
  // Layer-by-layer against the direct-convolution oracle on the same inputs
  // the library consumed; the final output is checked as part of the chain.
  double worst = 0.0;
  Tensor cur = convert_layout(x, Layout::CNHW);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const ConvLayer& layer = model.layers[i];
    const Tensor next = conv_forward(layer, cur, opts);
    const auto ref = conv_reference_detailed(model.geometry[i], layer.masked_weights(), cur, layer.bias(),
                                             layer.params().relu);
    worst = std::max(worst, max_relative_error(next, ref));
    cur = next;
  }
  if (!convert_layout(cur, Layout::NHWC).bit_equal(y)) throw Error("verification chain diverged from run_model");
  std::cout << "max relative error: " << worst << '\n';
  if (!(worst <= kVerifyTolerance)) {
    std::cerr << "error: verification failed (tolerance " << kVerifyTolerance << ")\n";
    return kExitVerify;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// tune

struct TuneArgs {
  std::string manifest, cache, input, input_dims;
  std::size_t repeats = 9, warmups = 3;
  unsigned vlen = kDefaultVlenBits;
  std::uint64_t seed = kDefaultSeed;
};

int cmd_tune(const TuneArgs& a) {
  auto entries = load_manifest(a.manifest, a.vlen);
  Dims4 in;
  if (!a.input.empty())
    in = read_tensor(a.input).dims4();
  else if (!a.input_dims.empty())
    in = dims4_of(parse_dims(a.input_dims));
  else
    throw ConfigError("tune needs --input or --input-dims to fix the layer geometry");
  const auto geoms = resolve_geometry(entries, in);

  TuneCache cache(a.cache);
  const EnvFingerprint env = current_fingerprint(a.vlen);
  TuneOptions opts;
  opts.repeats = a.repeats;
  opts.warmups = a.warmups;
  opts.vlen_bits = a.vlen;
  std::size_t tuned = 0, cached = 0, fixed = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!e.is_auto()) {
      ++fixed;
      continue;
    }
    const LayerShape shape = layer_shape(e, geoms[i]);
    const std::string key = shape.key();
    const CacheStatus st = cache.lookup(key, env);
    if (st == CacheStatus::Hit) {
      ++cached;
      std::cout << "layer " << i << ": cached " << cache.get(key)->winner.str() << '\n';
      continue;
    }
    if (st == CacheStatus::Stale)
      std::cerr << "warning: layer " << i << ": cache entry was tuned in another environment; retuning\n";
    TensorRng rng(a.seed + i);
    const Tensor sample = rng.tensor(geoms[i].input_dims(), Layout::CNHW);
    const TuneReport rep = tune_layer(shape, e.dense(), e.bias, sample, opts);
    cache.put(rep);
    ++tuned;
    std::cout << "layer " << i << ": tuned " << rep.winner.str() << " median_ns=" << rep.winner_median_ns << " ("
              << rep.candidates.size() << " candidates)\n";
  }
  std::cout << "tuned=" << tuned << " cached=" << cached << " fixed=" << fixed << " cache=" << a.cache << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string suite, json, shapes;
  bench::BenchOptions opts;
};

int cmd_bench(BenchArgs a) {
  a.opts.threads = effective_threads(a.opts.threads);
  if (a.opts.threads == 0) a.opts.threads = resolve_threads(0);
  nlohmann::json report;
  if (a.suite == "stage-shapes") {
    report = bench::stage_shapes_suite(a.shapes.empty() ? bench::default_stage_shapes() : bench::load_shapes(a.shapes),
                                       a.opts);
  } else if (a.suite == "packing") {
    report = bench::packing_suite(a.shapes.empty() ? bench::default_packing_shapes() : bench::load_shapes(a.shapes),
                                  a.opts);
  } else {
    report = bench::kernels_suite(a.shapes.empty() ? bench::default_kernel_cases() : bench::load_shapes(a.shapes),
                                  a.opts);
  }
  write_json(report, a.json);
  if (!a.json.empty() && a.json != "-")
    std::cout << "suite=" << a.suite << " rows=" << report["rows"].size() << " wrote " << a.json << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cwnm: column-wise N:M sparse convolution toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cwnm 1.0.0");

  PruneArgs pa;
  auto* prune = app.add_subcommand("prune", "Prune a weight matrix with N:M sparsity and write a CWSW file");
  prune->add_option("--weights", pa.weights, "Dense weight tensor (CWNM, rank >= 2)")->required()->check(
      CLI::ExistingFile);
  auto* sp = prune->add_option("--sparsity", pa.sparsity, "Target sparsity ratio in [0, 1)");
  auto* np = prune->add_option("--n", pa.n, "Kept units per group");
  sp->excludes(np);
  np->excludes(sp);
  prune->add_option("--m", pa.m, "Group width")->capture_default_str();
  auto* tile_opt = prune->add_option("--tile", pa.tile, "Tile height (rows sharing a column mask)")
                       ->capture_default_str();
  prune->add_option("--mode", pa.mode, "Pruning granularity")
      ->check(CLI::IsMember({"row", "column"}))
      ->capture_default_str();
  prune->add_option("--out", pa.out, "Output CWSW path")->required();

  std::string conv_in, conv_out, conv_layout;
  auto* convert = app.add_subcommand("convert", "Convert a 4-D tensor between NHWC and CNHW");
  convert->add_option("--in", conv_in)->required()->check(CLI::ExistingFile);
  convert->add_option("--out", conv_out)->required();
  convert->add_option("--layout", conv_layout, "Target layout")
      ->required()
      ->check(CLI::IsMember({"nhwc", "cnhw", "NHWC", "CNHW"}));

  std::string rnd_dims, rnd_layout = "nhwc", rnd_out;
  std::uint64_t rnd_seed = kDefaultSeed;
  float rnd_lo = -1.0f, rnd_hi = 1.0f;
  auto* random = app.add_subcommand("random", "Write a seeded uniform random tensor");
  random->add_option("--dims", rnd_dims, "Extents: N,C,H,W for nhwc/cnhw, R,C for rowmajor")->required();
  random->add_option("--layout", rnd_layout)->check(CLI::IsMember({"nhwc", "cnhw", "rowmajor"}))
      ->capture_default_str();
  random->add_option("--seed", rnd_seed)->capture_default_str();
  random->add_option("--lo", rnd_lo)->capture_default_str();
  random->add_option("--hi", rnd_hi)->capture_default_str();
  random->add_option("--out", rnd_out)->required();

  ConvArgs ca;
  auto* conv = app.add_subcommand("conv", "Run a model manifest on an NHWC input");
  conv->add_option("--manifest", ca.manifest)->required()->check(CLI::ExistingFile);
  conv->add_option("--input", ca.input, "NHWC input tensor")->required()->check(CLI::ExistingFile);
  conv->add_option("--out", ca.out, "NHWC output tensor")->required();
  conv->add_option("--threads", ca.threads, "Workers (0 = hardware parallelism; CWNM_THREADS overrides)")
      ->capture_default_str();
  conv->add_option("--cache", ca.cache, "Tune cache for \"auto\" layers");
  conv->add_option("--vlen", ca.vlen, "Vector register width in bits")->capture_default_str();
  conv->add_flag("--verify", ca.verify, "Check every layer against the direct-convolution oracle");

  TuneArgs ta;
  auto* tune = app.add_subcommand("tune", "Tune every \"auto\" layer of a manifest into the cache");
  tune->add_option("--manifest", ta.manifest)->required()->check(CLI::ExistingFile);
  tune->add_option("--cache", ta.cache)->required();
  auto* ti = tune->add_option("--input", ta.input, "Input tensor fixing the model geometry")
                 ->check(CLI::ExistingFile);
  auto* td = tune->add_option("--input-dims", ta.input_dims, "Input extents N,C,H,W");
  ti->excludes(td);
  tune->add_option("--repeats", ta.repeats)->capture_default_str();
  tune->add_option("--warmups", ta.warmups)->capture_default_str();
  tune->add_option("--vlen", ta.vlen)->capture_default_str();
  tune->add_option("--seed", ta.seed)->capture_default_str();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Run a benchmark suite and emit a JSON report");
  bench->add_option("--suite", ba.suite)->required()->check(CLI::IsMember({"stage-shapes", "packing", "kernels"}));
  bench->add_option("--json", ba.json, "Report path (stdout when omitted)");
  bench->add_option("--shapes", ba.shapes, "Shapes file overriding the suite's defaults")->check(CLI::ExistingFile);
  bench->add_option("--repeats", ba.opts.repeats)->capture_default_str();
  bench->add_option("--warmups", ba.opts.warmups)->capture_default_str();
  bench->add_option("--tune-repeats", ba.opts.tune_repeats)->capture_default_str();
  bench->add_option("--tune-warmups", ba.opts.tune_warmups)->capture_default_str();
  bench->add_option("--sparsity", ba.opts.sparsity)->capture_default_str();
  bench->add_option("--m", ba.opts.m)->capture_default_str();
  bench->add_option("--threads", ba.opts.threads)->capture_default_str();
  bench->add_option("--seed", ba.opts.seed)->capture_default_str();
  bench->add_option("--vlen", ba.opts.vlen_bits)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prune) {
      if (!pa.sparsity && !pa.n) throw ConfigError("prune needs --sparsity or --n");
      return cmd_prune(pa, tile_opt->count() > 0);
    }
    if (*convert) return cmd_convert(conv_in, conv_out, conv_layout);
    if (*random) return cmd_random(rnd_dims, rnd_layout, rnd_seed, rnd_lo, rnd_hi, rnd_out);
    if (*conv) return cmd_conv(ca);
    if (*tune) return cmd_tune(ta);
    if (*bench) return cmd_bench(ba);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
