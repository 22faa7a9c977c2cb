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

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cwnm/conv.hpp"
#include "cwnm/kernels.hpp"
#include "cwnm/prune.hpp"
#include "cwnm/reference.hpp"

// Per-layer profiler: enumerate (t, lmul) candidates, check each against the
// direct-convolution oracle, time the survivors and keep the fastest.

namespace cwnm {

inline constexpr std::array<unsigned, 4> kTunedLmuls = {1, 2, 4, 8};
inline constexpr std::size_t kMaxTileRows = 31;

/// All (t, lmul) pairs with t <= min(31, rows) that fit the register
/// budget, ordered by lmul then t.
inline std::vector<KernelConfig> enumerate_candidates(std::size_t rows, VectorEnv env_base = {},
                                                      KernelKind kind = KernelKind::ColumnWise) {
  if (rows == 0) throw ConfigError("cannot enumerate candidates for a layer with zero rows");
  std::vector<KernelConfig> out;
  for (unsigned lmul : kTunedLmuls)
    for (std::size_t t = 1; t <= std::min(kMaxTileRows, rows); ++t)
      if (fits_register_budget(t, lmul)) out.push_back({kind, t, VectorEnv{env_base.vlen_bits, lmul}});
  return out;
}

/// What a tuning decision is keyed on.
struct LayerShape {
  ConvGeometry geometry;
  std::size_t cout = 1;
  std::size_t n = 1, m = 1;
  KernelKind kind = KernelKind::ColumnWise;

  std::string key() const {
    const auto& g = geometry;
    std::ostringstream os;
    os << "in=" << g.n << 'x' << g.cin << 'x' << g.in_h << 'x' << g.in_w << ";k=" << g.kh << 'x' << g.kw
       << ";s=" << g.sh << 'x' << g.sw << ";p=" << g.ph << ',' << g.pw << ',' << g.ph_end << ',' << g.pw_end
       << ";cout=" << cout << ";nm=" << n << ':' << m << ";kind=" << to_string(kind);
    return os.str();
  }

  ConvParams params() const {
    const auto& g = geometry;
    return {g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.ph_end, g.pw_end, false};
  }
};

struct EnvFingerprint {
  unsigned vlen_bits = kDefaultVlenBits;
  std::size_t workers = 1;
  std::string host;

  /// Tuning results transfer only between identical vector lengths on the same host.
  bool compatible(const EnvFingerprint& o) const { return vlen_bits == o.vlen_bits && host == o.host; }
};

inline std::string host_id() {
  char name[256] = {};
  if (gethostname(name, sizeof(name) - 1) != 0) std::snprintf(name, sizeof(name), "unknown");
  return std::string(name) + "/cpus=" + std::to_string(std::thread::hardware_concurrency());
}

inline EnvFingerprint current_fingerprint(unsigned vlen_bits = kDefaultVlenBits, std::size_t workers = 1) {
  return {vlen_bits, workers, host_id()};
}

struct TuneCandidate {
  KernelConfig config;
  double median_ns = 0.0;
  std::size_t repeats = 0;
  std::size_t warmups = 0;
  double max_rel_err = 0.0;
  bool disqualified = false;
};

struct TuneReport {
  std::string key;
  std::vector<TuneCandidate> candidates;
  KernelConfig winner;
  double winner_median_ns = 0.0;
  EnvFingerprint env;
};

struct TuneOptions {
  std::size_t repeats = 9;
  std::size_t warmups = 3;
  unsigned vlen_bits = kDefaultVlenBits;
  double tolerance = 1e-4;
  /// Replaces the enumerated candidate list when set.
  std::optional<std::vector<KernelConfig>> candidates;
  /// Invoked inside every timed run (test hook for injected delays).
  std::function<void(const KernelConfig&)> on_timed_run;
};

/// Mask a candidate runs with. Column-wise candidates re-prune the dense
/// source with their own tile height.
inline Mask candidate_mask(const Matrix& dense, const LayerShape& shape, const KernelConfig& cfg) {
  switch (cfg.kind) {
    case KernelKind::ColumnWise: return select_mask_columnwise(dense, shape.n, shape.m, cfg.t);
    case KernelKind::Dense: return Mask(dense.rows, dense.cols, true);
    case KernelKind::InnerProductNM:
    case KernelKind::OuterProductNM: return select_mask_rowwise(dense, shape.n, shape.m);
  }
  return Mask(dense.rows, dense.cols, true);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

/// Fastest qualified candidate; ties on the median go to the smaller t, then
/// the smaller lmul. Null when every candidate was disqualified.
inline const TuneCandidate* select_winner(const std::vector<TuneCandidate>& candidates) {
  const TuneCandidate* best = nullptr;
  for (const auto& c : candidates) {
    if (c.disqualified) continue;
    if (!best || c.median_ns < best->median_ns ||
        (c.median_ns == best->median_ns &&
         (c.config.t < best->config.t ||
          (c.config.t == best->config.t && c.config.env.lmul < best->config.env.lmul))))
      best = &c;
  }
  return best;
}

/// Profiles every candidate single-threaded on `sample_input` (CNHW). A
/// candidate whose output deviates from the oracle by more than
/// `opts.tolerance` is disqualified and not timed. Ties on the median go to
/// the smaller t, then the smaller lmul.
inline TuneReport tune_layer(const LayerShape& shape, const Matrix& dense_weights, std::span<const float> bias,
                             const Tensor& sample_input, const TuneOptions& opts = {}) {
  if (opts.repeats < 3) throw ConfigError("tuning needs at least 3 timed repeats");
  if (dense_weights.rows != shape.cout || dense_weights.cols != shape.geometry.k())
    throw ShapeError("sample weights do not match the layer shape");
  shape.geometry.check_input(sample_input);

  TuneReport report;
  report.key = shape.key();
  report.env = current_fingerprint(opts.vlen_bits, 1);
  const auto configs = opts.candidates ? *opts.candidates
                                       : enumerate_candidates(shape.cout, VectorEnv{opts.vlen_bits, 1}, shape.kind);
  const std::vector<float> bias_vec(bias.begin(), bias.end());
  const ConvOptions run_opts{1, {}};
  std::map<std::size_t, ReferenceOutput> refs;  // per column-wise tile height; others share key 0

  for (const KernelConfig& cfg : configs) {
    TuneCandidate cand{cfg, 0.0, opts.repeats, opts.warmups, 0.0, false};
    const Mask mask = candidate_mask(dense_weights, shape, cfg);
    const ConvLayer layer(shape.params(), dense_weights, mask, bias_vec, cfg);
    const Tensor out = conv_forward(layer, sample_input, run_opts);
    const std::size_t ref_key = cfg.kind == KernelKind::ColumnWise ? cfg.t : 0;
    auto it = refs.find(ref_key);
    if (it == refs.end())
      it = refs.emplace(ref_key, conv_reference_detailed(shape.geometry, layer.masked_weights(), sample_input, bias))
               .first;
    cand.max_rel_err = max_relative_error(out, it->second);
    if (!(cand.max_rel_err <= opts.tolerance)) {
      cand.disqualified = true;
      report.candidates.push_back(cand);
      continue;
    }
    for (std::size_t i = 0; i < opts.warmups; ++i) conv_forward(layer, sample_input, run_opts);
    std::vector<double> samples;
    for (std::size_t i = 0; i < opts.repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      if (opts.on_timed_run) opts.on_timed_run(cfg);
      conv_forward(layer, sample_input, run_opts);
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    }
    cand.median_ns = std::max(1.0, median_of(std::move(samples)));
    report.candidates.push_back(cand);
  }

  const TuneCandidate* best = select_winner(report.candidates);
  if (!best) throw Error("every tuning candidate for " + report.key + " was disqualified");
  report.winner = best->config;
  report.winner_median_ns = best->median_ns;
  return report;
}

// ---------------------------------------------------------------------------
// Tuning cache: JSON lines, one record per shape key.

inline nlohmann::json config_to_json(const KernelConfig& c) {
  return {{"kind", to_string(c.kind)}, {"t", c.t}, {"lmul", c.env.lmul}};
}

inline KernelConfig config_from_json(const nlohmann::json& j, unsigned vlen_bits = kDefaultVlenBits) {
  KernelConfig c{kernel_kind_from_string(j.at("kind").get<std::string>()), j.at("t").get<std::size_t>(),
                 VectorEnv{vlen_bits, j.at("lmul").get<unsigned>()}};
  c.validate();
  return c;
}

struct CacheEntry {
  std::string key;
  KernelConfig winner;
  double median_ns = 0.0;
  EnvFingerprint env;
  nlohmann::json candidates = nlohmann::json::array();
};

enum class CacheStatus { Hit, Miss, Stale };

class TuneCache {
 public:
  TuneCache() = default;

  /// Loads `path` if it exists. Throws FormatError on a malformed record.
  explicit TuneCache(std::string path) : path_(std::move(path)) { entries_ = read_entries(path_); }

  const std::string& path() const { return path_; }
  std::size_t size() const { return entries_.size(); }

  std::optional<CacheEntry> get(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  /// Hit only when the stored fingerprint is compatible with `env`.
  CacheStatus lookup(const std::string& key, const EnvFingerprint& env) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return CacheStatus::Miss;
    return it->second.env.compatible(env) ? CacheStatus::Hit : CacheStatus::Stale;
  }

  void put(const TuneReport& r) {
    CacheEntry e{r.key, r.winner, r.winner_median_ns, r.env, nlohmann::json::array()};
    for (const auto& c : r.candidates) {
      auto cj = config_to_json(c.config);
      cj["median_ns"] = c.median_ns;
      cj["max_rel_err"] = c.max_rel_err;
      cj["disqualified"] = c.disqualified;
      e.candidates.push_back(std::move(cj));
    }
    entries_[e.key] = std::move(e);
    if (!path_.empty()) save();
  }

  static nlohmann::json to_json(const CacheEntry& e) {
    return {{"key", e.key},
            {"winner", config_to_json(e.winner)},
            {"median_ns", e.median_ns},
            {"env", {{"vlen_bits", e.env.vlen_bits}, {"host", e.env.host}, {"workers", e.env.workers}}},
            {"candidates", e.candidates}};
  }

  /// Rewrites the file under an exclusive advisory lock on `<path>.lock`.
  void save() {
    const std::string lock_path = path_ + ".lock";
    const int fd = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd < 0) throw Error("cannot open lock file " + lock_path);
    if (::flock(fd, LOCK_EX) != 0) {
      ::close(fd);
      throw Error("cannot lock " + lock_path);
    }
    // Keep records another process added since this cache was loaded.
    std::map<std::string, CacheEntry> merged;
    try {
      merged = read_entries(path_);
    } catch (const FormatError&) {
      merged.clear();
    }
    for (const auto& [key, e] : entries_) merged[key] = e;
    const std::string tmp = path_ + ".tmp";
    {
      std::ofstream os(tmp, std::ios::trunc);
      for (const auto& [key, e] : merged) os << to_json(e).dump() << '\n';
      if (!os) {
        ::flock(fd, LOCK_UN);
        ::close(fd);
        throw Error("cannot write tune cache " + tmp);
      }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path_, ec);
    if (!ec) entries_ = std::move(merged);
    ::flock(fd, LOCK_UN);
    ::close(fd);
    if (ec) throw Error("cannot replace tune cache " + path_ + ": " + ec.message());
  }

 private:
  static std::map<std::string, CacheEntry> read_entries(const std::string& path) {
    std::map<std::string, CacheEntry> entries;
    std::ifstream is(path);
    if (!is) return entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        CacheEntry e;
        e.key = j.at("key").get<std::string>();
        e.env.vlen_bits = j.at("env").at("vlen_bits").get<unsigned>();
        e.env.host = j.at("env").at("host").get<std::string>();
        e.env.workers = j.at("env").value("workers", std::size_t{1});
        e.winner = config_from_json(j.at("winner"), e.env.vlen_bits);
        e.median_ns = j.at("median_ns").get<double>();
        e.candidates = j.value("candidates", nlohmann::json::array());
        entries[e.key] = std::move(e);
      } catch (const nlohmann::json::exception& ex) {
        throw FormatError("tune cache " + path + " line " + std::to_string(lineno) + ": " + ex.what());
      } catch (const ConfigError& ex) {
        throw FormatError("tune cache " + path + " line " + std::to_string(lineno) + ": " + ex.what());
      }
    }
    return entries;
  }

  std::string path_;
  std::map<std::string, CacheEntry> entries_;
};

}  // namespace cwnm
