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

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "cwnm/random.hpp"
#include "cwnm/tuner.hpp"

namespace cwnm {
namespace {

struct Fixture {
  LayerShape shape;
  Matrix weights;
  std::vector<float> bias;
  Tensor input;
};

Fixture small_layer(std::size_t cout = 8, std::uint64_t seed = 7) {
  TensorRng rng(seed);
  Fixture f;
  f.shape.geometry = ConvGeometry::make({1, 4, 6, 6}, 3, 3, 1, 1, 1, 1);
  f.shape.cout = cout;
  f.shape.n = 4;
  f.shape.m = 8;
  f.weights = rng.matrix(cout, f.shape.geometry.k());
  f.bias = rng.fill(cout);
  f.input = rng.tensor(f.shape.geometry.input_dims(), Layout::CNHW);
  return f;
}

TuneOptions quick_options() {
  TuneOptions o;
  o.repeats = 3;
  o.warmups = 1;
  return o;
}

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cwnm_test_tuner";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  std::filesystem::remove(p);
  return p.string();
}

std::set<std::size_t> ts_for(const std::vector<KernelConfig>& cs, unsigned lmul) {
  std::set<std::size_t> out;
  for (const auto& c : cs)
    if (c.env.lmul == lmul) out.insert(c.t);
  return out;
}

TEST(Enumerate, RegisterBudgetPerLmul) {
  const auto cs = enumerate_candidates(64);
  EXPECT_EQ(cs.size(), 31u + 15u + 7u + 3u);
  EXPECT_EQ(ts_for(cs, 8), (std::set<std::size_t>{1, 2, 3}));
  EXPECT_EQ(ts_for(cs, 4).size(), 7u);
  EXPECT_EQ(*ts_for(cs, 4).rbegin(), 7u);
  EXPECT_EQ(*ts_for(cs, 2).rbegin(), 15u);
  EXPECT_EQ(*ts_for(cs, 1).rbegin(), 31u);
  for (const auto& c : cs) {
    EXPECT_LE((c.t + 1) * c.env.lmul, 32u);
    EXPECT_EQ(c.kind, KernelKind::ColumnWise);
  }
}

TEST(Enumerate, CappedByRowsAndDeterministic) {
  const auto cs = enumerate_candidates(2);
  EXPECT_EQ(cs.size(), 8u);  // t in {1,2} for each of four lmuls
  for (const auto& c : cs) EXPECT_LE(c.t, 2u);
  EXPECT_EQ(enumerate_candidates(20), enumerate_candidates(20));
  EXPECT_THROW(enumerate_candidates(0), ConfigError);
  const auto inner = enumerate_candidates(4, {512, 1}, KernelKind::InnerProductNM);
  for (const auto& c : inner) {
    EXPECT_EQ(c.kind, KernelKind::InnerProductNM);
    EXPECT_EQ(c.env.vlen_bits, 512u);
  }
}

TEST(Tune, SingleCandidateAlwaysWins) {
  auto f = small_layer();
  auto opts = quick_options();
  const KernelConfig only{KernelKind::ColumnWise, 3, VectorEnv{256, 2}};
  opts.candidates = std::vector<KernelConfig>{only};
  const auto rep = tune_layer(f.shape, f.weights, f.bias, f.input, opts);
  ASSERT_EQ(rep.candidates.size(), 1u);
  EXPECT_EQ(rep.winner, only);
  EXPECT_FALSE(rep.candidates[0].disqualified);
  EXPECT_LE(rep.candidates[0].max_rel_err, 1e-4);
}

TEST(Tune, WinnerHasMinimalMedian) {
  auto f = small_layer();
  const auto rep = tune_layer(f.shape, f.weights, f.bias, f.input, quick_options());
  EXPECT_EQ(rep.candidates.size(), enumerate_candidates(8).size());
  for (const auto& c : rep.candidates) {
    EXPECT_FALSE(c.disqualified);
    EXPECT_GE(c.median_ns, rep.winner_median_ns);
    EXPECT_EQ(c.repeats, 3u);
  }
}

TEST(Tune, InjectedDelayFlipsWinner) {
  auto f = small_layer();
  auto opts = quick_options();
  const KernelConfig a{KernelKind::ColumnWise, 2, VectorEnv{256, 1}};
  const KernelConfig b{KernelKind::ColumnWise, 4, VectorEnv{256, 1}};
  opts.candidates = std::vector<KernelConfig>{a, b};
  for (const KernelConfig& slow : {a, b}) {
    opts.on_timed_run = [slow](const KernelConfig& c) {
      if (c == slow) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    };
    const auto rep = tune_layer(f.shape, f.weights, f.bias, f.input, opts);
    EXPECT_EQ(rep.winner, slow == a ? b : a);
  }
}

TEST(Tune, TiesBreakTowardSmallerTThenLmul) {
  const std::vector<TuneCandidate> cs{{{KernelKind::ColumnWise, 4, {256, 1}}, 10.0, 3, 0, 0.0, false},
                                      {{KernelKind::ColumnWise, 2, {256, 2}}, 10.0, 3, 0, 0.0, false},
                                      {{KernelKind::ColumnWise, 2, {256, 1}}, 10.0, 3, 0, 0.0, false},
                                      {{KernelKind::ColumnWise, 1, {256, 1}}, 5.0, 3, 0, 0.0, true},
                                      {{KernelKind::ColumnWise, 7, {256, 4}}, 11.0, 3, 0, 0.0, false}};
  const TuneCandidate* w = select_winner(cs);
  ASSERT_NE(w, nullptr);
  EXPECT_EQ(w->config.t, 2u);
  EXPECT_EQ(w->config.env.lmul, 1u);
  EXPECT_EQ(select_winner({cs[3]}), nullptr);
}

TEST(Tune, RejectsBadArguments) {
  auto f = small_layer();
  auto opts = quick_options();
  opts.repeats = 2;
  EXPECT_THROW(tune_layer(f.shape, f.weights, f.bias, f.input, opts), ConfigError);
  EXPECT_THROW(tune_layer(f.shape, Matrix(3, 3), f.bias, f.input, quick_options()), ShapeError);
}

TEST(Tune, DisqualifiesOutOfToleranceCandidates) {
  auto f = small_layer();
  auto opts = quick_options();
  opts.tolerance = -1.0;  // nothing can meet a negative bound
  opts.candidates = std::vector<KernelConfig>{{KernelKind::ColumnWise, 2, {256, 1}}};
  EXPECT_THROW(tune_layer(f.shape, f.weights, f.bias, f.input, opts), Error);
}

TEST(Cache, PutGetRoundTripThroughFile) {
  const std::string path = temp_path("roundtrip.jsonl");
  auto f = small_layer();
  auto opts = quick_options();
  opts.candidates = std::vector<KernelConfig>{{KernelKind::ColumnWise, 3, {256, 4}}};
  const auto rep = tune_layer(f.shape, f.weights, f.bias, f.input, opts);
  {
    TuneCache cache(path);
    EXPECT_EQ(cache.lookup(rep.key, rep.env), CacheStatus::Miss);
    cache.put(rep);
  }
  const TuneCache reloaded(path);
  ASSERT_EQ(reloaded.size(), 1u);
  const auto e = reloaded.get(rep.key);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->winner, rep.winner);
  EXPECT_DOUBLE_EQ(e->median_ns, rep.winner_median_ns);
  EXPECT_EQ(reloaded.lookup(rep.key, current_fingerprint()), CacheStatus::Hit);
  EXPECT_FALSE(reloaded.get("in=nothing"));
}

TEST(Cache, StaleFingerprintDetected) {
  const std::string path = temp_path("stale.jsonl");
  TuneReport r;
  r.key = "k";
  r.winner = {KernelKind::ColumnWise, 2, {256, 1}};
  r.winner_median_ns = 5.0;
  r.env = {256, 1, "other-host/cpus=1"};
  TuneCache cache(path);
  cache.put(r);
  EXPECT_EQ(cache.lookup("k", current_fingerprint()), CacheStatus::Stale);
  EXPECT_EQ(cache.lookup("k", {256, 1, "other-host/cpus=1"}), CacheStatus::Hit);
  EXPECT_EQ(cache.lookup("k", {512, 1, "other-host/cpus=1"}), CacheStatus::Stale);
}

TEST(Cache, CorruptFileIsAFormatError) {
  const std::string path = temp_path("corrupt.jsonl");
  std::ofstream(path) << "{\"key\": \"a\", \"winner\": {\"kind\": \"columnwise\"\n";
  EXPECT_THROW(TuneCache{path}, FormatError);
  std::ofstream(path, std::ios::trunc)
      << R"({"key":"a","winner":{"kind":"columnwise","t":9,"lmul":4},"median_ns":1,"env":{"vlen_bits":256,"host":"h"}})"
      << '\n';
  EXPECT_THROW(TuneCache{path}, FormatError);  // t=9 breaks the lmul=4 register budget
}

TEST(Cache, ConcurrentWritersKeepEachOthersRecords) {
  const std::string path = temp_path("merge.jsonl");
  TuneCache a(path), b(path);
  TuneReport r;
  r.winner = {KernelKind::ColumnWise, 1, {256, 1}};
  r.env = current_fingerprint();
  r.key = "first";
  a.put(r);
  r.key = "second";
  b.put(r);
  const TuneCache merged(path);
  EXPECT_TRUE(merged.get("first"));
  EXPECT_TRUE(merged.get("second"));
}

}  // namespace
}  // namespace cwnm
