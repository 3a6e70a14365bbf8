// tests/test_probe.cpp

// Copyright 2026 The mert-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "doctest.h"

#include "helpers.hpp"
#include "oracles.hpp"

#include "mert/errors.hpp"
#include "mert/probe.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace mert;
using namespace mert::probe;
using namespace mert::testing;

namespace {

// Scores on a coarse grid so ties are common.
void random_scored(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& y) {
  std::uniform_int_distribution<std::size_t> len(2, 30);
  std::uniform_int_distribution<int> grid(0, 6), bit(0, 1);
  do {
    const std::size_t n = len(rng);
    s.assign(n, 0.0);
    y.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = grid(rng) * 0.25;
      y[i] = bit(rng);
    }
  } while (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0);
}

ProbeSplits blobs(std::size_t classes, std::size_t per_split, double spread, std::uint64_t seed,
                  bool shuffle_labels = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, spread);
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  ProbeSplits s;
  for (ProbeData* d : {&s.train, &s.valid, &s.test}) {
    d->dim = 6;
    for (std::size_t i = 0; i < per_split; ++i) {
      const std::size_t c = i % classes;
      std::vector<double> x(6);
      for (std::size_t j = 0; j < 6; ++j) x[j] = (j == c ? 3.0 : 0.0) + g(rng);
      const double label = double(shuffle_labels ? pick(rng) : c);
      d->append(x, std::vector<double>{label});
    }
  }
  return s;
}

ProbeConfig quick_config() {
  ProbeConfig c;
  c.hidden_units = 16;
  c.batch_size = 16;
  c.lr_grid = {1e-3, 1e-2};
  c.max_epochs = 40;
  return c;
}

}  // namespace

TEST_CASE("ROC-AUC matches the pairwise oracle exactly") {
  std::mt19937_64 rng(1);
  std::vector<double> s;
  std::vector<int> y;
  for (int c = 0; c < 100; ++c) {
    random_scored(rng, s, y);
    CHECK(metric_roc_auc(s, y) == oracle_roc_auc(s, y));
  }
  const std::vector<double> one = {0.1, 0.2};
  const std::vector<int> same = {1, 1};
  CHECK_THROWS_AS(metric_roc_auc(one, same), std::invalid_argument);
}

TEST_CASE("average precision matches the per-positive oracle") {
  std::mt19937_64 rng(2);
  std::vector<double> s;
  std::vector<int> y;
  for (int c = 0; c < 100; ++c) {
    random_scored(rng, s, y);
    CHECK(std::abs(metric_average_precision(s, y) - oracle_average_precision(s, y)) <= 1e-12);
  }
}

TEST_CASE("macro metrics skip single-class tags") {
  // 3 rows x 2 tags; tag 1 is all positive.
  const std::vector<double> scores = {0.9, 0.1, 0.2, 0.4, 0.6, 0.5};
  const std::vector<int> labels = {1, 1, 0, 1, 1, 1};
  const auto m = metric_macro_roc_auc(scores, labels, 2);
  CHECK(m.included == 1);
  CHECK(m.excluded == 1);
  CHECK(m.value == oracle_roc_auc({0.9, 0.2, 0.6}, {1, 0, 1}));
  const std::vector<int> none = {1, 1, 1, 1, 1, 1};
  CHECK(std::isnan(metric_macro_average_precision(scores, none, 2).value));
}

TEST_CASE("key names round trip and credits follow the scale relations") {
  for (int t = 0; t < 12; ++t)
    for (bool minor : {false, true}) {
      const Key k{t, minor};
      CHECK(Key::parse(k.str()) == k);
    }
  CHECK(Key::parse("Bb major") == Key{10, false});
  CHECK(Key::parse("c# minor") == Key{1, true});
  CHECK_THROWS(Key::parse("H major"));
  CHECK(key_credit(Key{7, false}, Key{0, false}) == 0.5);
  CHECK(key_credit(Key{5, false}, Key{0, false}) == 0.0);
  CHECK(key_credit(Key{9, true}, Key{0, false}) == 0.3);
  CHECK(key_credit(Key{0, true}, Key{0, false}) == 0.2);
  for (int a = 0; a < 24; ++a)
    for (int b = 0; b < 24; ++b) {
      const Key p{a % 12, a >= 12}, t{b % 12, b >= 12};
      CHECK(key_credit(p, t) == oracle_key_credit(p, t));
    }
}

TEST_CASE("refined key accuracy matches the oracle on random instances") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 30);
  std::uniform_int_distribution<int> key(0, 23);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = len(rng);
    std::vector<Key> p(n), t(n);
    double want = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = key(rng), b = key(rng) % 3 == 0 ? a : key(rng);
      p[i] = {a % 12, a >= 12};
      t[i] = {b % 12, b >= 12};
      want += oracle_key_credit(p[i], t[i]);
    }
    CHECK(metric_refined_key_accuracy(p, t) == want / double(n));
  }
}

TEST_CASE("beat F-measure equals the exhaustive maximum matching") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> len(0, 15);
  std::uniform_real_distribution<double> when(0.0, 0.3);
  for (int c = 0; c < 100; ++c) {
    std::vector<double> p(len(rng)), t(len(rng));
    for (auto& v : p) v = when(rng);
    for (auto& v : t) v = when(rng);
    CHECK(metric_beat_f_measure(p, t) == oracle_beat_f_measure(p, t));
  }
  // Closest-pair-first would match only one of these.
  CHECK(metric_beat_f_measure({0.018, 0.054}, {0.0, 0.035}) == 1.0);
  CHECK(metric_beat_f_measure({}, {}) == 1.0);
  CHECK(metric_beat_f_measure({}, {0.5}) == 0.0);
}

TEST_CASE("peak picking keeps local maxima above the threshold") {
  const std::vector<double> p = {0.1, 0.8, 0.8, 0.2, 0.6, 0.9, 0.3, 0.4};
  const auto e = pick_events(p, 10.0);
  REQUIRE(e.size() == 2);
  CHECK(e[0] == doctest::Approx(0.1));
  CHECK(e[1] == doctest::Approx(0.5));
}

TEST_CASE("r2 matches one minus the residual ratio") {
  const std::vector<double> y = {1.0, 2.0, 4.0, 3.0}, p = {1.5, 2.0, 3.0, 3.5};
  const double mean = 2.5;
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    res += (y[i] - p[i]) * (y[i] - p[i]);
    tot += (y[i] - mean) * (y[i] - mean);
  }
  CHECK(metric_r2(p, y) == doctest::Approx(1.0 - res / tot).epsilon(1e-12));
  const std::vector<double> flat = {2.0, 2.0, 2.0, 2.0};
  CHECK_THROWS_AS(metric_r2(p, flat), DegenerateDataError);
}

TEST_CASE("layer specs parse") {
  CHECK(LayerSpec::parse("final").mode == LayerMode::kFinal);
  CHECK(LayerSpec::parse("average").mode == LayerMode::kAverage);
  CHECK(LayerSpec::parse("3").index == 3);
  CHECK(LayerSpec::parse("3").str() == "3");
  CHECK_THROWS(LayerSpec::parse("-1"));
}

TEST_CASE("the probe separates blobs and stays at chance on shuffled labels") {
  const auto good = train_probe(blobs(4, 80, 0.5, 1), TaskType::kMulticlass, 4, quick_config(), "blobs");
  CHECK(good.metric == "accuracy");
  CHECK(good.test_metric >= 0.95);
  CHECK(good.trials.size() == 2);
  const auto noise = train_probe(blobs(4, 80, 0.5, 1, true), TaskType::kMulticlass, 4, quick_config(), "shuffled");
  CHECK(noise.test_metric <= 0.5);
}

TEST_CASE("probe training is deterministic") {
  const auto a = train_probe(blobs(3, 30, 1.0, 2), TaskType::kMulticlass, 3, quick_config());
  const auto b = train_probe(blobs(3, 30, 1.0, 2), TaskType::kMulticlass, 3, quick_config());
  CHECK(a.test_metric == b.test_metric);
  CHECK(a.best_lr == b.best_lr);
}

TEST_CASE("a single-class training split is a data error naming the task") {
  auto s = blobs(3, 30, 1.0, 3);
  for (auto& v : s.train.y) v = 1.0;
  try {
    train_probe(s, TaskType::kMulticlass, 3, quick_config(), "mono");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("mono") != std::string::npos);
  }
}

TEST_CASE("regression probe fits a linear target") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  ProbeSplits s;
  for (ProbeData* d : {&s.train, &s.valid, &s.test}) {
    d->dim = 4;
    for (int i = 0; i < 120; ++i) {
      std::vector<double> x(4);
      for (auto& v : x) v = g(rng);
      d->append(x, std::vector<double>{x[0] - 0.5 * x[2]});
    }
  }
  const auto r = train_probe(s, TaskType::kRegression, 1, quick_config());
  CHECK(r.metric == "r2");
  CHECK(r.test_metric > 0.9);
}

TEST_CASE("embedding extraction windows, pads and leaves the model untouched") {
  const model::Model<float> m(tiny_model());
  const auto before = model::parameter_hash(m);
  EmbeddingOptions o;
  o.window_seconds = 0.5;
  const auto e = extract_embeddings(m, tone(440, 1.3), o);
  CHECK(e.windows == 2);
  CHECK_FALSE(e.padded);
  CHECK(e.pooled.size() == 32);
  CHECK(e.frames.frames == 2 * m.frames_for(12000));
  CHECK(e.frames.dims == 32);
  const auto short_clip = extract_embeddings(m, tone(440, 0.2), o);
  CHECK(short_clip.padded);
  CHECK(short_clip.windows == 1);
  CHECK(short_clip.frames.frames == m.frames_for(4800));
  o.layer = LayerSpec::parse("average");
  const auto avg = extract_embeddings(m, tone(440, 1.0), o);
  CHECK(avg.pooled.size() == 32);
  CHECK(model::parameter_hash(m) == before);

  // Pooled vector is the mean of the per-window frame means.
  o.layer = LayerSpec{};
  o.window_seconds = 1.0;
  const auto one = extract_embeddings(m, tone(220, 1.0), o);
  std::vector<double> mean(32, 0.0);
  for (std::size_t t = 0; t < one.frames.frames; ++t)
    for (std::size_t j = 0; j < 32; ++j) mean[j] += one.frames.at(t, j) / double(one.frames.frames);
  for (std::size_t j = 0; j < 32; ++j) CHECK(one.pooled[j] == doctest::Approx(mean[j]).epsilon(1e-9));
}
