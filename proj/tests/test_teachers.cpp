// tests/test_teachers.cpp

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

#include "mert/errors.hpp"
#include "mert/synthetic.hpp"
#include "mert/teachers.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <set>

using namespace mert;
using namespace mert::teachers;
using dsp::FeatureMatrix;

namespace {

FeatureMatrix gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  FeatureMatrix f;
  f.kind = dsp::FeatureKind::kLogMel;
  f.frames = n;
  f.dims = d;
  f.values.resize(n * d);
  for (auto& v : f.values) v = g(rng);
  return f;
}

// Brute-force nearest centroid, lowest index on ties.
std::size_t brute_nearest(std::span<const double> row, const Codebook& cb, double* dist) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cb.k; ++c) {
    double s = 0.0;
    for (std::size_t j = 0; j < cb.dim; ++j) s += (row[j] - cb.centroids[c * cb.dim + j]) * (row[j] - cb.centroids[c * cb.dim + j]);
    if (s < bd) {
      bd = s;
      best = c;
    }
  }
  if (dist) *dist = bd;
  return best;
}

}  // namespace

TEST_CASE("k-means inertia never increases and assignment is the exact nearest centroid") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto f = gaussian(400, 6, seed);
    KMeansOptions o;
    o.k = 12;
    o.seed = seed;
    const Codebook cb = kmeans_fit(f, o);
    REQUIRE(cb.inertia_trace.size() >= 2);
    for (std::size_t i = 1; i < cb.inertia_trace.size(); ++i)
      CHECK(cb.inertia_trace[i] <= cb.inertia_trace[i - 1] * (1.0 + 1e-12));
    const auto labels = kmeans_assign(f, cb);
    double inertia = 0.0;
    for (std::size_t t = 0; t < f.frames; ++t) {
      double d = 0.0;
      CHECK(labels[t] == brute_nearest(f.row(t), cb, &d));
      inertia += d;
    }
    CHECK(inertia == doctest::Approx(cb.inertia_trace.back()).epsilon(1e-9));
  }
}

TEST_CASE("k-means separates well-spaced blobs") {
  FeatureMatrix f;
  f.dims = 2;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.05);
  const double centres[3][2] = {{0, 0}, {10, 0}, {0, 10}};
  for (int i = 0; i < 150; ++i) {
    f.values.push_back(centres[i % 3][0] + g(rng));
    f.values.push_back(centres[i % 3][1] + g(rng));
  }
  f.frames = 150;
  KMeansOptions o;
  o.k = 3;
  const auto cb = kmeans_fit(f, o);
  const auto labels = kmeans_assign(f, cb);
  for (int i = 3; i < 150; ++i) CHECK(labels[std::size_t(i)] == labels[std::size_t(i % 3)]);
  CHECK(std::set<std::uint32_t>(labels.begin(), labels.end()).size() == 3);
}

TEST_CASE("k-means rejects degenerate data and is deterministic") {
  FeatureMatrix f;
  f.dims = 1;
  f.frames = 10;
  f.values = {1, 1, 2, 2, 3, 3, 1, 2, 3, 1};
  KMeansOptions o;
  o.k = 4;
  CHECK_THROWS_AS(kmeans_fit(f, o), DegenerateDataError);
  const auto g = gaussian(200, 4, 9);
  o.k = 5;
  o.seed = 42;
  CHECK(encode_codebook(kmeans_fit(g, o)) == encode_codebook(kmeans_fit(g, o)));
}

TEST_CASE("nearest_centroid breaks ties toward the lowest index") {
  const std::vector<double> centroids = {1.0, -1.0, 3.0};
  const std::vector<double> row = {0.0};
  const auto [idx, d] = nearest_centroid(row, centroids, 3);
  CHECK(idx == 0);
  CHECK(d == 1.0);
}

TEST_CASE("assignment dimension mismatch names both kinds") {
  KMeansOptions o;
  o.k = 3;
  auto cb = kmeans_fit(gaussian(50, 4, 1), o);
  cb.feature_kind = "logmel";
  FeatureMatrix chroma = gaussian(10, 5, 2);
  chroma.kind = dsp::FeatureKind::kChroma;
  try {
    kmeans_assign(chroma, cb);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("logmel") != std::string::npos);
    CHECK(msg.find("chroma") != std::string::npos);
  }
}

TEST_CASE("RVQ residual energy strictly decreases and matches the decoded residual") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto f = gaussian(500, 32, seed);
    RVQOptions o;
    o.stages = 4;
    o.k = 16;
    o.seed = seed;
    const RVQCodec codec = rvq_fit(f, o);
    REQUIRE(codec.residual_energy.size() == 4);
    for (std::size_t s = 1; s < 4; ++s) CHECK(codec.residual_energy[s] < codec.residual_energy[s - 1]);
    const auto tokens = rvq_encode(f, codec);
    CHECK(tokens.heads == 4);
    const auto rec = rvq_decode(tokens, codec);
    double mse = 0.0;
    for (std::size_t i = 0; i < f.values.size(); ++i) mse += (f.values[i] - rec.values[i]) * (f.values[i] - rec.values[i]);
    mse /= double(f.values.size());
    CHECK(mse == doctest::Approx(codec.residual_energy.back()).epsilon(1e-9));
  }
}

TEST_CASE("RVQ decode rejects out-of-vocabulary tokens") {
  RVQOptions o;
  o.stages = 2;
  o.k = 4;
  const auto codec = rvq_fit(gaussian(100, 3, 0), o);
  TokenMatrix t;
  t.frames = 1;
  t.heads = 2;
  t.tokens = {0, 4};
  CHECK_THROWS_AS(rvq_decode(t, codec), std::out_of_range);
}

TEST_CASE("codebook and codec containers round trip") {
  KMeansOptions o;
  o.k = 4;
  o.standardize = true;
  const auto cb = kmeans_fit(gaussian(80, 3, 5), o);
  const auto back = decode_codebook(encode_codebook(cb));
  CHECK(back.k == cb.k);
  CHECK(back.inertia_trace == cb.inertia_trace);
  CHECK(encode_codebook(back) == encode_codebook(cb));
  RVQOptions r;
  r.stages = 3;
  r.k = 4;
  const auto codec = rvq_fit(gaussian(80, 3, 6), r);
  const auto cb2 = decode_codec(encode_codec(codec));
  CHECK(cb2.stages.size() == 3);
  CHECK(cb2.residual_energy == codec.residual_energy);
  auto bytes = encode_codec(codec);
  bytes[8] = 9;
  CHECK_THROWS_AS(decode_codec(bytes), VersionError);
}

TEST_CASE("teacher targets align with the CQT target and survive serialisation") {
  synthetic::CorpusOptions co;
  co.clips = 3;
  co.seconds = 1.0;
  const auto clips = synthetic::music_corpus(co);
  TeacherConfig cfg;
  cfg.kmeans_heads = {{dsp::FeatureKind::kLogMel, 8}, {dsp::FeatureKind::kChroma, 6}};
  cfg.logmel.n_mels = 32;
  const Teacher teacher = fit_teacher(clips, cfg);
  CHECK(teacher.vocab_sizes() == std::vector<std::size_t>{8, 6});
  const auto bundle = build_targets(clips[0], teacher);
  CHECK(bundle.frames() == 75);
  CHECK(bundle.cqt_target.frames == 75);
  CHECK(bundle.cqt_target.dims == 84);
  for (auto tok : bundle.tokens.tokens) CHECK(tok < 8);
  const auto back = decode_targets(encode_targets(bundle));
  CHECK(back.tokens.tokens == bundle.tokens.tokens);
  CHECK(back.source_id == bundle.source_id);
  CHECK(back.vocab == bundle.vocab);
  const auto part = bundle.slice(10, 5);
  CHECK(part.frames() == 5);
  CHECK(part.tokens.at(0, 1) == bundle.tokens.at(10, 1));

  TeacherConfig rvq = cfg;
  rvq.kind = TeacherKind::kRvq;
  rvq.rvq_stages = 8;
  rvq.rvq_k = 4;
  const Teacher rt = fit_teacher(clips, rvq);
  CHECK(rt.num_heads() == 8);
  CHECK(build_targets(clips[1], rt).tokens.heads == 8);
}
