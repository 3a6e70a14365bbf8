// tests/test_pretrain.cpp

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

#include "mert/errors.hpp"
#include "mert/pretrain.hpp"
#include "mert/synthetic.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace mert;
using namespace mert::pretrain;
using grad::Tensor;

namespace {

std::vector<TrainingExample> tiny_corpus(std::size_t clips = 6) {
  synthetic::CorpusOptions co;
  co.clips = clips;
  co.seconds = 1.0;
  const auto audio = synthetic::music_corpus(co);
  teachers::TeacherConfig tc;
  tc.kmeans_heads = {{dsp::FeatureKind::kLogMel, 10}, {dsp::FeatureKind::kChroma, 6}};
  tc.logmel.n_mels = 32;
  tc.cqt.n_bins = 12;
  tc.cqt.f_min = 110.0;
  const auto teacher = teachers::fit_teacher(audio, tc);
  std::vector<TrainingExample> out;
  for (const auto& a : audio) out.push_back({a, teachers::build_targets(a, teacher)});
  return out;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.batch_clips = 2;
  t.segment_seconds = 0.5;
  t.mask_prob = 0.2;
  t.lr = 1e-3;
  t.steps = 4;
  return t;
}

}  // namespace

TEST_CASE("mask spans are contiguous, clipped and deterministic") {
  const auto m = sample_mask(100, 5, 0.08, 3);
  CHECK(m.masked == sample_mask(100, 5, 0.08, 3).masked);
  for (std::size_t i = 1; i < m.masked.size(); ++i) CHECK(m.masked[i] > m.masked[i - 1]);
  for (auto t : m.masked) CHECK(t < 100);
  CHECK(sample_mask(50, 5, 0.0, 1).masked.empty());
  CHECK(sample_mask(50, 5, 1.0, 1).masked.size() == 50);
  CHECK_THROWS_AS(sample_mask(0, 5, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_mask(10, 0, 0.1, 1), std::invalid_argument);
}

TEST_CASE("empirical interior mask coverage matches 1 - (1 - p)^span") {
  const double want = expected_mask_coverage(5, 0.08);
  CHECK(want == doctest::Approx(1.0 - std::pow(0.92, 5)));
  std::size_t hits = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto m = sample_mask(200, 5, 0.08, seed);
    for (auto t : m.masked) hits += t >= 10 && t < 190;
    total += 180;
  }
  CHECK(double(hits) / double(total) == doctest::Approx(want).epsilon(0.03));
}

TEST_CASE("mixup at probability zero is the identity; one clip gives a notice") {
  std::vector<audio_io::AudioClip> batch = {testing::tone(220, 1.0), testing::tone(330, 1.0), testing::tone(440, 1.0)};
  MixupOptions o;
  o.prob = 0.0;
  const auto r = mixup(batch, o, 5);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(r.batch[i].samples == batch[i].samples);
    CHECK_FALSE(r.mixed[i]);
  }
  o.prob = 1.0;
  const auto single = mixup(std::span(batch).first(1), o, 5);
  CHECK_FALSE(single.notice.empty());
  CHECK(single.batch[0].samples == batch[0].samples);
}

TEST_CASE("mixup adds one gain-scaled excerpt of another clip") {
  std::vector<audio_io::AudioClip> batch = {testing::tone(220, 1.0, 0.3), testing::tone(330, 1.0, 0.3)};
  MixupOptions o;
  o.prob = 1.0;
  const auto r = mixup(batch, o, 11);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r.mixed[i]);
    std::size_t first = SIZE_MAX, last = 0;
    for (std::size_t s = 0; s < batch[i].samples.size(); ++s) {
      if (r.batch[i].samples[s] != batch[i].samples[s]) {
        first = std::min(first, s);
        last = s;
      }
    }
    REQUIRE(first != SIZE_MAX);
    const double seconds = double(last - first + 1) / 24000.0;
    CHECK(seconds <= 1.0 + 1e-9);
    // The added signal is a scaled copy of the donor: its ratio to the donor
    // is constant inside [gain_min, gain_max] at some offset.
    const auto& donor = batch[1 - i].samples;
    bool found = false;
    for (std::size_t off = 0; off + (last - first) < donor.size() && !found; ++off) {
      const double g = (r.batch[i].samples[first + 5] - batch[i].samples[first + 5]) / donor[off + 5];
      if (!(g >= o.gain_min - 1e-9 && g <= o.gain_max + 1e-9)) continue;
      bool ok = true;
      for (std::size_t s = first; s <= last && ok; s += 97) {
        const double add = r.batch[i].samples[s] - batch[i].samples[s];
        ok = std::abs(add - g * donor[off + (s - first)]) < 1e-9;
      }
      found = ok;
    }
    CHECK(found);
  }
}

TEST_CASE("NCE of uniform logits is ln k; a perfect match at tau 0.1 is near zero") {
  const std::size_t k = 37;
  const auto logits = Tensor<double>::constant({4, k}, std::vector<double>(4 * k, 0.3));
  const std::vector<std::uint32_t> targets = {0, 5, 36, 2};
  const std::vector<std::size_t> masked = {0, 1, 2, 3};
  CHECK(std::abs(nce_loss<double>(logits, targets, masked).item() - std::log(double(k))) <= 1e-12);

  // Target cosine 1, all others -1: loss = log(1 + (k - 1) e^{-2 / tau}).
  std::vector<double> l(4 * k, -1.0 / 0.1);
  for (std::size_t r = 0; r < 4; ++r) l[r * k + targets[r]] = 1.0 / 0.1;
  const double got = nce_loss<double>(Tensor<double>::constant({4, k}, l), targets, masked).item();
  CHECK(got == doctest::Approx(std::log1p(double(k - 1) * std::exp(-20.0))).epsilon(1e-9));
  CHECK(got <= 1e-6);

  std::string warn;
  const std::vector<std::size_t> none;
  CHECK(nce_loss<double>(logits, targets, none, &warn).item() == 0.0);
  CHECK_FALSE(warn.empty());
  const std::vector<std::uint32_t> bad = {0, 5, 37, 2};
  CHECK_THROWS_AS(nce_loss<double>(logits, bad, masked), std::out_of_range);
}

TEST_CASE("loss gradients pass finite differences") {
  const auto x = Tensor<double>::parameter({6, 5}, testing::noise(30, 1, 2.0));
  const std::vector<std::uint32_t> targets = {1, 0, 4, 4, 2, 3};
  const std::vector<std::size_t> masked = {1, 2, 5};
  grad::FiniteDiffOptions o;
  o.max_coordinates = 1000;
  const std::array<Tensor<double>, 1> px{x};
  CHECK(grad::finite_diff_check([&] { return nce_loss<double>(x, targets, masked); }, px, o).max_relative_error < 1e-5);
  dsp::FeatureMatrix target;
  target.kind = dsp::FeatureKind::kCqt;
  target.frames = 6;
  target.dims = 5;
  target.values = testing::noise(30, 2, 1.0);
  CHECK(grad::finite_diff_check([&] { return cqt_mse_loss<double>(x, target, masked); }, px, o).max_relative_error < 1e-5);

  double want = 0.0;
  for (auto t : masked)
    for (std::size_t b = 0; b < 5; ++b) want += std::pow(x.at(t, b) - target.at(t, b), 2) / 15.0;
  CHECK(cqt_mse_loss<double>(x, target, masked).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("total loss is alpha times the acoustic sum plus the weighted musical term") {
  const std::vector<Tensor<double>> ac = {Tensor<double>::scalar(1.5), Tensor<double>::scalar(2.0)};
  const auto mus = Tensor<double>::scalar(0.25);
  CHECK(total_loss<double>(ac, mus, 0.5, 3.0).item() == doctest::Approx(0.5 * 3.5 + 0.75));
}

TEST_CASE("clipping yields exactly min(norm, max)") {
  for (double scale : {0.01, 1.0, 50.0}) {
    std::vector<std::vector<double>> g = {testing::noise(100, 3, scale), testing::noise(7, 4, scale)};
    double oracle = 0.0;
    for (const auto& v : g)
      for (double e : v) oracle += e * e;
    oracle = std::sqrt(oracle);
    const double pre = clip_gradients(g, 1.0);
    CHECK(pre == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(std::abs(global_norm(g) - std::min(pre, 1.0)) <= 1e-12);
  }
}

TEST_CASE("head selection modes") {
  std::mt19937_64 rng(1);
  CHECK(select_heads(CodebookMode::kAll, 0, 3, rng) == std::vector<std::size_t>{0, 1, 2});
  CHECK(select_heads(CodebookMode::kSingle, 2, 3, rng) == std::vector<std::size_t>{2});
  std::set<std::size_t> seen;
  for (int i = 0; i < 50; ++i) {
    const auto h = select_heads(CodebookMode::kRandomPerBatch, 0, 3, rng);
    REQUIRE(h.size() == 1);
    seen.insert(h[0]);
  }
  CHECK(seen.size() == 3);
  CHECK_THROWS(select_heads(CodebookMode::kSingle, 3, 3, rng));
  CHECK(codebook_mode_from_string(to_string(CodebookMode::kRandomPerBatch)) == CodebookMode::kRandomPerBatch);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.mixup_prob = 1.5;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TrainConfig{};
  t.mixup_gain_min = 0.6;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t = TrainConfig{};
  t.batch_clips = 0;
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("loss report serialises non-finite values as null") {
  LossReport r;
  r.acoustic_per_head = {1.0, std::nan("")};
  const auto j = to_json(r);
  CHECK(j["acoustic"][1].is_null());
  CHECK(j["acoustic"][0] == 1.0);
}

TEST_CASE("trainer is deterministic and resumes bit-exactly") {
  const auto corpus = tiny_corpus();
  Trainer a(testing::tiny_model(), tiny_train(), corpus);
  Trainer b(testing::tiny_model(), tiny_train(), corpus);
  for (int i = 0; i < 2; ++i) {
    const auto ra = a.step(), rb = b.step();
    CHECK(ra.total == rb.total);
    CHECK(std::isfinite(ra.total));
    CHECK(ra.grad_norm_postclip <= 1.0 + 1e-12);
  }
  const auto ck = model::decode_checkpoint(model::encode_checkpoint(a.checkpoint()));
  Trainer c(testing::tiny_model(), tiny_train(), corpus);
  c.restore(ck);
  CHECK(c.step_count() == 2);
  for (int i = 0; i < 2; ++i) {
    const auto ra = a.step(), rc = c.step();
    CHECK(ra.total == rc.total);
  }
  CHECK(model::parameter_hash(a.model()) == model::parameter_hash(c.model()));
  CHECK(model::parameter_hash(a.model()) != model::parameter_hash(b.model()));
}

TEST_CASE("single-codebook mode trains one head and reports NaN for the rest") {
  auto t = tiny_train();
  t.codebook_mode = CodebookMode::kSingle;
  t.single_head = 1;
  Trainer tr(testing::tiny_model(), t, tiny_corpus(4));
  const auto r = tr.step();
  CHECK(r.selected_heads == std::vector<std::size_t>{1});
  CHECK(std::isnan(r.acoustic_per_head[0]));
  CHECK(std::isfinite(r.acoustic_per_head[1]));
}

TEST_CASE("the CQT head bias starts at the per-bin target mean") {
  const auto corpus = tiny_corpus(3);
  std::vector<double> mean(12, 0.0);
  double frames = 0.0;
  for (const auto& ex : corpus) {
    for (std::size_t t = 0; t < ex.targets.cqt_target.frames; ++t)
      for (std::size_t k = 0; k < 12; ++k) mean[k] += ex.targets.cqt_target.at(t, k);
    frames += double(ex.targets.cqt_target.frames);
  }
  auto bias_of = [](const Trainer& tr) {
    for (const auto& p : tr.model().parameters())
      if (p.name == "cqt_head.bias") return std::vector<float>(p.tensor.values().begin(), p.tensor.values().end());
    return std::vector<float>{};
  };
  const auto b = bias_of(Trainer(testing::tiny_model(), tiny_train(), corpus));
  REQUIRE(b.size() == 12);
  for (std::size_t k = 0; k < 12; ++k) CHECK(b[k] == doctest::Approx(mean[k] / frames).epsilon(1e-5));
  auto t = tiny_train();
  t.cqt_bias_from_targets = false;
  for (float v : bias_of(Trainer(testing::tiny_model(), t, corpus))) CHECK(v == 0.0f);
}

TEST_CASE("mixup does not touch the targets") {
  auto t = tiny_train();
  t.mixup_prob = 1.0;
  const auto corpus = tiny_corpus(4);
  Trainer tr(testing::tiny_model(), t, corpus);
  const Batch batch = tr.draw_batch();
  const auto prepared = tr.prepare(batch);
  for (std::size_t i = 0; i < prepared.targets.size(); ++i) {
    const auto& ex = corpus[batch.clips[i]];
    const auto want = ex.targets.slice(batch.offsets[i] / 320, prepared.targets[i].frames());
    CHECK(teachers::encode_targets(prepared.targets[i]) == teachers::encode_targets(want));
  }
}

TEST_CASE("pretraining run writes one log record per step and checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "mert_pretrain_run";
  std::filesystem::remove_all(dir);
  auto t = tiny_train();
  t.steps = 3;
  t.checkpoint_every = 2;
  Trainer tr(testing::tiny_model(), t, tiny_corpus(4));
  RunOptions o;
  o.log_path = dir / "log.ndjson";
  o.checkpoint_dir = dir;
  const auto reports = run_pretraining(tr, o);
  CHECK(reports.size() == 3);
  std::ifstream in(o.log_path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += !line.empty();
  CHECK(n == 3);
  CHECK(std::filesystem::exists(dir / "step_2.ckpt"));
  CHECK(std::filesystem::exists(dir / "final.ckpt"));
}

TEST_CASE("masked evaluation over windows covers every frame once") {
  const auto corpus = tiny_corpus(3);
  const model::Model<float> m(testing::tiny_model());
  const auto whole = evaluate_masked_prediction(m, corpus, corpus, 5, 0.2, 7);
  const auto wide = evaluate_masked_prediction(m, corpus, corpus, 5, 0.2, 7, 100.0);
  CHECK(wide.masked_frames == whole.masked_frames);
  CHECK(wide.accuracy_per_head == whole.accuracy_per_head);
  const auto pieces = evaluate_masked_prediction(m, corpus, corpus, 5, 0.9, 7, 0.2);
  std::size_t frames = 0;
  for (const auto& ex : corpus) frames += ex.targets.frames();
  CHECK(pieces.masked_frames > 0);
  CHECK(pieces.masked_frames <= frames);
  for (std::size_t j = 0; j < 2; ++j) CHECK(pieces.majority_baseline_per_head[j] >= 0.0);
  CHECK_THROWS_AS(evaluate_masked_prediction(m, corpus, corpus, 5, 0.2, 7, 0.001), std::invalid_argument);
}

TEST_CASE("match_targets names clips without targets") {
  auto corpus = tiny_corpus(2);
  std::vector<audio_io::AudioClip> clips = {corpus[0].clip, corpus[1].clip};
  std::vector<teachers::TargetBundle> targets = {corpus[0].targets};
  try {
    match_targets(clips, targets);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(corpus[1].clip.source_id) != std::string::npos);
  }
}
