// tests/test_model.cpp

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
#include "mert/model.hpp"

#include <cmath>

using namespace mert;
using namespace mert::model;
using mert::testing::noise;
using mert::testing::tiny_model;

namespace {

// softmax(Q K^T / (sqrt(dh) c)) V per head, then the output projection.
std::vector<double> naive_attention(const Model<double>& m, const grad::Tensor<double>& x, std::size_t layer,
                                    double c) {
  const std::size_t L = x.rows(), d = x.cols(), H = m.config().n_heads, dh = d / H;
  auto lin = [&](const std::string& name, const std::vector<double>& in) {
    const auto& W = m.parameter(name + ".weight");
    const auto& b = m.parameter(name + ".bias");
    std::vector<double> out(L * d);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double s = b.at(0, j);
        for (std::size_t k = 0; k < d; ++k) s += in[i * d + k] * W.at(k, j);
        out[i * d + j] = s;
      }
    return out;
  };
  const std::vector<double> xin(x.values().begin(), x.values().end());
  const std::string p = "layer." + std::to_string(layer) + ".attn";
  const auto q = lin(p + ".q", xin), k = lin(p + ".k", xin), v = lin(p + ".v", xin);
  std::vector<double> merged(L * d, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> w(L);
      double mx = -1e300;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += q[i * d + h * dh + e] * k[j * d + h * dh + e];
        w[j] = s / (std::sqrt(double(dh)) * c);
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (auto& e : w) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t e = 0; e < dh; ++e) merged[i * d + h * dh + e] += w[j] / z * v[j * d + h * dh + e];
    }
  return lin(p + ".o", merged);
}

}  // namespace

TEST_CASE("five seconds at 24 kHz give 375 encoder frames") {
  const ModelConfig c;
  CHECK(c.total_stride() == 320);
  const Model<float> m(tiny_model());
  CHECK(m.frames_for(120000) == 375);
  CHECK(m.frames_for(319) == 0);
  CHECK(m.conv_encode(noise(24000, 1)).rows() == 75);
  CHECK_THROWS(m.conv_encode(noise(100, 1)));
}

TEST_CASE("parameter_count agrees with the allocated tensors") {
  for (const ModelConfig& c : {ModelConfig{}, tiny_model(3)}) {
    const Model<float> m(c);
    std::size_t n = 0;
    for (const auto& p : m.parameters()) n += p.tensor.size();
    CHECK(n == c.parameter_count());
    CHECK(m.parameter_count() == n);
  }
}

TEST_CASE("attention equals the naive oracle; relaxation divides the logits") {
  for (double c : {1.0, 4.0}) {
    ModelConfig cfg = tiny_model();
    cfg.attention_relaxation_c = c;
    const Model<double> m(cfg);
    const auto x = grad::Tensor<double>::constant({9, 32}, noise(9 * 32, 3, 1.0));
    const auto y = m.attention(x, 1);
    const auto want = naive_attention(m, x, 1, c);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.values()[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }
}

TEST_CASE("encoder exposes n_layers + 1 hidden states in both normalisation modes") {
  ModelConfig cfg = tiny_model(3);
  const auto x = noise(8000, 4);
  const Model<float> pre(cfg);
  cfg.ln_mode = LnMode::kPost;
  const Model<float> post(cfg);
  const auto a = pre.forward(x), b = post.forward(x);
  CHECK(a.hidden_states.size() == 4);
  CHECK(b.hidden_states.size() == 4);
  CHECK(a.final().rows() == pre.frames_for(8000));
  bool differ = false;
  for (std::size_t i = 0; i < a.final().size(); ++i) differ = differ || a.final().values()[i] != b.final().values()[i];
  CHECK(differ);
  CHECK(to_string(ln_mode_from_string("post")) == "post");
}

TEST_CASE("fully masked input no longer depends on the audio") {
  const Model<double> m(tiny_model());
  const std::size_t L = m.frames_for(4800);
  std::vector<std::size_t> all(L);
  for (std::size_t i = 0; i < L; ++i) all[i] = i;
  ForwardOptions o;
  o.masked = all;
  const auto a = m.forward(noise(4800, 5), o), b = m.forward(noise(4800, 6), o);
  for (std::size_t i = 0; i < a.final().size(); ++i) CHECK(a.final().values()[i] == doctest::Approx(b.final().values()[i]));
  std::vector<std::size_t> bad = {3, 1};
  o.masked = bad;
  CHECK_THROWS_AS(m.forward(noise(4800, 5), o), std::out_of_range);
}

TEST_CASE("acoustic logits are cosine similarities over tau") {
  const Model<double> m(tiny_model());
  const auto out = m.forward(noise(3200, 7));
  const auto logits = m.acoustic_logits(out.final(), 0);
  CHECK(logits.cols() == 10);
  for (double v : logits.values()) CHECK(std::abs(v) <= 1.0 / m.config().tau + 1e-9);
  CHECK(m.predict_cqt(out.final()).cols() == 12);
}

TEST_CASE("initialisation is seeded and checkpoints round trip") {
  ModelConfig cfg = tiny_model();
  cfg.init_seed = 3;
  const Model<float> a(cfg), b(cfg);
  CHECK(parameter_hash(a) == parameter_hash(b));
  cfg.init_seed = 4;
  const Model<float> c(cfg);
  CHECK(parameter_hash(a) != parameter_hash(c));

  Checkpoint ck;
  ck.config_text = "{}";
  ck.parameters = export_parameters(a);
  ck.step = 17;
  ck.rng_state = "1 2 3";
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.step == 17);
  CHECK(back.rng_state == "1 2 3");
  Model<float> d(cfg);
  import_parameters<float>(back.parameters, d);
  CHECK(parameter_hash(d) == parameter_hash(a));

  auto wrong = bytes;
  wrong[8] = 7;
  CHECK_THROWS_AS(decode_checkpoint(wrong), VersionError);
  auto missing = back.parameters;
  missing.pop_back();
  CHECK_THROWS_AS(import_parameters<float>(missing, d), DataError);
}

TEST_CASE("invalid configurations are rejected") {
  ModelConfig c = tiny_model();
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_model();
  c.head_vocab.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
