// tests/helpers.hpp

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

#ifndef MERT_TESTS_HELPERS_HPP_
#define MERT_TESTS_HELPERS_HPP_

#include "mert/audio_io.hpp"
#include "mert/model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace mert::testing {

/// 75 Hz front end with narrow channels; 2 layers at d_model 32.
inline model::ModelConfig tiny_model(std::size_t layers = 2) {
  model::ModelConfig c;
  c.conv_layers = {{8, 10, 5}, {8, 8, 4}, {8, 4, 2}, {8, 4, 2}, {8, 4, 2}, {8, 2, 2}, {8, 2, 1}};
  c.d_model = 32;
  c.n_layers = layers;
  c.n_heads = 4;
  c.ffn_dim = 64;
  c.pos_conv_kernel = 16;
  c.pos_conv_groups = 4;
  c.head_vocab = {10, 6};
  c.codeword_dim = 8;
  c.cqt_bins = 12;
  return c;
}

inline std::vector<double> noise(std::size_t n, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amp, amp);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline audio_io::AudioClip tone(double hz, double seconds, double amp = 0.5, int rate = 24000) {
  audio_io::AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (std::size_t i = 0; i < c.samples.size(); ++i)
    c.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * double(i) / rate);
  return c;
}

}  // namespace mert::testing

#endif  // MERT_TESTS_HELPERS_HPP_
