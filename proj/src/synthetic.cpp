// src/synthetic.cpp

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

#include "mert/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

namespace mert::synthetic {

namespace {

using audio_io::AudioClip;

struct Timbre {
  int harmonics = 4;
  double rolloff = 1.0;  // harmonic h has amplitude h^-rolloff
  double attack = 0.01;
  double release = 0.05;
};

Timbre random_timbre(std::mt19937_64& rng) {
  Timbre t;
  t.harmonics = std::uniform_int_distribution<int>(2, 8)(rng);
  t.rolloff = std::uniform_real_distribution<double>(0.6, 1.8)(rng);
  t.attack = std::uniform_real_distribution<double>(0.005, 0.03)(rng);
  t.release = std::uniform_real_distribution<double>(0.02, 0.1)(rng);
  return t;
}

// Adds a note of `dur` seconds at `start` seconds.
void add_note(std::vector<double>& x, int sr, double start, double dur, double hz, double amp,
              const Timbre& t, std::mt19937_64& rng) {
  const auto s0 = static_cast<std::size_t>(std::llround(start * sr));
  const auto n = static_cast<std::size_t>(std::llround(dur * sr));
  const double nyquist = 0.5 * sr;
  double norm = 0.0;
  for (int h = 1; h <= t.harmonics; ++h) norm += std::pow(h, -t.rolloff);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (int h = 1; h <= t.harmonics; ++h) {
    const double f = hz * h;
    if (f >= nyquist) break;
    const double a = amp * std::pow(h, -t.rolloff) / norm;
    const double ph = phase(rng);
    const double w = 2.0 * std::numbers::pi * f / sr;
    for (std::size_t i = 0; i < n && s0 + i < x.size(); ++i) {
      const double time = double(i) / sr;
      double env = 1.0;
      if (time < t.attack) env = time / t.attack;
      const double left = dur - time;
      if (left < t.release) env = std::min(env, std::max(0.0, left / t.release));
      x[s0 + i] += a * env * std::sin(w * double(i) + ph);
    }
  }
}

void add_click(std::vector<double>& x, int sr, double at, double amp, std::mt19937_64& rng) {
  const auto s0 = static_cast<std::size_t>(std::llround(at * sr));
  const auto len = static_cast<std::size_t>(0.01 * sr);
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  for (std::size_t i = 0; i < len && s0 + i < x.size(); ++i)
    x[s0 + i] += amp * std::exp(-double(i) / (0.002 * sr)) * noise(rng);
}

void finish(AudioClip& clip) {
  for (auto& v : clip.samples) v = std::clamp(v, -1.0, 1.0);
}

std::string clip_id(const std::string& prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04zu", prefix.c_str(), i);
  return buf;
}

}  // namespace

std::vector<AudioClip> music_corpus(const CorpusOptions& o) {
  if (o.clips == 0 || !(o.seconds > 0.0)) throw std::invalid_argument("music_corpus: empty corpus requested");
  std::vector<AudioClip> out;
  std::mt19937_64 rng(o.seed);
  static const int kMajor[] = {0, 2, 4, 5, 7, 9, 11};
  for (std::size_t c = 0; c < o.clips; ++c) {
    AudioClip clip;
    clip.sample_rate = o.sample_rate;
    clip.source_id = clip_id("music", c);
    clip.samples.assign(static_cast<std::size_t>(std::llround(o.seconds * o.sample_rate)), 0.0);
    const int tonic = std::uniform_int_distribution<int>(43, 60)(rng);
    const double beat = std::uniform_real_distribution<double>(0.3, 0.6)(rng);
    const Timbre lead = random_timbre(rng);
    const Timbre pad = random_timbre(rng);
    std::uniform_int_distribution<int> degree(0, 6);
    // Chords change every two beats, melody notes last one or two beats.
    for (double t = 0.0; t < o.seconds; t += 2.0 * beat) {
      const int d = degree(rng);
      const int root = tonic + kMajor[d];
      const int third = tonic + kMajor[(d + 2) % 7] + ((d + 2) >= 7 ? 12 : 0);
      const int fifth = tonic + kMajor[(d + 4) % 7] + ((d + 4) >= 7 ? 12 : 0);
      for (int m : {root, third, fifth})
        add_note(clip.samples, o.sample_rate, t, 2.0 * beat, audio_io::midi_to_hz(m), 0.12, pad, rng);
    }
    for (double t = 0.0; t < o.seconds;) {
      const double dur = beat * (std::bernoulli_distribution(0.5)(rng) ? 1.0 : 2.0);
      const int m = tonic + 12 + kMajor[degree(rng)];
      add_note(clip.samples, o.sample_rate, t, dur, audio_io::midi_to_hz(m), 0.25, lead, rng);
      t += dur;
    }
    for (double t = 0.0; t < o.seconds; t += beat) add_click(clip.samples, o.sample_rate, t, 0.15, rng);
    finish(clip);
    out.push_back(std::move(clip));
  }
  return out;
}

void assign_splits(ProbeTask& task) {
  task.train.clear();
  task.valid.clear();
  task.test.clear();
  for (std::size_t i = 0; i < task.clips.size(); ++i) {
    const std::size_t r = i % 5;
    (r < 3 ? task.train : r == 3 ? task.valid : task.test).push_back(i);
  }
}

namespace {

// Interleaves classes so every split sees each class.
template <typename F>
ProbeTask classification(const std::string& name, std::size_t classes, const TaskOptions& o, F render) {
  ProbeTask task;
  task.name = name;
  task.type = probe::TaskType::kMulticlass;
  task.classes = classes;
  std::mt19937_64 rng(o.seed);
  for (std::size_t r = 0; r < o.per_class; ++r)
    for (std::size_t k = 0; k < classes; ++k) {
      AudioClip clip;
      clip.sample_rate = o.sample_rate;
      clip.source_id = clip_id(name, task.clips.size());
      clip.samples.assign(static_cast<std::size_t>(std::llround(o.seconds * o.sample_rate)), 0.0);
      render(clip, k, rng);
      finish(clip);
      task.clips.push_back(std::move(clip));
      task.labels.push_back({double(k)});
    }
  assign_splits(task);
  return task;
}

}  // namespace

ProbeTask pitch_task(const TaskOptions& o) {
  return classification("pitch", 24, o, [&](AudioClip& clip, std::size_t k, std::mt19937_64& rng) {
    const double cents = std::uniform_real_distribution<double>(-20.0, 20.0)(rng);
    const double amp = std::uniform_real_distribution<double>(0.2, 0.6)(rng);
    add_note(clip.samples, clip.sample_rate, 0.0, o.seconds, audio_io::midi_to_hz(48.0 + double(k) + cents / 100.0),
             amp, random_timbre(rng), rng);
  });
}

ProbeTask chord_root_task(const TaskOptions& o) {
  return classification("chord_root", 12, o, [&](AudioClip& clip, std::size_t k, std::mt19937_64& rng) {
    const bool minor = std::bernoulli_distribution(0.5)(rng);
    const int inversion = std::uniform_int_distribution<int>(0, 2)(rng);
    const int base = 48 + 12 * std::uniform_int_distribution<int>(0, 1)(rng) + int(k);
    std::vector<int> notes = {base, base + (minor ? 3 : 4), base + 7};
    for (int i = 0; i < inversion; ++i) notes[static_cast<std::size_t>(i)] += 12;
    const Timbre t = random_timbre(rng);
    const double amp = std::uniform_real_distribution<double>(0.1, 0.2)(rng);
    for (int m : notes) add_note(clip.samples, clip.sample_rate, 0.0, o.seconds, audio_io::midi_to_hz(m), amp, t, rng);
  });
}

ProbeTask beat_task(const TaskOptions& o, double frame_rate) {
  ProbeTask task;
  task.name = "beat";
  task.type = probe::TaskType::kFramewise;
  task.classes = 2;
  std::mt19937_64 rng(o.seed);
  const auto frames = static_cast<std::size_t>(std::floor(o.seconds * frame_rate));
  for (std::size_t i = 0; i < o.per_class; ++i) {
    AudioClip clip;
    clip.sample_rate = o.sample_rate;
    clip.source_id = clip_id("beat", i);
    clip.samples.assign(static_cast<std::size_t>(std::llround(o.seconds * o.sample_rate)), 0.0);
    const double period = std::uniform_real_distribution<double>(0.3, 0.7)(rng);
    const double phase = std::uniform_real_distribution<double>(0.0, period)(rng);
    add_note(clip.samples, clip.sample_rate, 0.0, o.seconds,
             audio_io::midi_to_hz(std::uniform_int_distribution<int>(40, 64)(rng)), 0.1, random_timbre(rng), rng);
    std::vector<double> labels(frames, 0.0), events;
    for (double t = phase; t < o.seconds; t += period) {
      add_click(clip.samples, clip.sample_rate, t, 0.5, rng);
      const auto f = static_cast<std::size_t>(std::llround(t * frame_rate));
      if (f < frames) {
        labels[f] = 1.0;
        events.push_back(double(f) / frame_rate);
      }
    }
    finish(clip);
    task.clips.push_back(std::move(clip));
    task.labels.push_back(std::move(labels));
    task.events.push_back(std::move(events));
  }
  assign_splits(task);
  return task;
}

ProbeTask arousal_task(const TaskOptions& o) {
  ProbeTask task;
  task.name = "arousal";
  task.type = probe::TaskType::kRegression;
  task.classes = 0;
  std::mt19937_64 rng(o.seed);
  for (std::size_t i = 0; i < o.per_class; ++i) {
    AudioClip clip;
    clip.sample_rate = o.sample_rate;
    clip.source_id = clip_id("arousal", i);
    clip.samples.assign(static_cast<std::size_t>(std::llround(o.seconds * o.sample_rate)), 0.0);
    const double slope = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    add_note(clip.samples, clip.sample_rate, 0.0, o.seconds,
             audio_io::midi_to_hz(std::uniform_int_distribution<int>(48, 72)(rng)), 1.0, random_timbre(rng), rng);
    const std::size_t n = clip.samples.size();
    for (std::size_t s = 0; s < n; ++s) {
      const double u = double(s) / double(n);  // 0 .. 1
      clip.samples[s] *= 0.4 * (1.0 + slope * (2.0 * u - 1.0)) * 0.5 + 0.05;
    }
    finish(clip);
    task.clips.push_back(std::move(clip));
    task.labels.push_back({slope});
  }
  assign_splits(task);
  return task;
}

ProbeTask make_task(const std::string& name, const TaskOptions& options, double frame_rate) {
  if (name == "pitch") return pitch_task(options);
  if (name == "chord_root") return chord_root_task(options);
  if (name == "beat") return beat_task(options, frame_rate);
  if (name == "arousal") return arousal_task(options);
  throw std::invalid_argument("unknown probe task '" + name + "' (pitch, chord_root, beat, arousal)");
}

}  // namespace mert::synthetic
