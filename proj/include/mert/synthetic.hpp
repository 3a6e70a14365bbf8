// mert/synthetic.hpp

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

#ifndef MERT_SYNTHETIC_HPP_
#define MERT_SYNTHETIC_HPP_

#include "mert/audio_io.hpp"
#include "mert/probe.hpp"

#include <cstdint>
#include <string>
#include <vector>

// Deterministic synthetic corpora: a music-like pretraining set and four
// probe tasks with analytic labels.
namespace mert::synthetic {

struct CorpusOptions {
  std::size_t clips = 64;
  double seconds = 4.0;
  int sample_rate = audio_io::kCanonicalRate;
  std::uint64_t seed = 0;
};

/// Note and chord sequences over a soft pulse: harmonic tones with random
/// timbre and envelopes, sustained long enough to be predictable from context.
std::vector<audio_io::AudioClip> music_corpus(const CorpusOptions& options);

/// One labelled probe task. Labels follow ProbeData conventions: a class index
/// for multiclass, one value per frame for framewise, a real value for
/// regression. Splits are fixed by index (60 / 20 / 20 interleaved).
struct ProbeTask {
  std::string name;
  probe::TaskType type = probe::TaskType::kMulticlass;
  std::size_t classes = 0;
  std::vector<audio_io::AudioClip> clips;
  std::vector<std::vector<double>> labels;
  /// Event times in seconds (beat task only).
  std::vector<std::vector<double>> events;
  std::vector<std::size_t> train, valid, test;
};

struct TaskOptions {
  std::size_t per_class = 10;  // examples per class (clip count for the others)
  double seconds = 1.0;
  int sample_rate = audio_io::kCanonicalRate;
  std::uint64_t seed = 0;
};

/// 24 pitch classes (MIDI 48 to 71), harmonic tones of random timbre.
ProbeTask pitch_task(const TaskOptions& options);
/// 12 chord roots; random quality, inversion and octave.
ProbeTask chord_root_task(const TaskOptions& options);
/// Click tracks over a drone; per-frame beat labels at `frame_rate`.
ProbeTask beat_task(const TaskOptions& options, double frame_rate);
/// Label is the slope of a linear amplitude envelope, in [-1, 1].
ProbeTask arousal_task(const TaskOptions& options);

ProbeTask make_task(const std::string& name, const TaskOptions& options, double frame_rate = 75.0);

/// Assigns split indices 3:1:1 in index order.
void assign_splits(ProbeTask& task);

}  // namespace mert::synthetic

#endif  // MERT_SYNTHETIC_HPP_
