// mert/audio_io.hpp

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

#ifndef MERT_AUDIO_IO_HPP_
#define MERT_AUDIO_IO_HPP_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mert::audio_io {

/// Every feature and teacher in the pipeline runs at this rate.
inline constexpr int kCanonicalRate = 24000;

struct AudioClip {
  std::vector<double> samples;  // mono, within [-1, 1]
  int sample_rate = kCanonicalRate;
  std::string source_id;

  double duration() const { return double(samples.size()) / sample_rate; }
};

enum class WavEncoding { kPcm16, kFloat32 };

struct LoadedWav {
  AudioClip clip;
  int channels = 1;
  WavEncoding encoding = WavEncoding::kPcm16;
  /// Samples outside [-1, 1] or non-finite, clamped on load.
  std::size_t clipped_samples = 0;
};

/// Parses a RIFF/WAVE image (PCM16 or float32, 1-2 channels). Stereo is
/// averaged to mono. Throws FormatError / UnsupportedCodecError.
LoadedWav decode_wav(std::span<const std::uint8_t> bytes, std::string source_id);
LoadedWav read_wav(const std::filesystem::path& path);
AudioClip load_wav(const std::filesystem::path& path);

/// Mono float32 WAV image / file.
std::vector<std::uint8_t> encode_wav_float32(const AudioClip& clip);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

/// Band-limited (Kaiser-windowed sinc) resampling. Output length is
/// round(len * target / source); equal rates return the input unchanged.
AudioClip resample(const AudioClip& clip, int target_rate);

enum class SegmentMode { kRandom, kSequential };

struct Segmentation {
  std::vector<AudioClip> segments;
  std::vector<std::size_t> offsets;  // start sample of each segment
  bool padded = false;               // clip shorter than the window, zero-padded
};

/// Cuts fixed-length windows of round(seconds * rate) samples. Random mode
/// yields one window whose start is a multiple of `align`; sequential mode
/// tiles the clip and drops the short remainder.
Segmentation segment_clip(const AudioClip& clip, double seconds, SegmentMode mode,
                          std::uint64_t seed, std::size_t align = 1);

enum class SynthKind { kSine, kHarmonicTone, kTriadChord, kClickTrack, kNoise };

struct SynthSpec {
  SynthKind kind = SynthKind::kSine;
  double fundamental = 440.0;  // Hz; chord root for triads
  double duration = 1.0;       // seconds
  double amplitude = 0.5;      // peak
  int harmonics = 1;
  double beat_period = 0.5;  // click tracks
  bool minor = false;        // triad quality
  std::uint64_t seed = 0;
};

/// Label record keyed like manifest labels (e.g. "pitch", "root", "beats").
using Labels = std::map<std::string, std::string>;

struct SynthResult {
  AudioClip clip;
  Labels labels;
};

/// Deterministic test-signal generator. Throws std::invalid_argument when the
/// fundamental is at or above Nyquist.
SynthResult synth(const SynthSpec& spec, int sample_rate = kCanonicalRate);

/// MIDI note number nearest to `hz` (A4 = 440 Hz = 69).
int hz_to_midi(double hz);
double midi_to_hz(double midi);

// Corpus manifests: one record per line, `<path>\t<key>=<value>;<key>=<value>...`.

struct ManifestRecord {
  std::string path;
  Labels labels;

  /// labels["id"] when present, else the file stem.
  std::string source_id() const;
};

std::vector<ManifestRecord> parse_manifest(const std::string& text);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
std::string format_manifest(std::span<const ManifestRecord> records);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records);

}  // namespace mert::audio_io

#endif  // MERT_AUDIO_IO_HPP_
