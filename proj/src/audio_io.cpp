// src/audio_io.cpp

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

#include "mert/audio_io.hpp"

#include "mert/container.hpp"
#include "mert/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mert::audio_io {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

LoadedWav decode_wav(std::span<const std::uint8_t> bytes, std::string source_id) {
  container::ByteReader in(bytes);
  if (in.remaining() < 12) throw FormatError("file too short for a RIFF header", 0);
  if (in.bytes(4) != "RIFF") throw FormatError("missing RIFF tag", 0);
  in.u32();
  if (in.bytes(4) != "WAVE") throw FormatError("missing WAVE tag", 8);

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, block_align = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t fmt_offset = 0;

  while (in.remaining() >= 8) {
    const std::size_t chunk_start = in.offset();
    const std::string id = in.bytes(4);
    const std::uint32_t size = in.u32();
    if (size > in.remaining()) {
      throw FormatError("chunk '" + id + "' declares " + std::to_string(size) +
                            " bytes but only " + std::to_string(in.remaining()) + " remain",
                        chunk_start + 4);
    }
    const std::size_t body = in.offset();
    if (id == "fmt ") {
      if (size < 16) throw FormatError("fmt chunk shorter than 16 bytes", chunk_start + 4);
      fmt_offset = body;
      format = in.u16();
      channels = in.u16();
      rate = in.u32();
      in.u32();  // byte rate
      block_align = in.u16();
      bits = in.u16();
      if (format == kFormatExtensible) {
        if (size < 40) throw FormatError("extensible fmt chunk shorter than 40 bytes", body);
        in.u16();  // cbSize
        in.u16();  // valid bits
        in.u32();  // channel mask
        format = in.u16();
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk", chunk_start);
      const bool pcm16 = format == kFormatPcm && bits == 16;
      const bool float32 = format == kFormatFloat && bits == 32;
      if (!pcm16 && !float32) {
        throw UnsupportedCodecError("unsupported WAV encoding: format tag " +
                                    std::to_string(format) + " with " + std::to_string(bits) +
                                    " bits per sample");
      }
      if (channels < 1 || channels > 2) {
        throw UnsupportedCodecError("unsupported channel count " + std::to_string(channels));
      }
      if (rate == 0) throw FormatError("sample rate is zero", fmt_offset + 4);
      const std::size_t bytes_per_sample = bits / 8;
      if (block_align != channels * bytes_per_sample) {
        throw FormatError("block align " + std::to_string(block_align) +
                              " inconsistent with channels and bit depth",
                          fmt_offset + 12);
      }
      const std::size_t frames = size / block_align;
      if (frames == 0) throw FormatError("data chunk holds no sample frames", chunk_start);

      LoadedWav out;
      out.channels = channels;
      out.encoding = pcm16 ? WavEncoding::kPcm16 : WavEncoding::kFloat32;
      out.clip.sample_rate = static_cast<int>(rate);
      out.clip.source_id = std::move(source_id);
      out.clip.samples.resize(frames);
      for (std::size_t f = 0; f < frames; ++f) {
        double acc = 0.0;
        for (std::uint16_t c = 0; c < channels; ++c) {
          acc += pcm16 ? double(static_cast<std::int16_t>(in.u16())) / 32768.0 : double(in.f32());
        }
        double v = acc / channels;
        if (!std::isfinite(v)) {
          v = 0.0;
          ++out.clipped_samples;
        } else if (v > 1.0 || v < -1.0) {
          v = std::clamp(v, -1.0, 1.0);
          ++out.clipped_samples;
        }
        out.clip.samples[f] = v;
      }
      return out;
    }
    const std::size_t next = body + size + (size & 1u);
    in.seek(std::min(next, bytes.size()));
  }
  if (!have_fmt) throw FormatError("no fmt chunk found", in.offset());
  throw FormatError("no data chunk found", in.offset());
}

LoadedWav read_wav(const std::filesystem::path& path) {
  const auto bytes = container::read_file(path);
  return decode_wav(bytes, path.stem().string());
}

AudioClip load_wav(const std::filesystem::path& path) { return read_wav(path).clip; }

std::vector<std::uint8_t> encode_wav_float32(const AudioClip& clip) {
  container::ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 4);
  w.bytes("RIFF");
  w.u32(36 + data_bytes);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(kFormatFloat);
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(clip.sample_rate));
  w.u32(static_cast<std::uint32_t>(clip.sample_rate) * 4);
  w.u16(4);
  w.u16(32);
  w.bytes("data");
  w.u32(data_bytes);
  w.f32_array(std::span<const double>(clip.samples));
  return w.take();
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  container::write_file(path, encode_wav_float32(clip));
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

constexpr int kZeroCrossings = 32;
constexpr int kTableResolution = 2048;  // entries per zero crossing
constexpr double kKaiserBeta = 9.0;
constexpr double kCutoffFraction = 0.95;

/// Kaiser-windowed sinc sampled on u in [0, kZeroCrossings].
const std::vector<double>& sinc_table() {
  static const std::vector<double> table = [] {
    const std::size_t n = std::size_t(kZeroCrossings) * kTableResolution + 2;
    std::vector<double> t(n);
    const double i0_beta = std::cyl_bessel_i(0.0, kKaiserBeta);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = double(i) / kTableResolution;
      const double r = std::min(1.0, u / kZeroCrossings);
      const double window = std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      const double sinc = u == 0.0 ? 1.0 : std::sin(std::numbers::pi * u) / (std::numbers::pi * u);
      t[i] = sinc * window;
    }
    t[n - 1] = t[n - 2] = 0.0;
    return t;
  }();
  return table;
}

inline double windowed_sinc(double u) {
  u = std::abs(u);
  if (u >= kZeroCrossings) return 0.0;
  const auto& t = sinc_table();
  const double x = u * kTableResolution;
  const auto i = static_cast<std::size_t>(x);
  const double frac = x - double(i);
  return t[i] + frac * (t[i + 1] - t[i]);
}

}  // namespace

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target rate must be positive");
  if (clip.sample_rate <= 0) throw std::invalid_argument("resample: source rate must be positive");
  if (target_rate == clip.sample_rate) return clip;

  const double ratio = double(target_rate) / clip.sample_rate;
  const auto out_len = static_cast<std::size_t>(std::llround(double(clip.samples.size()) * ratio));
  const double fc = std::min(1.0, ratio) * kCutoffFraction;
  const double half_width = kZeroCrossings / fc;
  const auto n_in = static_cast<long long>(clip.samples.size());

  AudioClip out;
  out.sample_rate = target_rate;
  out.source_id = clip.source_id;
  out.samples.resize(out_len);
  for (std::size_t n = 0; n < out_len; ++n) {
    const double pos = double(n) / ratio;
    const long long lo = std::max(0LL, static_cast<long long>(std::ceil(pos - half_width)));
    const long long hi = std::min(n_in - 1, static_cast<long long>(std::floor(pos + half_width)));
    double acc = 0.0;
    for (long long k = lo; k <= hi; ++k) acc += clip.samples[k] * windowed_sinc(fc * (pos - k));
    out.samples[n] = std::clamp(fc * acc, -1.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation

Segmentation segment_clip(const AudioClip& clip, double seconds, SegmentMode mode,
                          std::uint64_t seed, std::size_t align) {
  if (!(seconds > 0.0)) throw std::invalid_argument("segment_clip: window must be positive");
  if (align == 0) align = 1;
  const auto window = static_cast<std::size_t>(std::llround(seconds * clip.sample_rate));
  if (window == 0) throw std::invalid_argument("segment_clip: window rounds to zero samples");

  auto cut = [&](std::size_t offset) {
    AudioClip seg;
    seg.sample_rate = clip.sample_rate;
    seg.source_id = clip.source_id;
    seg.samples.assign(window, 0.0);
    const std::size_t n = std::min(window, clip.samples.size() - std::min(offset, clip.samples.size()));
    std::copy_n(clip.samples.begin() + static_cast<std::ptrdiff_t>(offset), n, seg.samples.begin());
    return seg;
  };

  Segmentation out;
  if (clip.samples.size() < window) {
    out.padded = true;
    out.segments.push_back(cut(0));
    out.offsets.push_back(0);
    return out;
  }
  if (mode == SegmentMode::kRandom) {
    const std::size_t slots = (clip.samples.size() - window) / align;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, slots);
    const std::size_t offset = pick(rng) * align;
    out.segments.push_back(cut(offset));
    out.offsets.push_back(offset);
  } else {
    for (std::size_t off = 0; off + window <= clip.samples.size(); off += window) {
      out.segments.push_back(cut(off));
      out.offsets.push_back(off);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthesis

int hz_to_midi(double hz) { return static_cast<int>(std::lround(69.0 + 12.0 * std::log2(hz / 440.0))); }

double midi_to_hz(double midi) { return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0); }

namespace {

/// Sum of partials 1..harmonics with 1/h amplitudes, skipping partials at or
/// above Nyquist; unit peak bound (divided by the amplitude sum).
void add_harmonic_tone(std::vector<double>& out, double f0, int harmonics, double gain, int rate,
                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  double norm = 0.0;
  for (int h = 1; h <= std::max(1, harmonics); ++h) norm += 1.0 / h;
  for (int h = 1; h <= std::max(1, harmonics); ++h) {
    const double f = f0 * h;
    const double ph = phase(rng);
    if (f >= 0.5 * rate) continue;
    const double w = 2.0 * std::numbers::pi * f / rate;
    const double a = gain / (h * norm);
    for (std::size_t n = 0; n < out.size(); ++n) out[n] += a * std::sin(w * double(n) + ph);
  }
}

std::string format_seconds(double t) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << t;
  return os.str();
}

}  // namespace

SynthResult synth(const SynthSpec& spec, int sample_rate) {
  if (sample_rate <= 0) throw std::invalid_argument("synth: sample rate must be positive");
  if (!(spec.duration > 0.0)) throw std::invalid_argument("synth: duration must be positive");
  const double nyquist = 0.5 * sample_rate;
  const bool pitched = spec.kind == SynthKind::kSine || spec.kind == SynthKind::kHarmonicTone ||
                       spec.kind == SynthKind::kTriadChord;
  if (pitched && !(spec.fundamental > 0.0 && spec.fundamental < nyquist)) {
    throw std::invalid_argument("synth: fundamental " + std::to_string(spec.fundamental) +
                                " Hz must lie in (0, " + std::to_string(nyquist) + ")");
  }

  SynthResult r;
  r.clip.sample_rate = sample_rate;
  r.clip.samples.assign(
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.duration * sample_rate))),
      0.0);
  std::mt19937_64 rng(spec.seed);
  auto& x = r.clip.samples;
  const double amp = std::clamp(spec.amplitude, 0.0, 1.0);

  switch (spec.kind) {
    case SynthKind::kSine:
      add_harmonic_tone(x, spec.fundamental, 1, amp, sample_rate, rng);
      r.labels["pitch"] = std::to_string(hz_to_midi(spec.fundamental));
      r.labels["f0"] = format_seconds(spec.fundamental);
      break;
    case SynthKind::kHarmonicTone:
      add_harmonic_tone(x, spec.fundamental, spec.harmonics, amp, sample_rate, rng);
      r.labels["pitch"] = std::to_string(hz_to_midi(spec.fundamental));
      r.labels["f0"] = format_seconds(spec.fundamental);
      break;
    case SynthKind::kTriadChord: {
      const int third = spec.minor ? 3 : 4;
      for (int semis : {0, third, 7}) {
        const double f = spec.fundamental * std::pow(2.0, semis / 12.0);
        if (f >= nyquist) continue;
        add_harmonic_tone(x, f, spec.harmonics, amp / 3.0, sample_rate, rng);
      }
      r.labels["root"] = std::to_string(((hz_to_midi(spec.fundamental) % 12) + 12) % 12);
      r.labels["quality"] = spec.minor ? "minor" : "major";
      break;
    }
    case SynthKind::kClickTrack: {
      if (!(spec.beat_period > 0.0)) throw std::invalid_argument("synth: beat period must be positive");
      const auto count = static_cast<std::size_t>(std::ceil(spec.duration / spec.beat_period - 1e-9));
      const auto click_len = static_cast<std::size_t>(0.01 * sample_rate);
      std::uniform_real_distribution<double> noise(-1.0, 1.0);
      std::string beats;
      for (std::size_t b = 0; b < count; ++b) {
        const double t = double(b) * spec.beat_period;
        const auto start = static_cast<std::size_t>(std::llround(t * sample_rate));
        for (std::size_t i = 0; i < click_len && start + i < x.size(); ++i) {
          const double env = std::exp(-double(i) / (0.002 * sample_rate));
          x[start + i] += amp * env * noise(rng);
        }
        if (!beats.empty()) beats += ",";
        beats += format_seconds(t);
      }
      r.labels["beats"] = beats;
      break;
    }
    case SynthKind::kNoise: {
      std::uniform_real_distribution<double> noise(-amp, amp);
      for (auto& v : x) v = amp > 0.0 ? noise(rng) : 0.0;
      break;
    }
  }
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return r;
}

// ---------------------------------------------------------------------------
// Manifests

std::string ManifestRecord::source_id() const {
  if (auto it = labels.find("id"); it != labels.end()) return it->second;
  return std::filesystem::path(path).stem().string();
}

std::vector<ManifestRecord> parse_manifest(const std::string& text) {
  std::vector<ManifestRecord> records;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    ManifestRecord rec;
    const auto tab = line.find('\t');
    rec.path = line.substr(0, tab);
    if (rec.path.empty()) throw DataError("manifest line " + std::to_string(line_no) + ": empty path");
    if (tab != std::string::npos) {
      std::istringstream fields(line.substr(tab + 1));
      std::string field;
      while (std::getline(fields, field, ';')) {
        if (field.empty()) continue;
        const auto eq = field.find('=');
        if (eq == std::string::npos || eq == 0) {
          throw DataError("manifest line " + std::to_string(line_no) + ": label '" + field +
                          "' is not key=value");
        }
        rec.labels[field.substr(0, eq)] = field.substr(eq + 1);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  auto records = parse_manifest(container::read_text_file(path));
  // Relative paths resolve against the manifest's directory.
  for (auto& r : records) {
    std::filesystem::path p(r.path);
    if (p.is_relative()) r.path = (path.parent_path() / p).lexically_normal().string();
  }
  return records;
}

std::string format_manifest(std::span<const ManifestRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += r.path;
    out += '\t';
    bool first = true;
    for (const auto& [k, v] : r.labels) {
      if (!first) out += ';';
      out += k + "=" + v;
      first = false;
    }
    out += '\n';
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRecord> records) {
  container::write_text_file(path, format_manifest(records));
}

}  // namespace mert::audio_io
