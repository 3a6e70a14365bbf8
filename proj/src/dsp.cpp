// src/dsp.cpp

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

#include "mert/dsp.hpp"

#include "mert/container.hpp"
#include "mert/errors.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mert::dsp {

using audio_io::AudioClip;

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kLogMel: return "logmel";
    case FeatureKind::kMfcc: return "mfcc";
    case FeatureKind::kChroma: return "chroma";
    case FeatureKind::kCqt: return "cqt";
    case FeatureKind::kStftMag: return "stft_mag";
    case FeatureKind::kEmbedding: return "embedding";
  }
  return "unknown";
}

FeatureKind feature_kind_from_string(const std::string& name) {
  for (auto k : {FeatureKind::kLogMel, FeatureKind::kMfcc, FeatureKind::kChroma, FeatureKind::kCqt,
                 FeatureKind::kStftMag, FeatureKind::kEmbedding}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown feature kind '" + name + "'");
}

FeatureMatrix FeatureMatrix::slice(std::size_t start, std::size_t count) const {
  if (start + count > frames) {
    throw std::out_of_range("FeatureMatrix::slice: rows [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") of " + std::to_string(frames));
  }
  FeatureMatrix out = *this;
  out.frames = count;
  out.values.assign(values.begin() + static_cast<std::ptrdiff_t>(start * dims),
                    values.begin() + static_cast<std::ptrdiff_t>((start + count) * dims));
  return out;
}

std::size_t teacher_frame_count(std::size_t samples, std::size_t hop) {
  return std::max<std::size_t>(1, samples / hop);
}

std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<long long>(2 * (n - 1));
  long long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long long>(n) ? m : period - m);
}

namespace {

std::vector<double> hann_periodic(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

/// Magnitude spectra of `frames` centred frames.
FeatureMatrix stft_frames(const AudioClip& clip, std::size_t window_size, std::size_t hop,
                          std::size_t frames) {
  if (window_size == 0 || hop == 0 || hop > window_size) {
    throw std::invalid_argument("stft: need window_size >= hop > 0");
  }
  if (clip.samples.empty()) throw std::invalid_argument("stft: empty clip");
  const std::size_t bins = window_size / 2 + 1;
  const auto window = hann_periodic(window_size);
  FeatureMatrix out;
  out.kind = FeatureKind::kStftMag;
  out.frames = frames;
  out.dims = bins;
  out.frame_rate = double(clip.sample_rate) / double(hop);
  out.values.resize(frames * bins);

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buf(window_size);
  std::vector<std::complex<double>> spec;
  const auto half = static_cast<long long>(window_size / 2);
  for (std::size_t t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t * hop) - half;
    for (std::size_t j = 0; j < window_size; ++j)
      buf[j] = window[j] * clip.samples[reflect_index(start + static_cast<long long>(j),
                                                      clip.samples.size())];
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k < bins; ++k) out.values[t * bins + k] = std::abs(spec[k]);
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

FeatureMatrix stft(const AudioClip& clip, std::size_t window_size, std::size_t hop) {
  if (hop == 0) throw std::invalid_argument("stft: hop must be positive");
  return stft_frames(clip, window_size, hop, 1 + clip.samples.size() / hop);
}

std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t n_fft,
                                                int sample_rate, double f_min, double f_max) {
  if (n_mels == 0) throw std::invalid_argument("mel_filterbank: n_mels must be >= 1");
  const double nyquist = 0.5 * sample_rate;
  if (f_max <= 0.0) f_max = nyquist;
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= nyquist)) {
    throw std::invalid_argument("mel_filterbank: need 0 <= f_min < f_max <= Nyquist");
  }
  const std::size_t bins = n_fft / 2 + 1;
  const double m_lo = hz_to_mel(f_min), m_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * double(i) / double(n_mels + 1));
  std::vector<std::vector<double>> bank(n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = double(k) * sample_rate / double(n_fft);
      const double w = std::min((f - lo) / (c - lo), (hi - f) / (hi - c));
      bank[m][k] = std::max(0.0, w);
    }
  }
  return bank;
}

FeatureMatrix log_mel(const AudioClip& clip, const LogMelOptions& options) {
  const std::size_t frames = teacher_frame_count(clip.samples.size(), options.hop);
  const FeatureMatrix mag = stft_frames(clip, options.n_fft, options.hop, frames);
  const auto bank =
      mel_filterbank(options.n_mels, options.n_fft, clip.sample_rate, options.f_min, options.f_max);
  FeatureMatrix out;
  out.kind = FeatureKind::kLogMel;
  out.frames = frames;
  out.dims = options.n_mels;
  out.frame_rate = mag.frame_rate;
  out.values.resize(frames * options.n_mels);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto spec = mag.row(t);
    for (std::size_t m = 0; m < options.n_mels; ++m) {
      double e = 0.0;
      const auto& w = bank[m];
      for (std::size_t k = 0; k < spec.size(); ++k) e += w[k] * spec[k] * spec[k];
      out.values[t * options.n_mels + m] = std::log1p(e);
    }
  }
  return out;
}

std::vector<double> dct_ii(std::span<const double> x, std::size_t n_coeffs) {
  const std::size_t n = x.size();
  if (n_coeffs > n) throw std::invalid_argument("dct_ii: more coefficients than inputs");
  std::vector<double> out(n_coeffs);
  for (std::size_t k = 0; k < n_coeffs; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += x[i] * std::cos(std::numbers::pi / double(n) * (double(i) + 0.5) * double(k));
    out[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / double(n));
  }
  return out;
}

FeatureMatrix stack_context(const FeatureMatrix& features, StackLayout layout) {
  FeatureMatrix out = features;
  out.dims = features.dims * layout.width();
  out.values.resize(features.frames * out.dims);
  const auto last = static_cast<long long>(features.frames) - 1;
  for (std::size_t t = 0; t < features.frames; ++t) {
    for (std::size_t j = 0; j < layout.width(); ++j) {
      const long long src = std::clamp(static_cast<long long>(t + j) -
                                           static_cast<long long>(layout.left),
                                       0LL, last);
      const auto row = features.row(static_cast<std::size_t>(src));
      std::copy(row.begin(), row.end(),
                out.values.begin() + static_cast<std::ptrdiff_t>(t * out.dims + j * features.dims));
    }
  }
  return out;
}

FeatureMatrix mfcc(const AudioClip& clip, std::size_t n_coeffs, std::size_t context_stack,
                   const LogMelOptions& options) {
  if (n_coeffs == 0 || n_coeffs > options.n_mels) {
    throw std::invalid_argument("mfcc: n_coeffs " + std::to_string(n_coeffs) +
                                " must lie in [1, n_mels = " + std::to_string(options.n_mels) + "]");
  }
  const FeatureMatrix mel = log_mel(clip, options);
  FeatureMatrix base;
  base.kind = FeatureKind::kMfcc;
  base.frames = mel.frames;
  base.dims = n_coeffs;
  base.frame_rate = mel.frame_rate;
  base.values.resize(mel.frames * n_coeffs);
  for (std::size_t t = 0; t < mel.frames; ++t) {
    const auto c = dct_ii(mel.row(t), n_coeffs);
    std::copy(c.begin(), c.end(), base.values.begin() + static_cast<std::ptrdiff_t>(t * n_coeffs));
  }
  if (context_stack == 0) return base;
  return stack_context(base, {context_stack, context_stack});
}

// ---------------------------------------------------------------------------
// Constant-Q

double CQTParams::q() const { return 1.0 / (std::pow(2.0, 1.0 / bins_per_octave) - 1.0); }

double CQTParams::center_frequency(int bin) const {
  return f_min * std::pow(2.0, double(bin) / bins_per_octave);
}

double CQTParams::f_max() const { return f_min * std::pow(2.0, double(n_bins) / bins_per_octave); }

CqtTransform::CqtTransform(const CQTParams& params, int sample_rate)
    : params_(params), sample_rate_(sample_rate) {
  if (sample_rate <= 0) throw std::invalid_argument("CqtTransform: sample rate must be positive");
  if (!(params.f_min > 0.0) || params.bins_per_octave < 1 || params.n_bins < 1 || params.hop == 0 ||
      !(params.log_floor > 0.0)) {
    throw std::invalid_argument("CqtTransform: invalid parameters");
  }
  if (!(params.f_max() < 0.5 * sample_rate)) {
    throw std::invalid_argument("CqtTransform: f_max " + std::to_string(params.f_max()) +
                                " Hz must be below Nyquist " + std::to_string(0.5 * sample_rate));
  }
  const double q = params.q();
  half_widths_.resize(params.n_bins);
  std::size_t max_h = 0;
  for (int k = 0; k < params.n_bins; ++k) {
    const double len = q * sample_rate / params.center_frequency(k);
    half_widths_[k] = std::max<std::size_t>(1, static_cast<std::size_t>(len / 2.0));
    max_h = std::max(max_h, half_widths_[k]);
  }
  fft_size_ = 1;
  while (fft_size_ < 2 * max_h + 1) fft_size_ <<= 1;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> buf(fft_size_), spec;
  kernels_.resize(params.n_bins);
  for (int k = 0; k < params.n_bins; ++k) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    const auto taps = kernel(k);
    const auto h = static_cast<long long>(half_widths_[k]);
    for (long long m = -h; m <= h; ++m)
      buf[static_cast<std::size_t>(static_cast<long long>(fft_size_ / 2) + m)] = taps[m + h];
    fft.fwd(spec, buf);
    double peak = 0.0;
    for (const auto& v : spec) peak = std::max(peak, std::abs(v));
    SparseKernel& sk = kernels_[k];
    for (std::size_t f = 0; f < spec.size(); ++f) {
      if (std::abs(spec[f]) >= params.sparsity_threshold * peak) {
        sk.index.push_back(static_cast<std::uint32_t>(f));
        sk.weight.push_back(std::conj(spec[f]) / double(fft_size_));
      }
    }
  }
}

std::vector<std::complex<double>> CqtTransform::kernel(int bin) const {
  const auto h = static_cast<long long>(half_widths_.at(bin));
  const double f = params_.center_frequency(bin);
  std::vector<std::complex<double>> taps(static_cast<std::size_t>(2 * h + 1));
  double wsum = 0.0;
  for (long long m = -h; m <= h; ++m)
    wsum += 0.5 * (1.0 + std::cos(std::numbers::pi * double(m) / double(h + 1)));
  for (long long m = -h; m <= h; ++m) {
    const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * double(m) / double(h + 1))) / wsum;
    const double ph = 2.0 * std::numbers::pi * f * double(m) / sample_rate_;
    taps[static_cast<std::size_t>(m + h)] = std::polar(w, ph);
  }
  return taps;
}

FeatureMatrix CqtTransform::magnitude(const AudioClip& clip) const {
  if (clip.samples.empty()) throw std::invalid_argument("cqt: empty clip");
  if (clip.sample_rate != sample_rate_) {
    throw std::invalid_argument("cqt: clip rate " + std::to_string(clip.sample_rate) +
                                " differs from transform rate " + std::to_string(sample_rate_));
  }
  const std::size_t frames = teacher_frame_count(clip.samples.size(), params_.hop);
  FeatureMatrix out;
  out.kind = FeatureKind::kCqt;
  out.frames = frames;
  out.dims = static_cast<std::size_t>(params_.n_bins);
  out.frame_rate = double(sample_rate_) / double(params_.hop);
  out.values.resize(frames * out.dims);

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> buf(fft_size_), spec;
  const auto half = static_cast<long long>(fft_size_ / 2);
  for (std::size_t t = 0; t < frames; ++t) {
    const long long start = static_cast<long long>(t * params_.hop) - half;
    for (std::size_t j = 0; j < fft_size_; ++j) {
      buf[j] = clip.samples[reflect_index(start + static_cast<long long>(j), clip.samples.size())];
    }
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k < out.dims; ++k) {
      const SparseKernel& sk = kernels_[k];
      std::complex<double> acc(0.0, 0.0);
      for (std::size_t i = 0; i < sk.index.size(); ++i) acc += spec[sk.index[i]] * sk.weight[i];
      out.values[t * out.dims + k] = std::abs(acc);
    }
  }
  return out;
}

FeatureMatrix CqtTransform::log_magnitude(const AudioClip& clip) const {
  FeatureMatrix m = magnitude(clip);
  for (auto& v : m.values) v = std::log(std::max(v, params_.log_floor));
  return m;
}

FeatureMatrix cqt(const AudioClip& clip, const CQTParams& params) {
  return CqtTransform(params, clip.sample_rate).log_magnitude(clip);
}

int pitch_class_of_frequency(double hz) {
  const long pc = std::lround(69.0 + 12.0 * std::log2(hz / 440.0)) % 12;
  return static_cast<int>((pc + 12) % 12);
}

FeatureMatrix chroma_from_cqt(const FeatureMatrix& cqt_magnitude, const CQTParams& params) {
  if (cqt_magnitude.dims != static_cast<std::size_t>(params.n_bins)) {
    throw std::invalid_argument("chroma: CQT has " + std::to_string(cqt_magnitude.dims) +
                                " bins, parameters say " + std::to_string(params.n_bins));
  }
  const int base_pc = pitch_class_of_frequency(params.f_min);
  FeatureMatrix out;
  out.kind = FeatureKind::kChroma;
  out.frames = cqt_magnitude.frames;
  out.dims = 12;
  out.frame_rate = cqt_magnitude.frame_rate;
  out.values.assign(out.frames * 12, 0.0);
  for (std::size_t t = 0; t < out.frames; ++t) {
    auto row = out.row(t);
    for (int k = 0; k < params.n_bins; ++k) {
      // Bins per octave other than 12 fold onto the nearest semitone.
      const int semis = static_cast<int>(std::lround(12.0 * k / params.bins_per_octave));
      row[static_cast<std::size_t>((base_pc + semis) % 12)] += cqt_magnitude.at(t, k);
    }
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      for (double& v : row) v /= norm;
    } else {
      std::fill(row.begin(), row.end(), 0.0);
    }
  }
  return out;
}

FeatureMatrix chroma(const AudioClip& clip, StackLayout layout, const CQTParams& params) {
  const CqtTransform transform(params, clip.sample_rate);
  const FeatureMatrix base = chroma_from_cqt(transform.magnitude(clip), params);
  if (layout.width() == 1) return base;
  return stack_context(base, layout);
}

// ---------------------------------------------------------------------------
// MERTFEAT container

std::vector<std::uint8_t> encode_features(const FeatureMatrix& features) {
  container::ByteWriter w;
  w.magic("MERTFEAT", 1);
  w.str(to_string(features.kind));
  w.u32(static_cast<std::uint32_t>(features.frames));
  w.u32(static_cast<std::uint32_t>(features.dims));
  w.f32(static_cast<float>(features.frame_rate));
  w.f32_array(std::span<const double>(features.values));
  return w.take();
}

FeatureMatrix decode_features(std::span<const std::uint8_t> bytes) {
  container::ByteReader r(bytes);
  r.expect_magic("MERTFEAT", 1);
  FeatureMatrix f;
  const std::size_t kind_offset = r.offset();
  try {
    f.kind = feature_kind_from_string(r.str());
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what(), kind_offset);
  }
  f.frames = r.u32();
  f.dims = r.u32();
  f.frame_rate = r.f32();
  const auto data = r.f32_array(f.frames * f.dims);
  f.values.assign(data.begin(), data.end());
  if (r.remaining() != 0) throw FormatError("trailing bytes after feature data", r.offset());
  return f;
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& features) {
  container::write_file(path, encode_features(features));
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  return decode_features(container::read_file(path));
}

}  // namespace mert::dsp
