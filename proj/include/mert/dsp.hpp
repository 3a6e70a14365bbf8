// mert/dsp.hpp

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

#ifndef MERT_DSP_HPP_
#define MERT_DSP_HPP_

#include "mert/audio_io.hpp"

#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mert::dsp {

/// Samples per model frame at 24 kHz (75 Hz frame rate).
inline constexpr std::size_t kTeacherHop = 320;

enum class FeatureKind { kLogMel, kMfcc, kChroma, kCqt, kStftMag, kEmbedding };

std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

/// frames x dims, row-major; row t is the frame centred at t * hop.
struct FeatureMatrix {
  FeatureKind kind = FeatureKind::kLogMel;
  std::size_t frames = 0;
  std::size_t dims = 0;
  double frame_rate = 75.0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t d) const { return values[t * dims + d]; }
  std::span<const double> row(std::size_t t) const { return {values.data() + t * dims, dims}; }
  std::span<double> row(std::size_t t) { return {values.data() + t * dims, dims}; }
  /// Rows [start, start + count).
  FeatureMatrix slice(std::size_t start, std::size_t count) const;
};

/// Frame count of teacher features for `samples` input samples:
/// max(1, samples / hop). Matches the convolutional encoder's frame count.
std::size_t teacher_frame_count(std::size_t samples, std::size_t hop = kTeacherHop);

/// Index into a reflect-padded signal of length n (edge samples not
/// repeated, mirrored as often as needed).
std::size_t reflect_index(long long i, std::size_t n);

/// Hann-windowed magnitude STFT (FFT size = window), frames centred on t * hop
/// with reflect padding. frames = 1 + len / hop, dims = window / 2 + 1.
FeatureMatrix stft(const audio_io::AudioClip& clip, std::size_t window_size, std::size_t hop);

struct LogMelOptions {
  std::size_t n_mels = 229;
  std::size_t n_fft = 2048;
  std::size_t hop = kTeacherHop;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 selects Nyquist
};

/// HTK-scale triangular filterbank over n_fft + 1 / 2 bins.
std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t n_fft,
                                                int sample_rate, double f_min, double f_max);

/// log(1 + mel power) on teacher frames.
FeatureMatrix log_mel(const audio_io::AudioClip& clip, const LogMelOptions& options = {});

/// Orthonormal DCT-II of `x`, first `n_coeffs` coefficients.
std::vector<double> dct_ii(std::span<const double> x, std::size_t n_coeffs);

/// Frames t - left ... t + right concatenated per row, edge frames replicated.
struct StackLayout {
  std::size_t left = 0;
  std::size_t right = 0;
  std::size_t width() const { return left + 1 + right; }
};

FeatureMatrix stack_context(const FeatureMatrix& features, StackLayout layout);

/// DCT-II of log-Mel rows, stacked +-context_stack frames:
/// dims = n_coeffs * (2 * context_stack + 1). Throws if n_coeffs > n_mels.
FeatureMatrix mfcc(const audio_io::AudioClip& clip, std::size_t n_coeffs,
                   std::size_t context_stack, const LogMelOptions& options = {});

struct CQTParams {
  double f_min = 32.70;
  int bins_per_octave = 12;
  int n_bins = 84;
  std::size_t hop = kTeacherHop;
  /// log(max(|X|, log_floor)).
  double log_floor = 1e-3;
  /// Spectral-kernel entries below this fraction of the bin's peak are dropped.
  double sparsity_threshold = 5e-4;

  double q() const;
  double center_frequency(int bin) const;
  double f_max() const;
};

/// Precomputed constant-Q analysis for one sample rate.
///
/// Bin k uses a Hann-windowed complex exponential at f_k of length
/// ~Q * sr / f_k, normalised so a sinusoid of amplitude A at f_k gives |X| of
/// about A / 2. Inner products are evaluated in the frequency domain against
/// sparse spectral kernels.
class CqtTransform {
 public:
  /// Throws std::invalid_argument when f_max is not below Nyquist or the
  /// parameters are otherwise invalid.
  CqtTransform(const CQTParams& params, int sample_rate);

  const CQTParams& params() const { return params_; }
  int sample_rate() const { return sample_rate_; }
  std::size_t fft_size() const { return fft_size_; }
  /// Half-width (samples) of bin k's kernel; taps are offsets -h..h.
  std::size_t half_width(int bin) const { return half_widths_[bin]; }
  /// Time-domain kernel taps a_k[m], m = -h..h (conjugated in the inner product).
  std::vector<std::complex<double>> kernel(int bin) const;

  /// Linear magnitudes, teacher frame count x n_bins.
  FeatureMatrix magnitude(const audio_io::AudioClip& clip) const;
  /// log(max(magnitude, floor)).
  FeatureMatrix log_magnitude(const audio_io::AudioClip& clip) const;

 private:
  struct SparseKernel {
    std::vector<std::uint32_t> index;
    std::vector<std::complex<double>> weight;  // conj(K[f]) / N
  };

  CQTParams params_;
  int sample_rate_;
  std::size_t fft_size_ = 0;
  std::vector<std::size_t> half_widths_;
  std::vector<SparseKernel> kernels_;
};

FeatureMatrix cqt(const audio_io::AudioClip& clip, const CQTParams& params = {});

/// Pitch class (0 = C) of CQT bin 0.
int pitch_class_of_frequency(double hz);

/// 12-bin pitch-class profile folded from CQT magnitudes, L2-normalised per
/// frame (zero frames stay zero). No stacking.
FeatureMatrix chroma_from_cqt(const FeatureMatrix& cqt_magnitude, const CQTParams& params);

/// Chroma stacked with `layout`; the default 10 left + 11 right gives 264 dims.
FeatureMatrix chroma(const audio_io::AudioClip& clip, StackLayout layout = {10, 11},
                     const CQTParams& params = {});

// `MERTFEAT` v1 container: magic, u32 version, kind string, u32 frames,
// u32 dims, f32 frame_rate, frames * dims float32 row-major.
std::vector<std::uint8_t> encode_features(const FeatureMatrix& features);
FeatureMatrix decode_features(std::span<const std::uint8_t> bytes);
void write_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_features(const std::filesystem::path& path);

}  // namespace mert::dsp

#endif  // MERT_DSP_HPP_
