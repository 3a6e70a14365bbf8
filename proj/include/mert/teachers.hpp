// mert/teachers.hpp

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

#ifndef MERT_TEACHERS_HPP_
#define MERT_TEACHERS_HPP_

#include "mert/audio_io.hpp"
#include "mert/dsp.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Acoustic teachers: K-means codebooks over frame features and a residual
// k-means codec, plus per-clip target bundles.
namespace mert::teachers {

/// Per-dimension standardisation x' = (x - mean) * inv_std. Empty means
/// identity.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> inv_std;

  bool enabled() const { return !mean.empty(); }
  /// Statistics of the rows of `rows`; dimensions with std < 1e-8 get inv_std 1.
  static Standardization fit(const dsp::FeatureMatrix& rows);
  void apply(std::span<const double> in, std::span<double> out) const;
  dsp::FeatureMatrix apply(const dsp::FeatureMatrix& features) const;
};

struct Codebook {
  std::string feature_kind;
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim, sorted by first coordinate
  Standardization stats;
  /// Inertia (sum of squared distances) after each assignment step.
  std::vector<double> inertia_trace;

  std::span<const double> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }
};

struct KMeansOptions {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  /// Stop once the centroid shift norm falls below tol times the centroid norm.
  double tol = 1e-6;
  bool standardize = false;
  /// Fit on a seeded random subset of at most this many rows (0 = all).
  std::size_t max_rows = 0;
};

/// k-means++ seeding then Lloyd iterations. Empty clusters are re-seeded at the
/// point farthest from its centroid. Throws DegenerateDataError with fewer than
/// k distinct rows.
Codebook kmeans_fit(const dsp::FeatureMatrix& features, const KMeansOptions& options);

/// Index of the nearest centroid to an already standardised row (lowest index
/// on ties) and its squared distance.
std::pair<std::uint32_t, double> nearest_centroid(std::span<const double> row,
                                                  std::span<const double> centroids,
                                                  std::size_t k);

/// Nearest centroid per frame; features are standardised with the codebook's
/// stats first. Throws std::invalid_argument on a dimension mismatch.
std::vector<std::uint32_t> kmeans_assign(const dsp::FeatureMatrix& features,
                                         const Codebook& codebook);

/// Residual k-means codec: stage j quantises what stages < j left over.
struct RVQCodec {
  std::string feature_kind;
  std::size_t dim = 0;
  Standardization stats;
  std::vector<Codebook> stages;  // each without its own stats
  /// Mean squared residual per element after each stage on the fitting data,
  /// in standardised units.
  std::vector<double> residual_energy;
};

struct RVQOptions {
  std::size_t stages = 8;
  std::size_t k = 1024;
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  double tol = 1e-6;
  bool standardize = false;
  std::size_t max_rows = 0;
};

RVQCodec rvq_fit(const dsp::FeatureMatrix& features, const RVQOptions& options);

/// frames x stages token matrix, row-major.
struct TokenMatrix {
  std::size_t frames = 0;
  std::size_t heads = 0;
  std::vector<std::uint32_t> tokens;

  std::uint32_t at(std::size_t t, std::size_t j) const { return tokens[t * heads + j]; }
};

TokenMatrix rvq_encode(const dsp::FeatureMatrix& features, const RVQCodec& codec);
/// Sum of the selected codewords, mapped back to feature units.
dsp::FeatureMatrix rvq_decode(const TokenMatrix& tokens, const RVQCodec& codec);

// `MERTCB` v1: kind string, u32 stages, u32 k, u32 dim, u32 standardised flag,
// [mean, inv_std as float32 dim each], per stage: u32 trace length, f64 trace,
// f64 residual energy, k * dim float32 centroids. A plain codebook is a
// one-stage file whose residual energy field is NaN.
std::vector<std::uint8_t> encode_codebook(const Codebook& codebook);
Codebook decode_codebook(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_codec(const RVQCodec& codec);
RVQCodec decode_codec(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Teacher pipeline

enum class TeacherKind { kKMeans, kRvq };

std::string to_string(TeacherKind kind);
TeacherKind teacher_kind_from_string(const std::string& name);

/// One K-means head: the feature it clusters and its vocabulary size.
struct KMeansHeadSpec {
  dsp::FeatureKind feature = dsp::FeatureKind::kLogMel;
  std::size_t k = 300;
};

struct TeacherConfig {
  TeacherKind kind = TeacherKind::kKMeans;
  std::vector<KMeansHeadSpec> kmeans_heads = {{dsp::FeatureKind::kLogMel, 300},
                                              {dsp::FeatureKind::kChroma, 200}};
  std::size_t rvq_stages = 8;
  std::size_t rvq_k = 1024;
  dsp::LogMelOptions logmel;
  std::size_t mfcc_coeffs = 13;
  std::size_t mfcc_context = 0;
  dsp::StackLayout chroma_layout{10, 11};
  dsp::CQTParams cqt;
  bool standardize = true;
  std::size_t max_iters = 100;
  double tol = 1e-6;
  /// Cap on frames used for fitting each codebook (0 = all).
  std::size_t max_fit_rows = 40000;
  std::uint64_t seed = 0;
};

/// Frame features of one clip, computed once and shared across heads.
class FeatureCache {
 public:
  FeatureCache(const audio_io::AudioClip& clip, const TeacherConfig& config,
               const dsp::CqtTransform& cqt);

  const dsp::FeatureMatrix& get(dsp::FeatureKind kind);
  const dsp::FeatureMatrix& cqt_log_magnitude() { return get(dsp::FeatureKind::kCqt); }

 private:
  const audio_io::AudioClip& clip_;
  const TeacherConfig& config_;
  const dsp::CqtTransform& transform_;
  std::optional<dsp::FeatureMatrix> cqt_mag_;
  std::vector<std::pair<dsp::FeatureKind, dsp::FeatureMatrix>> cache_;
};

/// A fitted teacher: codebooks plus the CQT analysis used for musical targets.
class Teacher {
 public:
  Teacher(TeacherConfig config, std::vector<Codebook> heads);
  Teacher(TeacherConfig config, RVQCodec codec);

  const TeacherConfig& config() const { return config_; }
  std::size_t num_heads() const;
  std::vector<std::size_t> vocab_sizes() const;
  const std::vector<Codebook>& kmeans_heads() const { return heads_; }
  const RVQCodec& codec() const { return codec_; }
  const dsp::CqtTransform& cqt() const { return cqt_; }

 private:
  TeacherConfig config_;
  std::vector<Codebook> heads_;
  RVQCodec codec_;
  dsp::CqtTransform cqt_;
};

Teacher fit_teacher(std::span<const audio_io::AudioClip> clips, const TeacherConfig& config);

/// Per-clip pseudo targets: L x J tokens aligned with an L x n_bins log-CQT.
struct TargetBundle {
  std::string source_id;
  TokenMatrix tokens;
  std::vector<std::size_t> vocab;
  dsp::FeatureMatrix cqt_target;
  double frame_rate = 75.0;

  std::size_t frames() const { return tokens.frames; }
  /// Rows [start, start + count) of tokens and CQT.
  TargetBundle slice(std::size_t start, std::size_t count) const;
};

TargetBundle build_targets(const audio_io::AudioClip& clip, const Teacher& teacher);

// `MERTTGT` v1: source_id, u32 frames, u32 heads, u32 vocab per head,
// u32 tokens, f32 frame_rate, embedded MERTFEAT CQT target.
std::vector<std::uint8_t> encode_targets(const TargetBundle& bundle);
TargetBundle decode_targets(std::span<const std::uint8_t> bytes);
void write_targets(const std::filesystem::path& path, const TargetBundle& bundle);
TargetBundle read_targets(const std::filesystem::path& path);

}  // namespace mert::teachers

#endif  // MERT_TEACHERS_HPP_
