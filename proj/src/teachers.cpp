// src/teachers.cpp

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

#include "mert/teachers.hpp"

#include "mert/container.hpp"
#include "mert/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mert::teachers {

using dsp::FeatureMatrix;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

double squared_distance(const double* a, const double* b, std::size_t dim) {
  const Eigen::Map<const Eigen::VectorXd> x(a, static_cast<Eigen::Index>(dim));
  const Eigen::Map<const Eigen::VectorXd> y(b, static_cast<Eigen::Index>(dim));
  return (x - y).squaredNorm();
}

struct Assignment {
  std::vector<std::uint32_t> labels;
  std::vector<double> dist2;
  double inertia = 0.0;
};

// Exact nearest-centroid assignment for every row. Candidates are screened with
// the expanded |x|^2 - 2 x.c + |c|^2 form through one GEMM per block, then the
// distances of all candidates within the rounding margin of the screened
// minimum are recomputed directly, so the result is that of a plain scan.
Assignment assign_rows(const double* rows, std::size_t n, std::span<const double> centroids,
                       std::size_t k, std::size_t dim) {
  Assignment out;
  out.labels.resize(n);
  out.dist2.resize(n);
  const auto K = static_cast<Eigen::Index>(k), D = static_cast<Eigen::Index>(dim);
  const ConstRowMap C(centroids.data(), K, D);
  const Eigen::VectorXd cn = C.rowwise().squaredNorm();
  const double cmax = cn.size() ? cn.maxCoeff() : 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  constexpr std::size_t kBlock = 512;
  RowMatrix dots;
  for (std::size_t b0 = 0; b0 < n; b0 += kBlock) {
    const std::size_t bn = std::min(kBlock, n - b0);
    const ConstRowMap X(rows + b0 * dim, static_cast<Eigen::Index>(bn), D);
    dots.noalias() = X * C.transpose();
    for (std::size_t i = 0; i < bn; ++i) {
      const double* x = rows + (b0 + i) * dim;
      const double xn = X.row(static_cast<Eigen::Index>(i)).squaredNorm();
      double best_approx = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = xn - 2.0 * dots(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) +
                         cn[static_cast<Eigen::Index>(c)];
        best_approx = std::min(best_approx, d);
      }
      const double margin = 16.0 * double(dim + 4) * eps * (xn + cmax) + 1e-300;
      std::uint32_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = xn - 2.0 * dots(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) +
                         cn[static_cast<Eigen::Index>(c)];
        if (d > best_approx + 2.0 * margin) continue;
        const double exact = squared_distance(x, centroids.data() + c * dim, dim);
        if (exact < best_d) {
          best_d = exact;
          best = static_cast<std::uint32_t>(c);
        }
      }
      out.labels[b0 + i] = best;
      out.dist2[b0 + i] = best_d;
    }
  }
  for (double d : out.dist2) out.inertia += d;
  return out;
}

bool row_less(const double* a, const double* b, std::size_t dim) {
  return std::lexicographical_compare(a, a + dim, b, b + dim);
}

std::size_t count_distinct_rows(const FeatureMatrix& m, std::size_t stop_at) {
  std::vector<std::size_t> idx(m.frames);
  std::iota(idx.begin(), idx.end(), 0);
  const double* base = m.values.data();
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return row_less(base + a * m.dims, base + b * m.dims, m.dims);
  });
  std::size_t distinct = m.frames ? 1 : 0;
  for (std::size_t i = 1; i < idx.size() && distinct < stop_at; ++i) {
    const double* a = base + idx[i - 1] * m.dims;
    const double* b = base + idx[i] * m.dims;
    if (!std::equal(a, a + m.dims, b)) ++distinct;
  }
  return distinct;
}

FeatureMatrix subsample_rows(const FeatureMatrix& m, std::size_t max_rows, std::uint64_t seed) {
  if (max_rows == 0 || m.frames <= max_rows) return m;
  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::vector<std::size_t> idx(m.frames);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < max_rows; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m.frames - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(max_rows);
  std::sort(idx.begin(), idx.end());
  FeatureMatrix out = m;
  out.frames = max_rows;
  out.values.resize(max_rows * m.dims);
  for (std::size_t i = 0; i < max_rows; ++i) {
    const auto row = m.row(idx[i]);
    std::copy(row.begin(), row.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i * m.dims));
  }
  return out;
}

std::vector<double> kmeanspp_init(const FeatureMatrix& x, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = x.frames, dim = x.dims;
  std::vector<double> centroids(k * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t pick = first(rng);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(pick * dim), dim,
                centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.values.data() + i * dim,
                                               centroids.data() + c * dim, dim));
      total += d2[i];
    }
    if (c + 1 == k) break;
    std::uniform_real_distribution<double> u(0.0, total);
    const double r = u(rng);
    double acc = 0.0;
    pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      acc += d2[i];
      pick = i;
      if (acc > r) break;
    }
  }
  return centroids;
}

void sort_centroids(Codebook& cb) {
  std::vector<std::size_t> order(cb.k);
  std::iota(order.begin(), order.end(), 0);
  const double* base = cb.centroids.data();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row_less(base + a * cb.dim, base + b * cb.dim, cb.dim);
  });
  std::vector<double> sorted(cb.centroids.size());
  for (std::size_t i = 0; i < cb.k; ++i) {
    std::copy_n(cb.centroids.begin() + static_cast<std::ptrdiff_t>(order[i] * cb.dim), cb.dim,
                sorted.begin() + static_cast<std::ptrdiff_t>(i * cb.dim));
  }
  cb.centroids = std::move(sorted);
}

}  // namespace

// ---------------------------------------------------------------------------
// Standardization

Standardization Standardization::fit(const FeatureMatrix& rows) {
  if (rows.frames == 0) throw DegenerateDataError("cannot standardise zero rows");
  Standardization s;
  s.mean.assign(rows.dims, 0.0);
  s.inv_std.assign(rows.dims, 1.0);
  for (std::size_t t = 0; t < rows.frames; ++t)
    for (std::size_t d = 0; d < rows.dims; ++d) s.mean[d] += rows.at(t, d);
  for (double& m : s.mean) m /= double(rows.frames);
  std::vector<double> var(rows.dims, 0.0);
  for (std::size_t t = 0; t < rows.frames; ++t)
    for (std::size_t d = 0; d < rows.dims; ++d) {
      const double e = rows.at(t, d) - s.mean[d];
      var[d] += e * e;
    }
  for (std::size_t d = 0; d < rows.dims; ++d) {
    const double sd = std::sqrt(var[d] / double(rows.frames));
    s.inv_std[d] = sd < 1e-8 ? 1.0 : 1.0 / sd;
  }
  return s;
}

void Standardization::apply(std::span<const double> in, std::span<double> out) const {
  if (!enabled()) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  for (std::size_t d = 0; d < in.size(); ++d) out[d] = (in[d] - mean[d]) * inv_std[d];
}

FeatureMatrix Standardization::apply(const FeatureMatrix& features) const {
  if (!enabled()) return features;
  if (features.dims != mean.size()) {
    throw std::invalid_argument("standardisation has " + std::to_string(mean.size()) +
                                " dims, features have " + std::to_string(features.dims));
  }
  FeatureMatrix out = features;
  for (std::size_t t = 0; t < features.frames; ++t) apply(features.row(t), out.row(t));
  return out;
}

// ---------------------------------------------------------------------------
// K-means

Codebook kmeans_fit(const FeatureMatrix& features, const KMeansOptions& options) {
  if (options.k == 0) throw std::invalid_argument("kmeans_fit: k must be >= 1");
  if (features.dims == 0) throw std::invalid_argument("kmeans_fit: zero-dimensional features");
  FeatureMatrix x = subsample_rows(features, options.max_rows, options.seed);
  Codebook cb;
  cb.feature_kind = dsp::to_string(features.kind);
  cb.k = options.k;
  cb.dim = features.dims;
  if (options.standardize) {
    cb.stats = Standardization::fit(x);
    x = cb.stats.apply(x);
  }
  const std::size_t distinct = count_distinct_rows(x, options.k);
  if (distinct < options.k) {
    throw DegenerateDataError("kmeans_fit(" + cb.feature_kind + "): " + std::to_string(distinct) +
                              " distinct rows for k = " + std::to_string(options.k));
  }
  const std::size_t n = x.frames, dim = x.dims, k = options.k;
  std::mt19937_64 rng(options.seed);
  cb.centroids = kmeanspp_init(x, k, rng);

  Assignment a = assign_rows(x.values.data(), n, cb.centroids, k, dim);
  cb.inertia_trace.push_back(a.inertia);
  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 1; it < options.max_iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = a.labels[i];
      ++counts[c];
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += x.values[i * dim + d];
    }
    std::vector<double> next(k * dim);
    std::vector<double> far = a.dist2;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t d = 0; d < dim; ++d)
          next[c * dim + d] = sums[c * dim + d] / double(counts[c]);
      } else {
        const auto donor = static_cast<std::size_t>(
            std::max_element(far.begin(), far.end()) - far.begin());
        far[donor] = -1.0;
        std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(donor * dim), dim,
                    next.begin() + static_cast<std::ptrdiff_t>(c * dim));
      }
    }
    double shift = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      shift += (next[i] - cb.centroids[i]) * (next[i] - cb.centroids[i]);
      norm += cb.centroids[i] * cb.centroids[i];
    }
    cb.centroids = std::move(next);
    Assignment b = assign_rows(x.values.data(), n, cb.centroids, k, dim);
    cb.inertia_trace.push_back(b.inertia);
    const bool unchanged = b.labels == a.labels;
    a = std::move(b);
    if (unchanged || std::sqrt(shift) <= options.tol * std::sqrt(norm)) break;
  }
  sort_centroids(cb);
  return cb;
}

std::pair<std::uint32_t, double> nearest_centroid(std::span<const double> row,
                                                  std::span<const double> centroids,
                                                  std::size_t k) {
  const std::size_t dim = row.size();
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double d = squared_distance(row.data(), centroids.data() + c * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return {best, best_d};
}

std::vector<std::uint32_t> kmeans_assign(const FeatureMatrix& features, const Codebook& codebook) {
  if (features.dims != codebook.dim) {
    throw std::invalid_argument("kmeans_assign: " + dsp::to_string(features.kind) + " features have " +
                                std::to_string(features.dims) + " dims, " + codebook.feature_kind +
                                " codebook expects " + std::to_string(codebook.dim));
  }
  const FeatureMatrix x = codebook.stats.apply(features);
  return assign_rows(x.values.data(), x.frames, codebook.centroids, codebook.k, codebook.dim).labels;
}

// ---------------------------------------------------------------------------
// Residual codec

RVQCodec rvq_fit(const FeatureMatrix& features, const RVQOptions& options) {
  if (options.stages == 0) throw std::invalid_argument("rvq_fit: need at least one stage");
  RVQCodec codec;
  codec.feature_kind = dsp::to_string(features.kind);
  codec.dim = features.dims;
  FeatureMatrix residual = subsample_rows(features, options.max_rows, options.seed);
  if (options.standardize) {
    codec.stats = Standardization::fit(residual);
    residual = codec.stats.apply(residual);
  }
  for (std::size_t s = 0; s < options.stages; ++s) {
    KMeansOptions ko;
    ko.k = options.k;
    ko.seed = options.seed + 1000003ULL * s;
    ko.max_iters = options.max_iters;
    ko.tol = options.tol;
    Codebook cb = kmeans_fit(residual, ko);
    cb.feature_kind = codec.feature_kind;
    const auto labels =
        assign_rows(residual.values.data(), residual.frames, cb.centroids, cb.k, cb.dim).labels;
    double energy = 0.0;
    for (std::size_t t = 0; t < residual.frames; ++t) {
      const auto c = cb.centroid(labels[t]);
      auto r = residual.row(t);
      for (std::size_t d = 0; d < codec.dim; ++d) {
        r[d] -= c[d];
        energy += r[d] * r[d];
      }
    }
    codec.residual_energy.push_back(energy / double(residual.frames * codec.dim));
    codec.stages.push_back(std::move(cb));
  }
  return codec;
}

TokenMatrix rvq_encode(const FeatureMatrix& features, const RVQCodec& codec) {
  if (features.dims != codec.dim) {
    throw std::invalid_argument("rvq_encode: " + dsp::to_string(features.kind) + " features have " +
                                std::to_string(features.dims) + " dims, codec expects " +
                                std::to_string(codec.dim));
  }
  TokenMatrix out;
  out.frames = features.frames;
  out.heads = codec.stages.size();
  out.tokens.resize(out.frames * out.heads);
  FeatureMatrix residual = codec.stats.apply(features);
  for (std::size_t s = 0; s < codec.stages.size(); ++s) {
    const Codebook& cb = codec.stages[s];
    const auto labels =
        assign_rows(residual.values.data(), residual.frames, cb.centroids, cb.k, cb.dim).labels;
    for (std::size_t t = 0; t < residual.frames; ++t) {
      out.tokens[t * out.heads + s] = labels[t];
      const auto c = cb.centroid(labels[t]);
      auto r = residual.row(t);
      for (std::size_t d = 0; d < codec.dim; ++d) r[d] -= c[d];
    }
  }
  return out;
}

FeatureMatrix rvq_decode(const TokenMatrix& tokens, const RVQCodec& codec) {
  if (tokens.heads != codec.stages.size()) {
    throw std::invalid_argument("rvq_decode: " + std::to_string(tokens.heads) + " token columns for " +
                                std::to_string(codec.stages.size()) + " stages");
  }
  FeatureMatrix out;
  out.kind = dsp::feature_kind_from_string(codec.feature_kind);
  out.frames = tokens.frames;
  out.dims = codec.dim;
  out.values.assign(out.frames * out.dims, 0.0);
  for (std::size_t t = 0; t < tokens.frames; ++t) {
    auto row = out.row(t);
    for (std::size_t s = 0; s < tokens.heads; ++s) {
      const std::uint32_t tok = tokens.at(t, s);
      if (tok >= codec.stages[s].k) {
        throw std::out_of_range("rvq_decode: token " + std::to_string(tok) + " at frame " +
                                std::to_string(t) + " stage " + std::to_string(s) +
                                " exceeds vocabulary " + std::to_string(codec.stages[s].k));
      }
      const auto c = codec.stages[s].centroid(tok);
      for (std::size_t d = 0; d < codec.dim; ++d) row[d] += c[d];
    }
    if (codec.stats.enabled()) {
      for (std::size_t d = 0; d < codec.dim; ++d)
        row[d] = row[d] / codec.stats.inv_std[d] + codec.stats.mean[d];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MERTCB container

namespace {

void write_cb_body(container::ByteWriter& w, const std::string& kind, std::size_t k, std::size_t dim,
                   const Standardization& stats, std::span<const Codebook> stages,
                   std::span<const double> energies) {
  w.magic("MERTCB", 1);
  w.str(kind);
  w.u32(static_cast<std::uint32_t>(stages.size()));
  w.u32(static_cast<std::uint32_t>(k));
  w.u32(static_cast<std::uint32_t>(dim));
  w.u32(stats.enabled() ? 1u : 0u);
  if (stats.enabled()) {
    w.f32_array(std::span<const double>(stats.mean));
    w.f32_array(std::span<const double>(stats.inv_std));
  }
  for (std::size_t s = 0; s < stages.size(); ++s) {
    w.u32(static_cast<std::uint32_t>(stages[s].inertia_trace.size()));
    for (double v : stages[s].inertia_trace) w.f64(v);
    w.f64(s < energies.size() ? energies[s] : std::numeric_limits<double>::quiet_NaN());
    w.f32_array(std::span<const double>(stages[s].centroids));
  }
}

struct CbBody {
  std::string kind;
  std::size_t k = 0, dim = 0;
  Standardization stats;
  std::vector<Codebook> stages;
  std::vector<double> energies;
};

CbBody read_cb_body(std::span<const std::uint8_t> bytes) {
  container::ByteReader r(bytes);
  r.expect_magic("MERTCB", 1);
  CbBody b;
  b.kind = r.str();
  const std::size_t stages_at = r.offset();
  const std::uint32_t stages = r.u32();
  b.k = r.u32();
  b.dim = r.u32();
  if (stages == 0 || b.k == 0 || b.dim == 0) {
    throw FormatError("codebook with zero stages, entries or dims", stages_at);
  }
  const std::uint32_t standardized = r.u32();
  if (standardized) {
    auto m = r.f32_array(b.dim);
    auto s = r.f32_array(b.dim);
    b.stats.mean.assign(m.begin(), m.end());
    b.stats.inv_std.assign(s.begin(), s.end());
  }
  for (std::uint32_t s = 0; s < stages; ++s) {
    Codebook cb;
    cb.feature_kind = b.kind;
    cb.k = b.k;
    cb.dim = b.dim;
    const std::uint32_t trace = r.u32();
    if (trace > r.remaining() / 8) throw FormatError("inertia trace exceeds file", r.offset());
    for (std::uint32_t i = 0; i < trace; ++i) cb.inertia_trace.push_back(r.f64());
    b.energies.push_back(r.f64());
    const auto c = r.f32_array(b.k * b.dim);
    cb.centroids.assign(c.begin(), c.end());
    b.stages.push_back(std::move(cb));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after codebook", r.offset());
  return b;
}

}  // namespace

std::vector<std::uint8_t> encode_codebook(const Codebook& codebook) {
  container::ByteWriter w;
  write_cb_body(w, codebook.feature_kind, codebook.k, codebook.dim, codebook.stats,
                std::span<const Codebook>(&codebook, 1), {});
  return w.take();
}

Codebook decode_codebook(std::span<const std::uint8_t> bytes) {
  CbBody b = read_cb_body(bytes);
  if (b.stages.size() != 1) {
    throw DataError("expected a single-stage codebook, found " + std::to_string(b.stages.size()) +
                    " stages");
  }
  Codebook cb = std::move(b.stages.front());
  cb.stats = std::move(b.stats);
  return cb;
}

std::vector<std::uint8_t> encode_codec(const RVQCodec& codec) {
  if (codec.stages.empty()) throw std::invalid_argument("encode_codec: empty codec");
  container::ByteWriter w;
  write_cb_body(w, codec.feature_kind, codec.stages.front().k, codec.dim, codec.stats, codec.stages,
                codec.residual_energy);
  return w.take();
}

RVQCodec decode_codec(std::span<const std::uint8_t> bytes) {
  CbBody b = read_cb_body(bytes);
  RVQCodec codec;
  codec.feature_kind = b.kind;
  codec.dim = b.dim;
  codec.stats = std::move(b.stats);
  codec.stages = std::move(b.stages);
  codec.residual_energy = std::move(b.energies);
  return codec;
}

// ---------------------------------------------------------------------------
// Teacher pipeline

std::string to_string(TeacherKind kind) { return kind == TeacherKind::kKMeans ? "kmeans" : "rvq"; }

TeacherKind teacher_kind_from_string(const std::string& name) {
  if (name == "kmeans") return TeacherKind::kKMeans;
  if (name == "rvq") return TeacherKind::kRvq;
  throw std::invalid_argument("unknown teacher kind '" + name + "' (expected kmeans or rvq)");
}

FeatureCache::FeatureCache(const audio_io::AudioClip& clip, const TeacherConfig& config,
                           const dsp::CqtTransform& cqt)
    : clip_(clip), config_(config), transform_(cqt) {}

const FeatureMatrix& FeatureCache::get(dsp::FeatureKind kind) {
  for (auto& [k, m] : cache_)
    if (k == kind) return m;
  FeatureMatrix m;
  switch (kind) {
    case dsp::FeatureKind::kLogMel:
      m = dsp::log_mel(clip_, config_.logmel);
      break;
    case dsp::FeatureKind::kMfcc:
      m = dsp::mfcc(clip_, config_.mfcc_coeffs, config_.mfcc_context, config_.logmel);
      break;
    case dsp::FeatureKind::kChroma:
    case dsp::FeatureKind::kCqt: {
      if (!cqt_mag_) cqt_mag_ = transform_.magnitude(clip_);
      if (kind == dsp::FeatureKind::kCqt) {
        m = *cqt_mag_;
        for (auto& v : m.values) v = std::log(std::max(v, config_.cqt.log_floor));
      } else {
        m = dsp::chroma_from_cqt(*cqt_mag_, config_.cqt);
        if (config_.chroma_layout.width() > 1) m = dsp::stack_context(m, config_.chroma_layout);
      }
      break;
    }
    default:
      throw std::invalid_argument("teacher features cannot use kind " + dsp::to_string(kind));
  }
  cache_.emplace_back(kind, std::move(m));
  return cache_.back().second;
}

Teacher::Teacher(TeacherConfig config, std::vector<Codebook> heads)
    : config_(std::move(config)), heads_(std::move(heads)),
      cqt_(config_.cqt, audio_io::kCanonicalRate) {
  config_.kind = TeacherKind::kKMeans;
  if (heads_.empty()) throw std::invalid_argument("K-means teacher needs at least one head");
}

Teacher::Teacher(TeacherConfig config, RVQCodec codec)
    : config_(std::move(config)), codec_(std::move(codec)),
      cqt_(config_.cqt, audio_io::kCanonicalRate) {
  config_.kind = TeacherKind::kRvq;
  if (codec_.stages.empty()) throw std::invalid_argument("RVQ teacher needs at least one stage");
}

std::size_t Teacher::num_heads() const {
  return config_.kind == TeacherKind::kKMeans ? heads_.size() : codec_.stages.size();
}

std::vector<std::size_t> Teacher::vocab_sizes() const {
  std::vector<std::size_t> v;
  if (config_.kind == TeacherKind::kKMeans) {
    for (const auto& h : heads_) v.push_back(h.k);
  } else {
    for (const auto& s : codec_.stages) v.push_back(s.k);
  }
  return v;
}

namespace {

FeatureMatrix stack_clips(std::vector<FeatureMatrix>& parts) {
  FeatureMatrix all = parts.front();
  all.values.clear();
  all.frames = 0;
  for (auto& p : parts) {
    all.values.insert(all.values.end(), p.values.begin(), p.values.end());
    all.frames += p.frames;
  }
  return all;
}

}  // namespace

Teacher fit_teacher(std::span<const audio_io::AudioClip> clips, const TeacherConfig& config) {
  if (clips.empty()) throw DataError("fit_teacher: empty corpus");
  const dsp::CqtTransform transform(config.cqt, audio_io::kCanonicalRate);
  std::vector<dsp::FeatureKind> kinds;
  if (config.kind == TeacherKind::kKMeans) {
    for (const auto& h : config.kmeans_heads) kinds.push_back(h.feature);
  } else {
    kinds.push_back(dsp::FeatureKind::kLogMel);
  }
  std::vector<std::vector<FeatureMatrix>> per_kind(kinds.size());
  for (const auto& clip : clips) {
    if (clip.sample_rate != audio_io::kCanonicalRate) {
      throw DataError("fit_teacher: clip '" + clip.source_id + "' is at " +
                      std::to_string(clip.sample_rate) + " Hz, expected " +
                      std::to_string(audio_io::kCanonicalRate));
    }
    FeatureCache cache(clip, config, transform);
    for (std::size_t i = 0; i < kinds.size(); ++i) per_kind[i].push_back(cache.get(kinds[i]));
  }
  if (config.kind == TeacherKind::kKMeans) {
    std::vector<Codebook> heads;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      KMeansOptions ko;
      ko.k = config.kmeans_heads[i].k;
      ko.seed = config.seed + 7919ULL * i;
      ko.max_iters = config.max_iters;
      ko.tol = config.tol;
      ko.standardize = config.standardize;
      ko.max_rows = config.max_fit_rows;
      heads.push_back(kmeans_fit(stack_clips(per_kind[i]), ko));
    }
    return Teacher(config, std::move(heads));
  }
  RVQOptions ro;
  ro.stages = config.rvq_stages;
  ro.k = config.rvq_k;
  ro.seed = config.seed;
  ro.max_iters = config.max_iters;
  ro.tol = config.tol;
  ro.standardize = config.standardize;
  ro.max_rows = config.max_fit_rows;
  return Teacher(config, rvq_fit(stack_clips(per_kind[0]), ro));
}

TargetBundle TargetBundle::slice(std::size_t start, std::size_t count) const {
  if (start + count > tokens.frames) {
    throw std::out_of_range("TargetBundle::slice: frames [" + std::to_string(start) + ", " +
                            std::to_string(start + count) + ") of " + std::to_string(tokens.frames));
  }
  TargetBundle out;
  out.source_id = source_id;
  out.vocab = vocab;
  out.frame_rate = frame_rate;
  out.tokens.frames = count;
  out.tokens.heads = tokens.heads;
  out.tokens.tokens.assign(tokens.tokens.begin() + static_cast<std::ptrdiff_t>(start * tokens.heads),
                           tokens.tokens.begin() +
                               static_cast<std::ptrdiff_t>((start + count) * tokens.heads));
  out.cqt_target = cqt_target.slice(start, count);
  return out;
}

TargetBundle build_targets(const audio_io::AudioClip& clip, const Teacher& teacher) {
  const TeacherConfig& config = teacher.config();
  FeatureCache cache(clip, config, teacher.cqt());
  TargetBundle b;
  b.source_id = clip.source_id;
  b.cqt_target = cache.cqt_log_magnitude();
  b.frame_rate = b.cqt_target.frame_rate;
  b.vocab = teacher.vocab_sizes();
  const std::size_t L = b.cqt_target.frames;
  b.tokens.frames = L;
  b.tokens.heads = teacher.num_heads();
  b.tokens.tokens.resize(L * b.tokens.heads);
  auto check_frames = [&](const FeatureMatrix& f) {
    if (f.frames != L) {
      throw std::logic_error("build_targets: " + dsp::to_string(f.kind) + " has " +
                             std::to_string(f.frames) + " frames, CQT has " + std::to_string(L));
    }
  };
  if (config.kind == TeacherKind::kKMeans) {
    for (std::size_t j = 0; j < teacher.kmeans_heads().size(); ++j) {
      const Codebook& cb = teacher.kmeans_heads()[j];
      const FeatureMatrix& f = cache.get(dsp::feature_kind_from_string(cb.feature_kind));
      check_frames(f);
      const auto labels = kmeans_assign(f, cb);
      for (std::size_t t = 0; t < L; ++t) b.tokens.tokens[t * b.tokens.heads + j] = labels[t];
    }
  } else {
    const FeatureMatrix& f = cache.get(dsp::FeatureKind::kLogMel);
    check_frames(f);
    b.tokens = rvq_encode(f, teacher.codec());
  }
  return b;
}

std::vector<std::uint8_t> encode_targets(const TargetBundle& bundle) {
  container::ByteWriter w;
  w.magic("MERTTGT", 1);
  w.str(bundle.source_id);
  w.u32(static_cast<std::uint32_t>(bundle.tokens.frames));
  w.u32(static_cast<std::uint32_t>(bundle.tokens.heads));
  for (std::size_t v : bundle.vocab) w.u32(static_cast<std::uint32_t>(v));
  for (std::uint32_t t : bundle.tokens.tokens) w.u32(t);
  w.f32(static_cast<float>(bundle.frame_rate));
  const auto feat = dsp::encode_features(bundle.cqt_target);
  w.u32(static_cast<std::uint32_t>(feat.size()));
  w.bytes(std::string_view(reinterpret_cast<const char*>(feat.data()), feat.size()));
  return w.take();
}

TargetBundle decode_targets(std::span<const std::uint8_t> bytes) {
  container::ByteReader r(bytes);
  r.expect_magic("MERTTGT", 1);
  TargetBundle b;
  b.source_id = r.str();
  b.tokens.frames = r.u32();
  b.tokens.heads = r.u32();
  for (std::size_t j = 0; j < b.tokens.heads; ++j) b.vocab.push_back(r.u32());
  if (b.tokens.frames * b.tokens.heads > r.remaining() / 4) {
    throw FormatError("token matrix exceeds file", r.offset());
  }
  b.tokens.tokens.resize(b.tokens.frames * b.tokens.heads);
  for (std::size_t i = 0; i < b.tokens.tokens.size(); ++i) {
    const std::size_t at = r.offset();
    b.tokens.tokens[i] = r.u32();
    if (b.tokens.tokens[i] >= b.vocab[i % b.tokens.heads]) {
      throw FormatError("token out of vocabulary", at);
    }
  }
  b.frame_rate = r.f32();
  const std::uint32_t n = r.u32();
  const std::size_t feat_at = r.offset();
  const std::string feat = r.bytes(n);
  try {
    b.cqt_target = dsp::decode_features(
        std::span(reinterpret_cast<const std::uint8_t*>(feat.data()), feat.size()));
  } catch (const FormatError& e) {
    throw FormatError(std::string("embedded CQT target: ") + e.what(), feat_at + e.offset());
  }
  if (b.cqt_target.frames != b.tokens.frames) {
    throw FormatError("CQT target frame count differs from token frames", feat_at);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after targets", r.offset());
  return b;
}

void write_targets(const std::filesystem::path& path, const TargetBundle& bundle) {
  container::write_file(path, encode_targets(bundle));
}

TargetBundle read_targets(const std::filesystem::path& path) {
  return decode_targets(container::read_file(path));
}

}  // namespace mert::teachers
