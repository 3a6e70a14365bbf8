// src/pretrain.cpp

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

#include "mert/pretrain.hpp"

#include "mert/container.hpp"
#include "mert/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mert::pretrain {

using audio_io::AudioClip;
using grad::Tensor;

MaskSpec sample_mask(std::size_t length, std::size_t span, double start_prob, std::uint64_t seed) {
  if (length == 0) throw std::invalid_argument("sample_mask: zero frames");
  if (span == 0) throw std::invalid_argument("sample_mask: span must be >= 1");
  if (!(start_prob >= 0.0 && start_prob <= 1.0)) {
    throw std::invalid_argument("sample_mask: start_prob must lie in [0, 1]");
  }
  MaskSpec m;
  m.length = length;
  m.span = span;
  m.start_prob = start_prob;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution start(start_prob);
  std::vector<char> on(length, 0);
  for (std::size_t t = 0; t < length; ++t) {
    if (start(rng)) std::fill(on.begin() + t, on.begin() + std::min(length, t + span), 1);
  }
  for (std::size_t t = 0; t < length; ++t)
    if (on[t]) m.masked.push_back(t);
  return m;
}

double expected_mask_coverage(std::size_t span, double start_prob) {
  return 1.0 - std::pow(1.0 - start_prob, double(span));
}

MixupResult mixup(std::span<const AudioClip> batch, const MixupOptions& options, std::uint64_t seed) {
  MixupResult out;
  out.batch.assign(batch.begin(), batch.end());
  out.mixed.assign(batch.size(), false);
  if (options.prob <= 0.0) return out;
  if (batch.size() < 2) {
    out.notice = "mixup needs at least two clips in a batch; batch left unchanged";
    return out;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool apply = u01(rng) < options.prob;
    std::uniform_int_distribution<std::size_t> other(0, batch.size() - 2);
    std::size_t donor = other(rng);
    if (donor >= i) ++donor;
    const double seconds = options.excerpt_min_seconds +
                           (options.excerpt_max_seconds - options.excerpt_min_seconds) * u01(rng);
    const double gain = options.gain_min + (options.gain_max - options.gain_min) * u01(rng);
    const double r_src = u01(rng), r_dst = u01(rng);
    if (!apply) continue;
    const auto& src = batch[donor].samples;
    auto& dst = out.batch[i].samples;
    const auto want = static_cast<std::size_t>(std::llround(seconds * batch[i].sample_rate));
    const std::size_t len = std::min({want, src.size(), dst.size()});
    if (len == 0) continue;
    const auto src_off = static_cast<std::size_t>(r_src * double(src.size() - len + 1));
    const auto dst_off = static_cast<std::size_t>(r_dst * double(dst.size() - len + 1));
    for (std::size_t n = 0; n < len; ++n) {
      dst[dst_off + n] = std::clamp(dst[dst_off + n] + gain * src[src_off + n], -1.0, 1.0);
    }
    out.mixed[i] = true;
  }
  return out;
}

namespace {

void check_masked(std::span<const std::size_t> masked, std::size_t rows, const char* who) {
  for (std::size_t t : masked) {
    if (t >= rows) {
      throw std::out_of_range(std::string(who) + ": masked frame " + std::to_string(t) + " of " +
                              std::to_string(rows));
    }
  }
}

// -sum over masked rows of log softmax(logits)[target].
template <typename T>
Tensor<T> nce_sum(const Tensor<T>& rows_logits, std::span<const std::uint32_t> row_targets) {
  std::vector<std::size_t> cols(row_targets.begin(), row_targets.end());
  for (std::size_t c : cols) {
    if (c >= rows_logits.cols()) {
      throw std::out_of_range("nce_loss: target " + std::to_string(c) + " outside vocabulary " +
                              std::to_string(rows_logits.cols()));
    }
  }
  return grad::scale(grad::sum(grad::select_per_row(grad::log_softmax(rows_logits),
                                                    std::span<const std::size_t>(cols))),
                     T(-1));
}

}  // namespace

template <typename T>
Tensor<T> nce_loss(const Tensor<T>& logits, std::span<const std::uint32_t> targets,
                   std::span<const std::size_t> masked, std::string* warning) {
  if (targets.size() != logits.rows()) {
    throw grad::ShapeError("nce_loss: logits " + logits.shape().str() + " vs " +
                           std::to_string(targets.size()) + " targets");
  }
  check_masked(masked, logits.rows(), "nce_loss");
  if (masked.empty()) {
    if (warning) *warning = "nce_loss: empty mask, loss defined as 0";
    return Tensor<T>::scalar(T(0));
  }
  std::vector<std::uint32_t> tg;
  for (std::size_t t : masked) tg.push_back(targets[t]);
  return grad::scale(nce_sum(grad::gather_rows(logits, masked), std::span<const std::uint32_t>(tg)),
                     T(1.0 / double(masked.size())));
}

template <typename T>
Tensor<T> cqt_mse_loss(const Tensor<T>& pred, const dsp::FeatureMatrix& target,
                       std::span<const std::size_t> masked, std::string* warning) {
  if (pred.rows() != target.frames || pred.cols() != target.dims) {
    throw grad::ShapeError("cqt_mse_loss: prediction " + pred.shape().str() + " vs target " +
                           grad::Shape{target.frames, target.dims}.str());
  }
  check_masked(masked, pred.rows(), "cqt_mse_loss");
  if (masked.empty()) {
    if (warning) *warning = "cqt_mse_loss: empty mask, loss defined as 0";
    return Tensor<T>::scalar(T(0));
  }
  std::vector<T> tv;
  tv.reserve(masked.size() * target.dims);
  for (std::size_t t : masked)
    for (double v : target.row(t)) tv.push_back(T(v));
  return grad::mse(grad::gather_rows(pred, masked),
                   Tensor<T>::constant({masked.size(), target.dims}, std::move(tv)));
}

template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> acoustic, const Tensor<T>& musical, double alpha,
                     double musical_weight) {
  Tensor<T> acc = grad::scale(musical, T(musical_weight));
  for (const auto& a : acoustic) acc = grad::add(acc, grad::scale(a, T(alpha)));
  return acc;
}

std::string to_string(CodebookMode mode) {
  switch (mode) {
    case CodebookMode::kAll: return "all";
    case CodebookMode::kSingle: return "single";
    case CodebookMode::kRandomPerBatch: return "random_per_batch";
  }
  return "all";
}

CodebookMode codebook_mode_from_string(const std::string& name) {
  if (name == "all") return CodebookMode::kAll;
  if (name == "single") return CodebookMode::kSingle;
  if (name == "random_per_batch") return CodebookMode::kRandomPerBatch;
  throw std::invalid_argument("unknown codebook_mode '" + name +
                              "' (expected all, single or random_per_batch)");
}

std::vector<std::size_t> select_heads(CodebookMode mode, std::size_t single_head,
                                      std::size_t num_heads, std::mt19937_64& rng) {
  if (num_heads == 0) throw std::invalid_argument("select_heads: no heads");
  switch (mode) {
    case CodebookMode::kAll: {
      std::vector<std::size_t> all(num_heads);
      std::iota(all.begin(), all.end(), 0);
      return all;
    }
    case CodebookMode::kSingle:
      if (single_head >= num_heads) {
        throw std::out_of_range("single_head " + std::to_string(single_head) + " of " +
                                std::to_string(num_heads));
      }
      return {single_head};
    case CodebookMode::kRandomPerBatch: {
      std::uniform_int_distribution<std::size_t> pick(0, num_heads - 1);
      return {pick(rng)};
    }
  }
  return {};
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(mixup_prob >= 0.0 && mixup_prob <= 1.0)) fail("mixup_prob must lie in [0, 1]");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) fail("mask_prob must lie in [0, 1]");
  if (!(mixup_gain_min >= 0.0 && mixup_gain_min <= mixup_gain_max)) fail("mixup gain range is empty");
  if (!(mixup_excerpt_min > 0.0 && mixup_excerpt_min <= mixup_excerpt_max)) {
    fail("mixup excerpt range is empty");
  }
  if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
  if (!(lr >= 0.0)) fail("lr must be non-negative");
  if (batch_clips == 0) fail("batch_clips must be >= 1");
  if (mask_span == 0) fail("mask_span must be >= 1");
  if (!(segment_seconds >= 0.0)) fail("segment_seconds must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

MixupOptions TrainConfig::mixup_options() const {
  return {mixup_prob, mixup_gain_min, mixup_gain_max, mixup_excerpt_min, mixup_excerpt_max};
}

nlohmann::json to_json(const LossReport& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  nlohmann::json acoustic = nlohmann::json::array(), acc = nlohmann::json::array();
  for (double v : r.acoustic_per_head) acoustic.push_back(num(v));
  for (double v : r.masked_token_accuracy_per_head) acc.push_back(num(v));
  nlohmann::json j = {{"step", r.step},
                      {"total", num(r.total)},
                      {"acoustic", acoustic},
                      {"heads", r.selected_heads},
                      {"musical", num(r.musical)},
                      {"alpha", r.alpha},
                      {"musical_weight", r.musical_weight},
                      {"grad_norm_preclip", num(r.grad_norm_preclip)},
                      {"grad_norm_postclip", num(r.grad_norm_postclip)},
                      {"masked_accuracy", acc},
                      {"masked_frames", r.masked_frames},
                      {"lr", r.lr},
                      {"skipped", r.skipped}};
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
  return j;
}

double global_norm(std::span<const std::vector<double>> grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

double clip_gradients(std::span<std::vector<double>> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(model::ModelConfig model_config, TrainConfig train_config,
                 std::vector<TrainingExample> corpus, std::string config_text)
    : model_config_(std::move(model_config)), config_(std::move(train_config)),
      corpus_(std::move(corpus)), config_text_(std::move(config_text)), model_(model_config_),
      rng_(config_.seed) {
  config_.validate();
  if (corpus_.empty()) throw DataError("pretraining corpus is empty");
  for (const auto& ex : corpus_) {
    if (ex.targets.tokens.heads != model_config_.head_vocab.size()) {
      throw DataError("targets for '" + ex.targets.source_id + "' have " +
                      std::to_string(ex.targets.tokens.heads) + " heads, model has " +
                      std::to_string(model_config_.head_vocab.size()));
    }
    for (std::size_t j = 0; j < ex.targets.vocab.size(); ++j) {
      if (ex.targets.vocab[j] != model_config_.head_vocab[j]) {
        throw DataError("targets for '" + ex.targets.source_id + "' use vocabulary " +
                        std::to_string(ex.targets.vocab[j]) + " on head " + std::to_string(j) +
                        ", model expects " + std::to_string(model_config_.head_vocab[j]));
      }
    }
    if (ex.targets.cqt_target.dims != model_config_.cqt_bins) {
      throw DataError("CQT target of '" + ex.targets.source_id + "' has " +
                      std::to_string(ex.targets.cqt_target.dims) + " bins, model expects " +
                      std::to_string(model_config_.cqt_bins));
    }
    if (ex.targets.frames() != model_.frames_for(ex.clip.samples.size())) {
      throw DataError("targets for '" + ex.targets.source_id + "' have " +
                      std::to_string(ex.targets.frames()) + " frames, clip gives " +
                      std::to_string(model_.frames_for(ex.clip.samples.size())));
    }
  }
  if (config_.cqt_bias_from_targets) {
    std::vector<double> mean(model_config_.cqt_bins, 0.0);
    double frames = 0.0;
    for (const auto& ex : corpus_) {
      const auto& c = ex.targets.cqt_target;
      for (std::size_t t = 0; t < c.frames; ++t) {
        const auto row = c.row(t);
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += row[k];
      }
      frames += double(c.frames);
    }
    for (auto& p : model_.parameters()) {
      if (p.name != "cqt_head.bias" || frames == 0.0) continue;
      auto v = p.tensor.mutable_values();
      for (std::size_t k = 0; k < mean.size(); ++k) v[k] = float(mean[k] / frames);
    }
  }
  for (const auto& p : model_.parameters()) {
    adam_m_.emplace_back(p.tensor.size(), 0.0f);
    adam_v_.emplace_back(p.tensor.size(), 0.0f);
  }
}

Batch Trainer::draw_batch() {
  Batch b;
  const std::size_t n = corpus_.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min(config_.batch_clips, n);
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng_)]);
  }
  b.clips.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
  const std::size_t hop = model_config_.total_stride();
  const auto seg = static_cast<std::size_t>(config_.segment_seconds * audio_io::kCanonicalRate) / hop * hop;
  for (std::size_t c : b.clips) {
    const std::size_t len = corpus_[c].clip.samples.size();
    std::size_t off = 0;
    if (seg > 0 && len > seg) {
      std::uniform_int_distribution<std::size_t> pick(0, (len - seg) / hop);
      off = pick(rng_) * hop;
    }
    b.offsets.push_back(off);
    b.mask_seeds.push_back(rng_());
  }
  b.mixup_seed = rng_();
  b.dropout_seed = rng_();
  b.heads = select_heads(config_.codebook_mode, config_.single_head, model_config_.head_vocab.size(), rng_);
  return b;
}

PreparedBatch Trainer::prepare(const Batch& batch) const {
  PreparedBatch p;
  const std::size_t hop = model_config_.total_stride();
  const auto seg = static_cast<std::size_t>(config_.segment_seconds * audio_io::kCanonicalRate) / hop * hop;
  for (std::size_t i = 0; i < batch.clips.size(); ++i) {
    const TrainingExample& ex = corpus_.at(batch.clips[i]);
    const std::size_t len = ex.clip.samples.size();
    const std::size_t off = batch.offsets[i];
    const std::size_t n = (seg > 0 && len > seg) ? seg : len;
    if (off % hop != 0 || off + n > len) {
      throw std::out_of_range("batch offset " + std::to_string(off) + " invalid for '" +
                              ex.clip.source_id + "'");
    }
    AudioClip c;
    c.sample_rate = ex.clip.sample_rate;
    c.source_id = ex.clip.source_id;
    c.samples.assign(ex.clip.samples.begin() + static_cast<std::ptrdiff_t>(off),
                     ex.clip.samples.begin() + static_cast<std::ptrdiff_t>(off + n));
    const std::size_t frames = model_.frames_for(n);
    p.targets.push_back(ex.targets.slice(off / hop, frames));
    p.masks.push_back(sample_mask(frames, config_.mask_span, config_.mask_prob, batch.mask_seeds[i]));
    p.clean.push_back(std::move(c));
  }
  MixupResult mixed = mixup(p.clean, config_.mixup_options(), batch.mixup_seed);
  p.student = std::move(mixed.batch);
  p.notice = std::move(mixed.notice);
  return p;
}

LossReport Trainer::forward_losses(const Batch& batch, bool backprop) const {
  const PreparedBatch p = prepare(batch);
  const std::size_t J = model_config_.head_vocab.size();
  LossReport r;
  r.step = step_;
  r.alpha = config_.alpha;
  r.musical_weight = config_.musical_weight;
  r.selected_heads = batch.heads;
  r.acoustic_per_head.assign(J, std::numeric_limits<double>::quiet_NaN());
  r.masked_token_accuracy_per_head.assign(J, std::numeric_limits<double>::quiet_NaN());
  r.diagnostic = p.notice;
  std::size_t total_masked = 0;
  for (const auto& m : p.masks) total_masked += m.masked.size();
  r.masked_frames = total_masked;
  if (total_masked == 0) {
    r.total = 0.0;
    r.musical = 0.0;
    r.diagnostic = "empty mask across the batch, loss defined as 0";
    return r;
  }
  const float inv_m = float(1.0 / double(total_masked));
  const float inv_mb = float(1.0 / double(total_masked * model_config_.cqt_bins));
  std::vector<double> acoustic(J, 0.0), correct(J, 0.0);
  double musical = 0.0;
  std::mt19937_64 dropout_rng(batch.dropout_seed);

  std::optional<grad::NoGradGuard> guard;
  if (!backprop) guard.emplace();
  for (std::size_t i = 0; i < p.student.size(); ++i) {
    const auto& masked = p.masks[i].masked;
    if (masked.empty()) continue;
    model::ForwardOptions fo;
    fo.masked = masked;
    fo.training = backprop;
    fo.dropout_rng = &dropout_rng;
    const auto out = model_.forward(p.student[i].samples, fo);
    const Tensor<float> om = grad::gather_rows(out.final(), std::span<const std::size_t>(masked));
    const auto& tb = p.targets[i];
    std::vector<Tensor<float>> parts;
    for (std::size_t j : batch.heads) {
      std::vector<std::uint32_t> tg;
      for (std::size_t t : masked) tg.push_back(tb.tokens.at(t, j));
      const Tensor<float> logits = model_.acoustic_logits(om, j);
      const Tensor<float> s = grad::scale(nce_sum(logits, std::span<const std::uint32_t>(tg)), inv_m);
      acoustic[j] += s.item();
      for (std::size_t row = 0; row < tg.size(); ++row) {
        const auto v = logits.values().subspan(row * logits.cols(), logits.cols());
        const auto arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
        if (arg == tg[row]) correct[j] += 1.0;
      }
      parts.push_back(s);
    }
    std::vector<float> tv;
    for (std::size_t t : masked)
      for (double v : tb.cqt_target.row(t)) tv.push_back(float(v));
    const Tensor<float> pred = model_.predict_cqt(om);
    const Tensor<float> diff = grad::sub(pred, Tensor<float>::constant(pred.shape(), std::move(tv)));
    const Tensor<float> mus = grad::scale(grad::sum(grad::mul(diff, diff)), inv_mb);
    musical += mus.item();
    if (backprop) grad::backward(total_loss<float>(parts, mus, config_.alpha, config_.musical_weight));
  }
  double sum_selected = 0.0;
  for (std::size_t j : batch.heads) {
    r.acoustic_per_head[j] = acoustic[j];
    r.masked_token_accuracy_per_head[j] = correct[j] / double(total_masked);
    sum_selected += acoustic[j];
  }
  r.musical = musical;
  r.total = config_.alpha * sum_selected + config_.musical_weight * musical;
  return r;
}

LossReport Trainer::evaluate(const Batch& batch) const {
  LossReport r = forward_losses(batch, false);
  r.lr = 0.0;
  return r;
}

LossReport Trainer::train_step(const Batch& batch) {
  auto& params = model_.parameters();
  for (auto& p : params) p.tensor.zero_grad();
  double lr = config_.warmup_steps > 0
                  ? config_.lr * std::min(1.0, double(adam_updates_ + 1) / double(config_.warmup_steps))
                  : config_.lr;
  if (config_.linear_decay && step_ >= config_.warmup_steps && config_.steps > config_.warmup_steps) {
    const double left = double(config_.steps) - double(step_);
    lr = config_.lr * std::max(0.0, left / double(config_.steps - config_.warmup_steps));
  }
  LossReport r;
  try {
    r = forward_losses(batch, true);
  } catch (const grad::NumericalError& e) {
    r = LossReport{};
    r.step = step_;
    r.alpha = config_.alpha;
    r.musical_weight = config_.musical_weight;
    r.selected_heads = batch.heads;
    r.skipped = true;
    r.total = std::numeric_limits<double>::quiet_NaN();
    r.diagnostic = std::string("non-finite value, update skipped: ") + e.what();
  }
  r.lr = lr;
  ++step_;
  if (!r.skipped && r.masked_frames == 0) {
    r.skipped = true;
  }
  if (!r.skipped && !std::isfinite(r.total)) {
    r.skipped = true;
    r.diagnostic = "non-finite loss, update skipped";
  }
  std::vector<std::vector<double>> grads;
  if (!r.skipped) {
    grads.reserve(params.size());
    for (auto& p : params) {
      std::vector<double> g(p.tensor.size(), 0.0);
      const auto src = p.tensor.grad();
      for (std::size_t i = 0; i < src.size(); ++i) g[i] = src[i];
      grads.push_back(std::move(g));
    }
    r.grad_norm_preclip = clip_gradients(grads, config_.grad_clip);
    r.grad_norm_postclip = global_norm(grads);
    if (!std::isfinite(r.grad_norm_preclip)) {
      r.skipped = true;
      r.diagnostic = "non-finite gradient norm, update skipped";
    }
  }
  for (auto& p : params) p.tensor.zero_grad();
  if (r.skipped) return r;

  ++adam_updates_;
  const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, double(adam_updates_));
  const double c2 = 1.0 - std::pow(b2, double(adam_updates_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].tensor.mutable_values();
    auto& m = adam_m_[k];
    auto& v = adam_v_[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double mi = b1 * m[i] + (1.0 - b1) * g[i];
      const double vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      m[i] = float(mi);
      v[i] = float(vi);
      const double upd = lr * (double(m[i]) / c1) / (std::sqrt(double(v[i]) / c2) + config_.adam_eps);
      w[i] = float(double(w[i]) - upd);
    }
  }
  return r;
}

model::Checkpoint Trainer::checkpoint() const {
  model::Checkpoint c;
  c.config_text = config_text_;
  c.parameters = model::export_parameters(model_);
  c.step = step_;
  c.adam_updates = adam_updates_;
  const auto& params = model_.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    model::TensorRecord m{params[k].name, params[k].tensor.rows(), params[k].tensor.cols(), adam_m_[k]};
    model::TensorRecord v{params[k].name, params[k].tensor.rows(), params[k].tensor.cols(), adam_v_[k]};
    c.adam_m.push_back(std::move(m));
    c.adam_v.push_back(std::move(v));
  }
  std::ostringstream ss;
  ss << rng_;
  c.rng_state = ss.str();
  return c;
}

void Trainer::restore(const model::Checkpoint& ckpt) {
  model::import_parameters(std::span<const model::TensorRecord>(ckpt.parameters), model_);
  const auto& params = model_.parameters();
  if (ckpt.adam_m.size() != params.size() || ckpt.adam_v.size() != params.size()) {
    throw DataError("checkpoint optimiser state does not match the model");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (ckpt.adam_m[k].values.size() != params[k].tensor.size() ||
        ckpt.adam_v[k].values.size() != params[k].tensor.size()) {
      throw DataError("optimiser state for '" + params[k].name + "' has the wrong size");
    }
    adam_m_[k] = ckpt.adam_m[k].values;
    adam_v_[k] = ckpt.adam_v[k].values;
  }
  step_ = ckpt.step;
  adam_updates_ = ckpt.adam_updates;
  std::istringstream ss(ckpt.rng_state);
  ss >> rng_;
  if (!ss) throw DataError("checkpoint generator state is unreadable");
}

std::vector<LossReport> run_pretraining(Trainer& trainer, const RunOptions& options) {
  std::ofstream log;
  if (!options.log_path.empty()) {
    if (options.log_path.has_parent_path()) {
      std::filesystem::create_directories(options.log_path.parent_path());
    }
    log.open(options.log_path, trainer.step_count() == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot write training log " + options.log_path.string());
  }
  std::vector<LossReport> reports;
  const std::size_t every = trainer.train_config().checkpoint_every;
  while (trainer.step_count() < trainer.train_config().steps) {
    LossReport r = trainer.step();
    if (log.is_open()) {
      log << to_json(r).dump() << '\n';
      log.flush();
    }
    if (options.on_step) options.on_step(r);
    if (!options.checkpoint_dir.empty() && every > 0 && trainer.step_count() % every == 0) {
      model::write_checkpoint(options.checkpoint_dir / ("step_" + std::to_string(trainer.step_count()) + ".ckpt"),
                              trainer.checkpoint());
    }
    reports.push_back(std::move(r));
  }
  if (!options.checkpoint_dir.empty()) {
    model::write_checkpoint(options.checkpoint_dir / "final.ckpt", trainer.checkpoint());
  }
  return reports;
}

std::vector<TrainingExample> match_targets(std::vector<AudioClip> clips,
                                           std::vector<teachers::TargetBundle> targets) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < targets.size(); ++i) by_id[targets[i].source_id] = i;
  std::vector<std::string> missing;
  std::vector<TrainingExample> out;
  for (auto& c : clips) {
    const auto it = by_id.find(c.source_id);
    if (it == by_id.end()) {
      missing.push_back(c.source_id);
      continue;
    }
    out.push_back({std::move(c), targets[it->second]});
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("no targets for source ids: " + list);
  }
  return out;
}

MaskedEvaluation evaluate_masked_prediction(const model::Model<float>& model,
                                            std::span<const TrainingExample> held_out,
                                            std::span<const TrainingExample> reference,
                                            std::size_t mask_span, double mask_prob,
                                            std::uint64_t seed, double window_seconds) {
  const std::size_t J = model.config().head_vocab.size();
  std::vector<std::uint32_t> majority(J, 0);
  for (std::size_t j = 0; j < J; ++j) {
    std::vector<std::size_t> counts(model.config().head_vocab[j], 0);
    for (const auto& ex : reference)
      for (std::size_t t = 0; t < ex.targets.frames(); ++t) ++counts[ex.targets.tokens.at(t, j)];
    majority[j] = static_cast<std::uint32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  MaskedEvaluation ev;
  std::vector<double> correct(J, 0.0), base(J, 0.0);
  grad::NoGradGuard guard;
  const std::size_t hop = model.config().total_stride();
  const auto window = static_cast<std::size_t>(window_seconds * audio_io::kCanonicalRate) / hop;
  if (window_seconds > 0.0 && window == 0) {
    throw std::invalid_argument("evaluation window is shorter than one frame");
  }
  std::uint64_t piece = 0;
  for (const auto& ex : held_out) {
    const std::size_t frames = ex.targets.frames();
    const std::size_t step = window > 0 ? window : frames;
    for (std::size_t w0 = 0; w0 < frames; w0 += step) {
      const std::size_t n = std::min(step, frames - w0);
      const MaskSpec m = sample_mask(n, mask_span, mask_prob, seed + piece++);
      if (m.masked.empty()) continue;
      const auto begin = ex.clip.samples.begin() + static_cast<std::ptrdiff_t>(w0 * hop);
      const auto end = n == frames ? ex.clip.samples.end() : begin + static_cast<std::ptrdiff_t>(n * hop);
      const std::vector<double> samples(begin, end);
      model::ForwardOptions fo;
      fo.masked = m.masked;
      const auto out = model.forward(samples, fo);
      const Tensor<float> om = grad::gather_rows(out.final(), std::span<const std::size_t>(m.masked));
      for (std::size_t j = 0; j < J; ++j) {
        const Tensor<float> logits = model.acoustic_logits(om, j);
        for (std::size_t row = 0; row < m.masked.size(); ++row) {
          const std::uint32_t target = ex.targets.tokens.at(w0 + m.masked[row], j);
          const auto v = logits.values().subspan(row * logits.cols(), logits.cols());
          if (std::size_t(std::max_element(v.begin(), v.end()) - v.begin()) == target) correct[j] += 1;
          if (target == majority[j]) base[j] += 1;
        }
      }
      ev.masked_frames += m.masked.size();
    }
  }
  for (std::size_t j = 0; j < J; ++j) {
    const double n = std::max<double>(1.0, double(ev.masked_frames));
    ev.accuracy_per_head.push_back(correct[j] / n);
    ev.majority_baseline_per_head.push_back(base[j] / n);
  }
  return ev;
}

#define MERT_PRETRAIN_INSTANTIATE(T)                                                             \
  template Tensor<T> nce_loss<T>(const Tensor<T>&, std::span<const std::uint32_t>,              \
                                 std::span<const std::size_t>, std::string*);                   \
  template Tensor<T> cqt_mse_loss<T>(const Tensor<T>&, const dsp::FeatureMatrix&,               \
                                     std::span<const std::size_t>, std::string*);               \
  template Tensor<T> total_loss<T>(std::span<const Tensor<T>>, const Tensor<T>&, double, double);

MERT_PRETRAIN_INSTANTIATE(float)
MERT_PRETRAIN_INSTANTIATE(double)

}  // namespace mert::pretrain
