// mert/pretrain.hpp

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

#ifndef MERT_PRETRAIN_HPP_
#define MERT_PRETRAIN_HPP_

#include "mert/audio_io.hpp"
#include "mert/grad.hpp"
#include "mert/model.hpp"
#include "mert/teachers.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mert::pretrain {

struct MaskSpec {
  std::size_t length = 0;
  std::size_t span = 5;
  double start_prob = 0.08;
  std::uint64_t seed = 0;
  std::vector<std::size_t> masked;  // sorted, unique
};

/// Each frame starts a span of `span` frames with probability start_prob; the
/// mask is the union of spans clipped at `length`. Throws on length 0 or span 0.
MaskSpec sample_mask(std::size_t length, std::size_t span, double start_prob, std::uint64_t seed);

/// Expected masked fraction of an interior frame: 1 - (1 - p)^span.
double expected_mask_coverage(std::size_t span, double start_prob);

struct MixupOptions {
  double prob = 0.5;
  double gain_min = 0.1;
  double gain_max = 0.5;
  double excerpt_min_seconds = 0.2;
  double excerpt_max_seconds = 1.0;
};

struct MixupResult {
  std::vector<audio_io::AudioClip> batch;
  std::vector<bool> mixed;
  /// Non-empty when mixing was impossible (batch of one).
  std::string notice;
};

/// In-batch noise mixup: with probability `prob` each clip receives a
/// gain-scaled excerpt of another clip at a random offset, clipped to [-1, 1].
MixupResult mixup(std::span<const audio_io::AudioClip> batch, const MixupOptions& options,
                  std::uint64_t seed);

// Losses. Rows of `logits` / `pred` are frames; only rows in `masked` count.
// An empty mask gives 0 and, when `warning` is given, a message.

template <typename T>
grad::Tensor<T> nce_loss(const grad::Tensor<T>& logits, std::span<const std::uint32_t> targets,
                         std::span<const std::size_t> masked, std::string* warning = nullptr);

template <typename T>
grad::Tensor<T> cqt_mse_loss(const grad::Tensor<T>& pred, const dsp::FeatureMatrix& target,
                             std::span<const std::size_t> masked, std::string* warning = nullptr);

/// alpha * sum(acoustic) + musical_weight * musical.
template <typename T>
grad::Tensor<T> total_loss(std::span<const grad::Tensor<T>> acoustic, const grad::Tensor<T>& musical,
                           double alpha, double musical_weight);

enum class CodebookMode { kAll, kSingle, kRandomPerBatch };

std::string to_string(CodebookMode mode);
CodebookMode codebook_mode_from_string(const std::string& name);

/// Heads contributing to the acoustic loss this batch.
std::vector<std::size_t> select_heads(CodebookMode mode, std::size_t single_head,
                                      std::size_t num_heads, std::mt19937_64& rng);

struct TrainConfig {
  double alpha = 1.0;
  double musical_weight = 1.0;
  double mixup_prob = 0.5;
  double mixup_gain_min = 0.1;
  double mixup_gain_max = 0.5;
  double mixup_excerpt_min = 0.2;
  double mixup_excerpt_max = 1.0;
  double lr = 5e-4;
  std::size_t warmup_steps = 0;
  /// After warmup, decay the learning rate linearly to zero at `steps`.
  bool linear_decay = false;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  std::size_t batch_clips = 8;
  std::size_t steps = 100;
  CodebookMode codebook_mode = CodebookMode::kAll;
  std::size_t single_head = 0;
  std::size_t mask_span = 5;
  double mask_prob = 0.08;
  /// Start the CQT head bias at the per-bin mean of the corpus targets.
  bool cqt_bias_from_targets = true;
  /// Random crop length per clip (0 = whole clip).
  double segment_seconds = 0.0;
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  MixupOptions mixup_options() const;
};

struct LossReport {
  std::uint64_t step = 0;
  double total = 0.0;
  /// One entry per model head; NaN for heads not selected this batch.
  std::vector<double> acoustic_per_head;
  std::vector<std::size_t> selected_heads;
  double musical = 0.0;
  double alpha = 1.0;
  double musical_weight = 1.0;
  double grad_norm_preclip = 0.0;
  double grad_norm_postclip = 0.0;
  std::vector<double> masked_token_accuracy_per_head;
  std::size_t masked_frames = 0;
  double lr = 0.0;
  bool skipped = false;
  std::string diagnostic;
};

nlohmann::json to_json(const LossReport& report);

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
double clip_gradients(std::span<std::vector<double>> grads, double max_norm);
double global_norm(std::span<const std::vector<double>> grads);

struct TrainingExample {
  audio_io::AudioClip clip;
  teachers::TargetBundle targets;
};

/// Everything random about one step, drawn from the run generator.
struct Batch {
  std::vector<std::size_t> clips;
  std::vector<std::size_t> offsets;  // sample offset of each crop, multiple of 320
  std::vector<std::uint64_t> mask_seeds;
  std::uint64_t mixup_seed = 0;
  std::uint64_t dropout_seed = 0;
  std::vector<std::size_t> heads;
};

struct PreparedBatch {
  std::vector<audio_io::AudioClip> clean;
  std::vector<audio_io::AudioClip> student;
  std::vector<teachers::TargetBundle> targets;
  std::vector<MaskSpec> masks;
  std::string notice;
};

/// Owns the float model, Adam state and the run generator. Given the same
/// configuration, corpus and seed the parameter trajectory is bit-identical,
/// including across checkpoint/resume.
class Trainer {
 public:
  Trainer(model::ModelConfig model_config, TrainConfig train_config,
          std::vector<TrainingExample> corpus, std::string config_text = {});

  model::Model<float>& model() { return model_; }
  const model::Model<float>& model() const { return model_; }
  const TrainConfig& train_config() const { return config_; }
  std::uint64_t step_count() const { return step_; }

  Batch draw_batch();
  PreparedBatch prepare(const Batch& batch) const;
  /// Forward pass and losses without any update.
  LossReport evaluate(const Batch& batch) const;
  /// One optimisation step. A non-finite loss or gradient skips the update and
  /// is reported in the diagnostic; the model and optimiser stay unchanged.
  LossReport train_step(const Batch& batch);
  LossReport step() { return train_step(draw_batch()); }

  model::Checkpoint checkpoint() const;
  /// Restores parameters, optimiser moments, step counter and generator.
  void restore(const model::Checkpoint& ckpt);

 private:
  /// Losses of a batch; with `backprop` the parameter gradients accumulate.
  LossReport forward_losses(const Batch& batch, bool backprop) const;

  model::ModelConfig model_config_;
  TrainConfig config_;
  std::vector<TrainingExample> corpus_;
  std::string config_text_;
  model::Model<float> model_;
  std::vector<std::vector<float>> adam_m_;
  std::vector<std::vector<float>> adam_v_;
  std::uint64_t step_ = 0;
  std::uint64_t adam_updates_ = 0;
  std::mt19937_64 rng_;
};

struct RunOptions {
  std::filesystem::path log_path;        // NDJSON, one record per step; empty = none
  std::filesystem::path checkpoint_dir;  // empty = none
  std::function<void(const LossReport&)> on_step;
};

/// Runs the trainer up to train_config().steps total steps, writing the log and
/// periodic plus final checkpoints (`step_<n>.ckpt`, `final.ckpt`).
std::vector<LossReport> run_pretraining(Trainer& trainer, const RunOptions& options);

/// Pairs clips with their targets by source id; throws DataError listing the
/// ids that have no target.
std::vector<TrainingExample> match_targets(std::vector<audio_io::AudioClip> clips,
                                           std::vector<teachers::TargetBundle> targets);

/// Masked-token accuracy of a model on clips it was not trained on, against the
/// majority-class baseline (most frequent token per head in `reference`).
/// With `window_seconds` > 0 each clip is cut into consecutive windows of that
/// length (the last may be shorter) and every window is masked and encoded on
/// its own; 0 encodes whole clips.
struct MaskedEvaluation {
  std::vector<double> accuracy_per_head;
  std::vector<double> majority_baseline_per_head;
  std::size_t masked_frames = 0;
};

MaskedEvaluation evaluate_masked_prediction(const model::Model<float>& model,
                                            std::span<const TrainingExample> held_out,
                                            std::span<const TrainingExample> reference,
                                            std::size_t mask_span, double mask_prob,
                                            std::uint64_t seed, double window_seconds = 0.0);

}  // namespace mert::pretrain

#endif  // MERT_PRETRAIN_HPP_
