// mert/probe.hpp

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

#ifndef MERT_PROBE_HPP_
#define MERT_PROBE_HPP_

#include "mert/audio_io.hpp"
#include "mert/dsp.hpp"
#include "mert/model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

// Frozen-representation evaluation: embedding extraction, shallow MLP probes
// with a learning-rate grid, and the metric suite.
namespace mert::probe {

enum class LayerMode { kIndex, kFinal, kAverage };

/// Which hidden state to read: an index into EncoderOutput::hidden_states,
/// the final one, or the mean over all of them.
struct LayerSpec {
  LayerMode mode = LayerMode::kFinal;
  std::size_t index = 0;

  /// "final", "average" or a non-negative integer.
  static LayerSpec parse(const std::string& text);
  std::string str() const;
};

struct EmbeddingOptions {
  LayerSpec layer;
  double window_seconds = 5.0;
};

struct ClipEmbedding {
  /// Frame-mean per window, averaged over windows (d_model values).
  std::vector<double> pooled;
  /// Concatenated per-window frame sequences (frames x d_model).
  dsp::FeatureMatrix frames;
  std::size_t windows = 0;
  /// The clip was shorter than one window and was zero-padded.
  bool padded = false;
};

/// Non-overlapping windows; the remainder after the last full window is
/// dropped. Throws std::out_of_range for a layer index beyond the model.
ClipEmbedding extract_embeddings(const model::Model<float>& model, const audio_io::AudioClip& clip,
                                 const EmbeddingOptions& options);

enum class TaskType { kMulticlass, kMultilabel, kRegression, kFramewise };

std::string to_string(TaskType type);
TaskType task_type_from_string(const std::string& name);

/// n rows of features with their labels. Multiclass: one class index per row.
/// Multilabel / framewise: `outputs` 0/1 columns. Regression: `outputs` real
/// columns.
struct ProbeData {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::size_t outputs = 1;
  std::vector<double> x;  // n x dim
  std::vector<double> y;  // n x outputs (class index for multiclass)

  std::span<const double> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
  std::span<const double> label(std::size_t i) const { return {y.data() + i * outputs, outputs}; }
  void append(std::span<const double> features, std::span<const double> labels);
};

struct ProbeSplits {
  ProbeData train;
  ProbeData valid;
  ProbeData test;
};

struct ProbeConfig {
  std::size_t hidden_units = 512;
  std::size_t batch_size = 64;
  std::vector<double> lr_grid = {1e-4, 5e-4, 1e-3, 5e-3, 1e-2};
  double dropout = 0.25;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 10;
  std::size_t lr_plateau_patience = 5;
  double lr_plateau_factor = 0.1;
  LayerSpec layer;
  double window_seconds = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One-hidden-layer ReLU MLP with dropout; inputs are standardised with the
/// training statistics.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed);

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  /// Raw outputs (logits or regression values), n x out row-major.
  std::vector<double> predict(const ProbeData& data) const;

 private:
  friend class ProbeTrainer;
  std::size_t in_ = 0, hidden_ = 0, out_ = 0;
  std::vector<double> mean_, inv_std_;
  std::vector<float> w1_, b1_, w2_, b2_;
};

struct LrTrial {
  double lr = 0.0;
  double best_valid = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<double> valid_curve;
};

struct ProbeResult {
  Mlp probe;
  std::string metric;
  double valid_metric = 0.0;
  double test_metric = 0.0;
  double best_lr = 0.0;
  std::vector<LrTrial> trials;
  std::size_t excluded_tags = 0;
};

/// Name of the selection / report metric for a task type.
std::string metric_name(TaskType type);

/// Grid search over lr_grid, each run with early stopping and LR reduction on
/// plateau; the run with the best validation metric is kept (first on ties).
/// `classes` is the class count for multiclass tasks. Throws DataError when
/// the training labels hold a single class.
ProbeResult train_probe(const ProbeSplits& splits, TaskType type, std::size_t classes,
                        const ProbeConfig& config, const std::string& task_name = "task");

/// Metric of raw probe outputs against labels.
double evaluate_outputs(std::span<const double> outputs, const ProbeData& data, TaskType type,
                        std::size_t* excluded_tags = nullptr);

// ---------------------------------------------------------------------------
// Metrics

double metric_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

/// Area under the ROC curve; tied scores count one half.
double metric_roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Non-interpolated average precision: sum over thresholds of recall gain
/// times precision, tied scores forming one threshold.
double metric_average_precision(std::span<const double> scores, std::span<const int> labels);

struct MacroMetric {
  double value = 0.0;
  std::size_t included = 0;
  std::size_t excluded = 0;  // tags with a single class in the labels
};

/// Column-wise macro averages over n x tags matrices.
MacroMetric metric_macro_roc_auc(std::span<const double> scores, std::span<const int> labels,
                                 std::size_t tags);
MacroMetric metric_macro_average_precision(std::span<const double> scores,
                                           std::span<const int> labels, std::size_t tags);

/// Coefficient of determination, averaged over `outputs` columns.
double metric_r2(std::span<const double> predicted, std::span<const double> labels,
                 std::size_t outputs = 1);

struct Key {
  int tonic = 0;  // pitch class, 0 = C
  bool minor = false;

  bool operator==(const Key&) const = default;
  /// "C major", "F# minor", "Bb major", ...
  static Key parse(const std::string& text);
  std::string str() const;
};

/// Credit for one prediction: exact 1, fifth above in the same mode 0.5,
/// relative major/minor 0.3, parallel major/minor 0.2, otherwise 0.
double key_credit(const Key& predicted, const Key& truth);
double metric_refined_key_accuracy(std::span<const Key> predicted, std::span<const Key> truth);

/// F-measure of event times under a maximum one-to-one matching of pairs
/// within `tolerance` seconds.
double metric_beat_f_measure(std::vector<double> predicted, std::vector<double> truth,
                             double tolerance = 0.02);

/// Frames whose probability is a local maximum above `threshold`, as times.
std::vector<double> pick_events(std::span<const double> probabilities, double frame_rate,
                                double threshold = 0.5);

}  // namespace mert::probe

#endif  // MERT_PROBE_HPP_
