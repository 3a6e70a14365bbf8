// mert/model.hpp

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

#ifndef MERT_MODEL_HPP_
#define MERT_MODEL_HPP_

#include "mert/grad.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mert::model {

struct ConvLayerSpec {
  std::size_t channels = 64;
  std::size_t kernel = 2;
  std::size_t stride = 1;
};

enum class LnMode { kPre, kPost };

std::string to_string(LnMode mode);
LnMode ln_mode_from_string(const std::string& name);

struct ModelConfig {
  std::vector<ConvLayerSpec> conv_layers = {{64, 10, 5}, {64, 8, 4}, {64, 4, 2}, {64, 4, 2},
                                            {64, 4, 2},  {64, 2, 2}, {64, 2, 1}};
  std::size_t d_model = 192;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 768;
  LnMode ln_mode = LnMode::kPre;
  /// Attention logits are divided by this constant (1 = plain attention).
  double attention_relaxation_c = 1.0;
  std::size_t pos_conv_kernel = 128;
  std::size_t pos_conv_groups = 16;
  /// Vocabulary of each acoustic prediction head.
  std::vector<std::size_t> head_vocab = {300, 200};
  /// Dimension of the projected outputs T(o_t) and codeword embeddings e_c.
  std::size_t codeword_dim = 64;
  std::size_t cqt_bins = 84;
  double tau = 0.1;
  double dropout = 0.0;
  std::uint64_t init_seed = 0;

  std::size_t total_stride() const;
  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  /// Number of trainable scalars implied by the configuration.
  std::size_t parameter_count() const;
};

template <typename T>
struct NamedParameter {
  std::string name;
  grad::Tensor<T> tensor;
};

template <typename T>
struct EncoderOutput {
  /// hidden_states[0] is the input to the first transformer layer (after the
  /// positional convolution); entry i >= 1 is the output of layer i, the last
  /// one including the final normalisation in Pre-LN mode.
  std::vector<grad::Tensor<T>> hidden_states;

  const grad::Tensor<T>& final() const { return hidden_states.back(); }
};

struct ForwardOptions {
  /// Sorted, unique frame indices replaced by the mask embedding.
  std::span<const std::size_t> masked;
  bool training = false;
  /// Source of dropout masks when training with dropout > 0.
  std::mt19937_64* dropout_rng = nullptr;
};

/// The student encoder: strided convolutional front end, feature projection,
/// mask substitution, convolutional positional embedding, transformer stack,
/// and prediction heads.
template <typename T>
class Model {
 public:
  using Tensor = grad::Tensor<T>;

  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  const Tensor& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  /// Frames produced for `samples` input samples (0 when shorter than one hop).
  std::size_t frames_for(std::size_t samples) const;

  /// Waveform -> L x d_model frame features. Throws on input shorter than one
  /// frame.
  Tensor conv_encode(std::span<const double> samples, const ForwardOptions& options = {}) const;

  /// Grouped convolution over frames, added residually by the encoder.
  Tensor positional_embedding(const Tensor& frames) const;

  /// Mask substitution, positional embedding and transformer layers.
  EncoderOutput<T> transformer_forward(const Tensor& frames, const ForwardOptions& options = {}) const;

  EncoderOutput<T> forward(std::span<const double> samples, const ForwardOptions& options = {}) const;

  /// T_j(o) for the rows of `outputs`.
  Tensor project(const Tensor& outputs, std::size_t head) const;
  /// cos(T_j(o_t), e_c) / tau for every row t and codeword c.
  Tensor acoustic_logits(const Tensor& outputs, std::size_t head) const;
  /// Linear CQT regression head.
  Tensor predict_cqt(const Tensor& outputs) const;

  /// Multi-head self-attention of one layer on an already normalised input.
  Tensor attention(const Tensor& x, std::size_t layer) const;

 private:
  Tensor& add_param(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                    double constant, std::mt19937_64& rng);
  Tensor linear(const Tensor& x, const std::string& prefix) const;
  Tensor norm(const Tensor& x, const std::string& prefix) const;
  Tensor dropout(const Tensor& x, const ForwardOptions& options) const;

  ModelConfig config_;
  std::vector<NamedParameter<T>> params_;
  std::vector<std::pair<std::string, std::size_t>> index_;  // sorted by name
};

/// Copies parameter values between models of the same configuration.
template <typename To, typename From>
void copy_parameters(const Model<From>& from, Model<To>& to);

/// FNV-1a over parameter names, shapes and float32 values.
template <typename T>
std::uint64_t parameter_hash(const Model<T>& model);

// ---------------------------------------------------------------------------
// Checkpoints

struct TensorRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
};

/// `MERTCKPT` v1: canonical config text, named float32 parameters, Adam
/// moments, text-serialised RNG state and step counter.
struct Checkpoint {
  std::string config_text;
  std::vector<TensorRecord> parameters;
  std::uint64_t step = 0;
  /// Successful optimiser updates (bias-correction count).
  std::uint64_t adam_updates = 0;
  std::vector<TensorRecord> adam_m;
  std::vector<TensorRecord> adam_v;
  std::string rng_state;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters of `model` as float32 records.
template <typename T>
std::vector<TensorRecord> export_parameters(const Model<T>& model);
/// Loads records by name; throws DataError on missing names or shape mismatch.
template <typename T>
void import_parameters(std::span<const TensorRecord> records, Model<T>& model);

}  // namespace mert::model

#endif  // MERT_MODEL_HPP_
