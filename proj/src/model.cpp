// src/model.cpp

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

#include "mert/model.hpp"

#include "mert/container.hpp"
#include "mert/errors.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mert::model {

std::string to_string(LnMode mode) { return mode == LnMode::kPre ? "pre" : "post"; }

LnMode ln_mode_from_string(const std::string& name) {
  if (name == "pre") return LnMode::kPre;
  if (name == "post") return LnMode::kPost;
  throw std::invalid_argument("unknown ln_mode '" + name + "' (expected pre or post)");
}

std::size_t ModelConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& c : conv_layers) s *= c.stride;
  return s;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (conv_layers.empty()) fail("no conv layers");
  for (const auto& c : conv_layers) {
    if (c.channels == 0 || c.kernel == 0 || c.stride == 0) fail("conv layer with zero size");
    if (c.kernel < c.stride) fail("conv kernel smaller than its stride");
  }
  if (total_stride() != 320) fail("conv stride product is " + std::to_string(total_stride()) + ", must be 320");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (!(attention_relaxation_c >= 1.0)) fail("attention_relaxation_c must be >= 1");
  if (pos_conv_kernel == 0 || pos_conv_groups == 0 || d_model % pos_conv_groups != 0) {
    fail("pos_conv_groups must divide d_model");
  }
  if (head_vocab.empty()) fail("no acoustic heads");
  for (std::size_t k : head_vocab)
    if (k == 0) fail("head with empty vocabulary");
  if (codeword_dim == 0) fail("codeword_dim must be positive");
  if (cqt_bins == 0) fail("cqt_bins must be positive");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

std::size_t ModelConfig::parameter_count() const {
  std::size_t n = 0, in = 1;
  for (const auto& c : conv_layers) {
    n += c.channels * in * c.kernel + c.channels + 2 * c.channels;
    in = c.channels;
  }
  const std::size_t d = d_model;
  n += 2 * in + in * d + d;                       // feature projection
  n += d;                                         // mask embedding
  n += d * (d / pos_conv_groups) * pos_conv_kernel + d;  // positional conv
  n += 2 * d;                                     // encoder norm
  n += n_layers * (4 * (d * d + d) + 4 * d + d * ffn_dim + ffn_dim + ffn_dim * d + d);
  for (std::size_t k : head_vocab) n += d * codeword_dim + codeword_dim + k * codeword_dim;
  n += d * cqt_bins + cqt_bins;
  return n;
}

template <typename T>
typename Model<T>::Tensor& Model<T>::add_param(const std::string& name, std::size_t rows,
                                               std::size_t cols, double stddev, double constant,
                                               std::mt19937_64& rng) {
  std::vector<T> v(rows * cols, T(constant));
  if (stddev > 0.0) {
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& x : v) x = T(nd(rng));
  }
  params_.push_back({name, Tensor::parameter({rows, cols}, std::move(v))});
  return params_.back().tensor;
}

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.init_seed);
  std::size_t in = 1;
  for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& c = config_.conv_layers[i];
    const std::string p = "conv." + std::to_string(i);
    add_param(p + ".weight", c.channels, in * c.kernel, std::sqrt(2.0 / double(in * c.kernel)), 0, rng);
    add_param(p + ".bias", 1, c.channels, 0, 0, rng);
    add_param(p + ".ln.gamma", 1, c.channels, 0, 1, rng);
    add_param(p + ".ln.beta", 1, c.channels, 0, 0, rng);
    in = c.channels;
  }
  const std::size_t d = config_.d_model;
  add_param("proj.ln.gamma", 1, in, 0, 1, rng);
  add_param("proj.ln.beta", 1, in, 0, 0, rng);
  add_param("proj.weight", in, d, 1.0 / std::sqrt(double(in)), 0, rng);
  add_param("proj.bias", 1, d, 0, 0, rng);
  add_param("mask_embedding", 1, d, 1.0, 0, rng);
  const std::size_t gin = d / config_.pos_conv_groups;
  add_param("pos.weight", d, gin * config_.pos_conv_kernel,
            std::sqrt(4.0 / double(config_.pos_conv_kernel * d)), 0, rng);
  add_param("pos.bias", 1, d, 0, 0, rng);
  add_param("encoder.ln.gamma", 1, d, 0, 1, rng);
  add_param("encoder.ln.beta", 1, d, 0, 0, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l);
    for (const char* w : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
      add_param(p + w + ".weight", d, d, 1.0 / std::sqrt(double(d)), 0, rng);
      add_param(p + w + ".bias", 1, d, 0, 0, rng);
    }
    add_param(p + ".ln1.gamma", 1, d, 0, 1, rng);
    add_param(p + ".ln1.beta", 1, d, 0, 0, rng);
    add_param(p + ".ln2.gamma", 1, d, 0, 1, rng);
    add_param(p + ".ln2.beta", 1, d, 0, 0, rng);
    add_param(p + ".ffn.fc1.weight", d, config_.ffn_dim, 1.0 / std::sqrt(double(d)), 0, rng);
    add_param(p + ".ffn.fc1.bias", 1, config_.ffn_dim, 0, 0, rng);
    add_param(p + ".ffn.fc2.weight", config_.ffn_dim, d, 1.0 / std::sqrt(double(config_.ffn_dim)), 0, rng);
    add_param(p + ".ffn.fc2.bias", 1, d, 0, 0, rng);
  }
  for (std::size_t j = 0; j < config_.head_vocab.size(); ++j) {
    const std::string p = "head." + std::to_string(j);
    add_param(p + ".proj.weight", d, config_.codeword_dim, 1.0 / std::sqrt(double(d)), 0, rng);
    add_param(p + ".proj.bias", 1, config_.codeword_dim, 0, 0, rng);
    add_param(p + ".codewords", config_.head_vocab[j], config_.codeword_dim, 1.0, 0, rng);
  }
  add_param("cqt_head.weight", d, config_.cqt_bins, 1.0 / std::sqrt(double(d)), 0, rng);
  add_param("cqt_head.bias", 1, config_.cqt_bins, 0, 0, rng);

  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace_back(params_[i].name, i);
  std::sort(index_.begin(), index_.end());
}

template <typename T>
const typename Model<T>::Tensor& Model<T>::parameter(const std::string& name) const {
  const auto it = std::lower_bound(index_.begin(), index_.end(), std::make_pair(name, std::size_t{0}));
  if (it == index_.end() || it->first != name) throw std::out_of_range("no parameter named '" + name + "'");
  return params_[it->second].tensor;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
std::size_t Model<T>::frames_for(std::size_t samples) const {
  std::size_t n = samples;
  for (const auto& c : config_.conv_layers) {
    if (n < c.stride) return 0;
    n = (n - c.stride) / c.stride + 1;
  }
  return n;
}

template <typename T>
typename Model<T>::Tensor Model<T>::linear(const Tensor& x, const std::string& prefix) const {
  return grad::add(grad::matmul(x, parameter(prefix + ".weight")), parameter(prefix + ".bias"));
}

template <typename T>
typename Model<T>::Tensor Model<T>::norm(const Tensor& x, const std::string& prefix) const {
  return grad::layer_norm(x, parameter(prefix + ".gamma"), parameter(prefix + ".beta"));
}

template <typename T>
typename Model<T>::Tensor Model<T>::dropout(const Tensor& x, const ForwardOptions& options) const {
  if (!options.training || config_.dropout <= 0.0 || options.dropout_rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - config_.dropout);
  std::vector<T> m(x.size());
  const T s = T(1.0 / (1.0 - config_.dropout));
  for (auto& v : m) v = keep(*options.dropout_rng) ? s : T(0);
  return grad::mul(x, Tensor::constant(x.shape(), std::move(m)));
}

template <typename T>
typename Model<T>::Tensor Model<T>::conv_encode(std::span<const double> samples,
                                                const ForwardOptions& options) const {
  if (frames_for(samples.size()) == 0) {
    throw std::invalid_argument("conv_encode: " + std::to_string(samples.size()) +
                                " samples is shorter than one frame (" +
                                std::to_string(config_.total_stride()) + ")");
  }
  Tensor x = Tensor::constant({samples.size(), 1}, std::vector<T>(samples.begin(), samples.end()));
  for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
    const auto& c = config_.conv_layers[i];
    const std::string p = "conv." + std::to_string(i);
    grad::Conv1dOptions o;
    o.stride = c.stride;
    o.pad_left = (c.kernel - c.stride) / 2;
    o.pad_right = c.kernel - c.stride - o.pad_left;
    x = grad::conv1d(x, parameter(p + ".weight"), parameter(p + ".bias"), c.kernel, o);
    x = grad::gelu(norm(x, p + ".ln"));
  }
  x = linear(norm(x, "proj.ln"), "proj");
  return dropout(x, options);
}

template <typename T>
typename Model<T>::Tensor Model<T>::positional_embedding(const Tensor& frames) const {
  grad::Conv1dOptions o;
  o.groups = config_.pos_conv_groups;
  o.pad_left = config_.pos_conv_kernel / 2;
  o.pad_right = config_.pos_conv_kernel - 1 - o.pad_left;
  return grad::gelu(
      grad::conv1d(frames, parameter("pos.weight"), parameter("pos.bias"), config_.pos_conv_kernel, o));
}

template <typename T>
typename Model<T>::Tensor Model<T>::attention(const Tensor& x, std::size_t layer) const {
  const std::string p = "layer." + std::to_string(layer) + ".attn";
  const Tensor q = linear(x, p + ".q");
  const Tensor k = linear(x, p + ".k");
  const Tensor v = linear(x, p + ".v");
  const std::size_t dh = config_.d_model / config_.n_heads;
  const T scale = T(1.0 / (std::sqrt(double(dh)) * config_.attention_relaxation_c));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < config_.n_heads; ++h) {
    const Tensor qh = grad::slice_cols(q, h * dh, dh);
    const Tensor kh = grad::slice_cols(k, h * dh, dh);
    const Tensor vh = grad::slice_cols(v, h * dh, dh);
    const Tensor probs = grad::softmax(grad::scale(grad::matmul_nt(qh, kh), scale));
    heads.push_back(grad::matmul(probs, vh));
  }
  const Tensor merged = heads.size() == 1 ? heads.front() : grad::concat_cols<T>(heads);
  return linear(merged, p + ".o");
}

template <typename T>
EncoderOutput<T> Model<T>::transformer_forward(const Tensor& frames,
                                               const ForwardOptions& options) const {
  const std::size_t L = frames.rows();
  if (frames.cols() != config_.d_model) {
    throw grad::ShapeError("transformer_forward: frames " + frames.shape().str() + " vs d_model " +
                           std::to_string(config_.d_model));
  }
  for (std::size_t i = 0; i < options.masked.size(); ++i) {
    if (options.masked[i] >= L || (i > 0 && options.masked[i] <= options.masked[i - 1])) {
      throw std::out_of_range("mask indices must be sorted, unique and below " + std::to_string(L));
    }
  }
  Tensor x = frames;
  if (!options.masked.empty()) {
    std::vector<T> keep(L, T(1)), ind(L, T(0));
    for (std::size_t t : options.masked) {
      keep[t] = T(0);
      ind[t] = T(1);
    }
    x = grad::add(grad::mul(x, Tensor::constant({L, 1}, std::move(keep))),
                  grad::matmul(Tensor::constant({L, 1}, std::move(ind)), parameter("mask_embedding")));
  }
  x = grad::add(x, positional_embedding(x));
  const bool pre = config_.ln_mode == LnMode::kPre;
  if (!pre) x = norm(x, "encoder.ln");
  x = dropout(x, options);

  EncoderOutput<T> out;
  out.hidden_states.push_back(x);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l);
    if (pre) {
      const Tensor h = grad::add(x, dropout(attention(norm(x, p + ".ln1"), l), options));
      const Tensor f = linear(grad::gelu(linear(norm(h, p + ".ln2"), p + ".ffn.fc1")), p + ".ffn.fc2");
      x = grad::add(h, dropout(f, options));
    } else {
      const Tensor h = norm(grad::add(x, dropout(attention(x, l), options)), p + ".ln1");
      const Tensor f = linear(grad::gelu(linear(h, p + ".ffn.fc1")), p + ".ffn.fc2");
      x = norm(grad::add(h, dropout(f, options)), p + ".ln2");
    }
    out.hidden_states.push_back(x);
  }
  if (pre) out.hidden_states.back() = norm(x, "encoder.ln");
  return out;
}

template <typename T>
EncoderOutput<T> Model<T>::forward(std::span<const double> samples, const ForwardOptions& options) const {
  return transformer_forward(conv_encode(samples, options), options);
}

template <typename T>
typename Model<T>::Tensor Model<T>::project(const Tensor& outputs, std::size_t head) const {
  if (head >= config_.head_vocab.size()) {
    throw std::out_of_range("head " + std::to_string(head) + " of " +
                            std::to_string(config_.head_vocab.size()));
  }
  return linear(outputs, "head." + std::to_string(head) + ".proj");
}

template <typename T>
typename Model<T>::Tensor Model<T>::acoustic_logits(const Tensor& outputs, std::size_t head) const {
  const Tensor& e = parameter("head." + std::to_string(head) + ".codewords");
  return grad::scale(grad::cosine_similarity_matrix(project(outputs, head), e), T(1.0 / config_.tau));
}

template <typename T>
typename Model<T>::Tensor Model<T>::predict_cqt(const Tensor& outputs) const {
  return linear(outputs, "cqt_head");
}

template <typename To, typename From>
void copy_parameters(const Model<From>& from, Model<To>& to) {
  auto& dst = to.parameters();
  const auto& src = from.parameters();
  if (dst.size() != src.size()) throw std::invalid_argument("copy_parameters: configurations differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw std::invalid_argument("copy_parameters: mismatch at " + src[i].name);
    }
    auto out = dst[i].tensor.mutable_values();
    const auto in = src[i].tensor.values();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = To(in[k]);
  }
}

template <typename T>
std::vector<TensorRecord> export_parameters(const Model<T>& model) {
  std::vector<TensorRecord> out;
  for (const auto& p : model.parameters()) {
    TensorRecord r;
    r.name = p.name;
    r.rows = p.tensor.rows();
    r.cols = p.tensor.cols();
    r.values.assign(p.tensor.values().begin(), p.tensor.values().end());
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
void import_parameters(std::span<const TensorRecord> records, Model<T>& model) {
  std::vector<std::pair<std::string, const TensorRecord*>> byname;
  for (const auto& r : records) byname.emplace_back(r.name, &r);
  std::sort(byname.begin(), byname.end());
  for (auto& p : model.parameters()) {
    const auto it = std::lower_bound(byname.begin(), byname.end(), std::make_pair(p.name, (const TensorRecord*)nullptr));
    if (it == byname.end() || it->first != p.name) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    const TensorRecord& r = *it->second;
    if (r.rows != p.tensor.rows() || r.cols != p.tensor.cols()) {
      throw DataError("checkpoint parameter '" + p.name + "' is " + std::to_string(r.rows) + "x" +
                      std::to_string(r.cols) + ", model expects " + p.tensor.shape().str());
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(r.values[i]);
  }
  if (records.size() != model.parameters().size()) {
    throw DataError("checkpoint has " + std::to_string(records.size()) + " parameters, model has " +
                    std::to_string(model.parameters().size()));
  }
}

template <typename T>
std::uint64_t parameter_hash(const Model<T>& model) {
  container::ByteWriter w;
  for (const auto& p : model.parameters()) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rows()));
    w.u32(static_cast<std::uint32_t>(p.tensor.cols()));
    for (T v : p.tensor.values()) w.f32(static_cast<float>(v));
  }
  return container::fnv1a(w.buffer());
}

namespace {

void write_records(container::ByteWriter& w, std::span<const TensorRecord> records) {
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.str(r.name);
    w.u32(static_cast<std::uint32_t>(r.rows));
    w.u32(static_cast<std::uint32_t>(r.cols));
    w.f32_array(std::span<const float>(r.values));
  }
}

std::vector<TensorRecord> read_records(container::ByteReader& r) {
  const std::uint32_t n = r.u32();
  std::vector<TensorRecord> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord t;
    t.name = r.str();
    t.rows = r.u32();
    t.cols = r.u32();
    t.values = r.f32_array(t.rows * t.cols);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  container::ByteWriter w;
  w.magic("MERTCKPT", 1);
  w.str(ckpt.config_text);
  write_records(w, ckpt.parameters);
  w.u64(ckpt.step);
  w.u64(ckpt.adam_updates);
  write_records(w, ckpt.adam_m);
  write_records(w, ckpt.adam_v);
  w.str(ckpt.rng_state);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  container::ByteReader r(bytes);
  r.expect_magic("MERTCKPT", 1);
  Checkpoint c;
  c.config_text = r.str();
  c.parameters = read_records(r);
  c.step = r.u64();
  c.adam_updates = r.u64();
  c.adam_m = read_records(r);
  c.adam_v = read_records(r);
  c.rng_state = r.str();
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  container::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(container::read_file(path));
}

template class Model<float>;
template class Model<double>;
template void copy_parameters<float, double>(const Model<double>&, Model<float>&);
template void copy_parameters<double, float>(const Model<float>&, Model<double>&);
template void copy_parameters<float, float>(const Model<float>&, Model<float>&);
template void copy_parameters<double, double>(const Model<double>&, Model<double>&);
template std::vector<TensorRecord> export_parameters(const Model<float>&);
template std::vector<TensorRecord> export_parameters(const Model<double>&);
template void import_parameters(std::span<const TensorRecord>, Model<float>&);
template void import_parameters(std::span<const TensorRecord>, Model<double>&);
template std::uint64_t parameter_hash(const Model<float>&);
template std::uint64_t parameter_hash(const Model<double>&);

}  // namespace mert::model
