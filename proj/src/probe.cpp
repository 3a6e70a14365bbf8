// src/probe.cpp

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

#include "mert/probe.hpp"

#include "mert/errors.hpp"
#include "mert/grad.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace mert::probe {

using grad::Tensor;

LayerSpec LayerSpec::parse(const std::string& text) {
  if (text == "final") return {LayerMode::kFinal, 0};
  if (text == "average" || text == "avg") return {LayerMode::kAverage, 0};
  if (!text.empty() && std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
    return {LayerMode::kIndex, static_cast<std::size_t>(std::stoul(text))};
  }
  throw std::invalid_argument("layer must be 'final', 'average' or an index, got '" + text + "'");
}

std::string LayerSpec::str() const {
  switch (mode) {
    case LayerMode::kFinal: return "final";
    case LayerMode::kAverage: return "average";
    case LayerMode::kIndex: return std::to_string(index);
  }
  return "final";
}

ClipEmbedding extract_embeddings(const model::Model<float>& model, const audio_io::AudioClip& clip,
                                 const EmbeddingOptions& options) {
  const std::size_t layers = model.config().n_layers + 1;
  if (options.layer.mode == LayerMode::kIndex && options.layer.index >= layers) {
    throw std::out_of_range("layer " + std::to_string(options.layer.index) + " out of range, model has " +
                            std::to_string(layers) + " hidden states");
  }
  const auto window = static_cast<std::size_t>(std::llround(options.window_seconds * clip.sample_rate));
  if (window == 0) throw std::invalid_argument("extract_embeddings: window must be positive");
  if (clip.samples.empty()) throw std::invalid_argument("extract_embeddings: empty clip");
  const std::size_t d = model.config().d_model;
  ClipEmbedding out;
  out.pooled.assign(d, 0.0);
  out.frames.kind = dsp::FeatureKind::kEmbedding;
  out.frames.dims = d;
  out.frames.frame_rate = double(clip.sample_rate) / double(model.config().total_stride());

  std::vector<std::vector<double>> windows;
  if (clip.samples.size() < window) {
    std::vector<double> w(clip.samples);
    w.resize(window, 0.0);
    windows.push_back(std::move(w));
    out.padded = true;
  } else {
    for (std::size_t s = 0; s + window <= clip.samples.size(); s += window)
      windows.emplace_back(clip.samples.begin() + static_cast<std::ptrdiff_t>(s),
                           clip.samples.begin() + static_cast<std::ptrdiff_t>(s + window));
  }
  out.windows = windows.size();
  grad::NoGradGuard guard;
  for (const auto& w : windows) {
    const auto enc = model.forward(w);
    const std::size_t L = enc.final().rows();
    std::vector<double> rep(L * d, 0.0);
    auto accumulate = [&](const Tensor<float>& h, double weight) {
      const auto v = h.values();
      for (std::size_t i = 0; i < rep.size(); ++i) rep[i] += weight * double(v[i]);
    };
    switch (options.layer.mode) {
      case LayerMode::kFinal: accumulate(enc.final(), 1.0); break;
      case LayerMode::kIndex: accumulate(enc.hidden_states[options.layer.index], 1.0); break;
      case LayerMode::kAverage:
        for (const auto& h : enc.hidden_states) accumulate(h, 1.0 / double(enc.hidden_states.size()));
        break;
    }
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t k = 0; k < d; ++k) out.pooled[k] += rep[t * d + k] / double(L);
    out.frames.values.insert(out.frames.values.end(), rep.begin(), rep.end());
    out.frames.frames += L;
  }
  for (double& v : out.pooled) v /= double(windows.size());
  if (out.padded) {
    const std::size_t keep = std::max<std::size_t>(1, model.frames_for(clip.samples.size()));
    out.frames.frames = std::min(out.frames.frames, keep);
    out.frames.values.resize(out.frames.frames * d);
  }
  return out;
}

std::string to_string(TaskType type) {
  switch (type) {
    case TaskType::kMulticlass: return "multiclass";
    case TaskType::kMultilabel: return "multilabel";
    case TaskType::kRegression: return "regression";
    case TaskType::kFramewise: return "framewise";
  }
  return "multiclass";
}

TaskType task_type_from_string(const std::string& name) {
  for (auto t : {TaskType::kMulticlass, TaskType::kMultilabel, TaskType::kRegression, TaskType::kFramewise})
    if (to_string(t) == name) return t;
  throw std::invalid_argument("unknown task type '" + name + "'");
}

void ProbeData::append(std::span<const double> features, std::span<const double> labels) {
  if (n == 0 && x.empty()) {
    dim = features.size();
    outputs = labels.size();
  }
  if (features.size() != dim || labels.size() != outputs) {
    throw std::invalid_argument("ProbeData::append: row shape differs from earlier rows");
  }
  x.insert(x.end(), features.begin(), features.end());
  y.insert(y.end(), labels.begin(), labels.end());
  ++n;
}

void ProbeConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("probe config: " + what); };
  if (hidden_units == 0) fail("hidden_units must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (lr_grid.empty()) fail("lr_grid is empty");
  for (double lr : lr_grid)
    if (!(lr > 0.0)) fail("learning rates must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (early_stop_patience == 0 || lr_plateau_patience == 0) fail("patience must be >= 1");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (!(lr_plateau_factor > 0.0 && lr_plateau_factor <= 1.0)) fail("lr_plateau_factor must lie in (0, 1]");
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::uint64_t seed)
    : in_(in), hidden_(hidden), out_(out), mean_(in, 0.0), inv_std_(in, 1.0) {
  std::mt19937_64 rng(seed);
  auto init = [&](std::vector<float>& w, std::size_t n, std::size_t fan_in) {
    const double b = 1.0 / std::sqrt(double(fan_in));
    std::uniform_real_distribution<double> u(-b, b);
    w.resize(n);
    for (auto& v : w) v = float(u(rng));
  };
  init(w1_, in * hidden, in);
  init(b1_, hidden, in);
  init(w2_, hidden * out, hidden);
  init(b2_, out, hidden);
}

std::vector<double> Mlp::predict(const ProbeData& data) const {
  if (data.dim != in_) {
    throw std::invalid_argument("probe expects " + std::to_string(in_) + " features, got " +
                                std::to_string(data.dim));
  }
  std::vector<double> out(data.n * out_, 0.0);
  std::vector<double> h(hidden_), xs(in_);
  for (std::size_t i = 0; i < data.n; ++i) {
    const auto x = data.row(i);
    for (std::size_t k = 0; k < in_; ++k) xs[k] = (x[k] - mean_[k]) * inv_std_[k];
    for (std::size_t j = 0; j < hidden_; ++j) h[j] = b1_[j];
    for (std::size_t k = 0; k < in_; ++k) {
      const float* w = w1_.data() + k * hidden_;
      for (std::size_t j = 0; j < hidden_; ++j) h[j] += xs[k] * w[j];
    }
    for (auto& a : h) a = std::max(0.0, a);
    for (std::size_t o = 0; o < out_; ++o) {
      double a = b2_[o];
      for (std::size_t j = 0; j < hidden_; ++j) a += h[j] * w2_[j * out_ + o];
      out[i * out_ + o] = a;
    }
  }
  return out;
}

std::string metric_name(TaskType type) {
  switch (type) {
    case TaskType::kMulticlass: return "accuracy";
    case TaskType::kMultilabel: return "roc_auc";
    case TaskType::kRegression: return "r2";
    case TaskType::kFramewise: return "average_precision";
  }
  return "accuracy";
}

double evaluate_outputs(std::span<const double> outputs, const ProbeData& data, TaskType type,
                        std::size_t* excluded_tags) {
  switch (type) {
    case TaskType::kMulticlass: {
      const std::size_t k = outputs.size() / std::max<std::size_t>(1, data.n);
      std::vector<std::size_t> pred(data.n), truth(data.n);
      for (std::size_t i = 0; i < data.n; ++i) {
        const auto row = outputs.subspan(i * k, k);
        pred[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        truth[i] = static_cast<std::size_t>(data.y[i]);
      }
      return metric_accuracy(pred, truth);
    }
    case TaskType::kMultilabel:
    case TaskType::kFramewise: {
      std::vector<int> labels(data.y.size());
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = data.y[i] > 0.5 ? 1 : 0;
      const MacroMetric m = type == TaskType::kMultilabel
                                ? metric_macro_roc_auc(outputs, labels, data.outputs)
                                : metric_macro_average_precision(outputs, labels, data.outputs);
      if (excluded_tags) *excluded_tags = m.excluded;
      return m.value;
    }
    case TaskType::kRegression:
      return metric_r2(outputs, data.y, data.outputs);
  }
  return 0.0;
}

// Trains one probe at a fixed initial learning rate.
class ProbeTrainer {
 public:
  ProbeTrainer(const ProbeSplits& splits, TaskType type, std::size_t out, const ProbeConfig& config)
      : splits_(splits), type_(type), out_(out), config_(config) {}

  LrTrial run(double lr, std::uint64_t seed, Mlp& best) const {
    const ProbeData& tr = splits_.train;
    Mlp mlp(tr.dim, config_.hidden_units, out_, seed);
    std::vector<double> mean(tr.dim, 0.0), var(tr.dim, 0.0);
    for (std::size_t i = 0; i < tr.n; ++i)
      for (std::size_t k = 0; k < tr.dim; ++k) mean[k] += tr.x[i * tr.dim + k] / double(tr.n);
    for (std::size_t i = 0; i < tr.n; ++i)
      for (std::size_t k = 0; k < tr.dim; ++k) {
        const double e = tr.x[i * tr.dim + k] - mean[k];
        var[k] += e * e / double(tr.n);
      }
    mlp.mean_ = mean;
    for (std::size_t k = 0; k < tr.dim; ++k) mlp.inv_std_[k] = var[k] > 1e-12 ? 1.0 / std::sqrt(var[k]) : 1.0;
    std::vector<float> xs(tr.n * tr.dim);
    for (std::size_t i = 0; i < tr.n; ++i)
      for (std::size_t k = 0; k < tr.dim; ++k)
        xs[i * tr.dim + k] = float((tr.x[i * tr.dim + k] - mean[k]) * mlp.inv_std_[k]);

    const std::size_t H = config_.hidden_units;
    auto w1 = Tensor<float>::parameter({tr.dim, H}, mlp.w1_);
    auto b1 = Tensor<float>::parameter({1, H}, mlp.b1_);
    auto w2 = Tensor<float>::parameter({H, out_}, mlp.w2_);
    auto b2 = Tensor<float>::parameter({1, out_}, mlp.b2_);
    std::vector<Tensor<float>> params = {w1, b1, w2, b2};
    std::vector<std::vector<double>> m(4), v(4);
    for (std::size_t p = 0; p < 4; ++p) {
      m[p].assign(params[p].size(), 0.0);
      v[p].assign(params[p].size(), 0.0);
    }
    auto snapshot = [&](Mlp& dst) {
      dst = mlp;
      dst.w1_.assign(w1.values().begin(), w1.values().end());
      dst.b1_.assign(b1.values().begin(), b1.values().end());
      dst.w2_.assign(w2.values().begin(), w2.values().end());
      dst.b2_.assign(b2.values().begin(), b2.values().end());
    };

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::bernoulli_distribution keep(1.0 - config_.dropout);
    std::vector<std::size_t> order(tr.n);
    std::iota(order.begin(), order.end(), 0);
    LrTrial trial;
    trial.lr = lr;
    trial.best_valid = -std::numeric_limits<double>::infinity();
    double cur_lr = lr;
    std::size_t since_best = 0, since_reduce = 0, updates = 0;
    Mlp current;
    for (std::size_t epoch = 0; epoch < config_.max_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t s = 0; s < tr.n; s += config_.batch_size) {
        const std::size_t bn = std::min(config_.batch_size, tr.n - s);
        std::vector<float> xb(bn * tr.dim);
        for (std::size_t i = 0; i < bn; ++i)
          std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(order[s + i] * tr.dim), tr.dim,
                      xb.begin() + static_cast<std::ptrdiff_t>(i * tr.dim));
        const auto x = Tensor<float>::constant({bn, tr.dim}, std::move(xb));
        Tensor<float> h = grad::relu(grad::add(grad::matmul(x, w1), b1));
        if (config_.dropout > 0.0) {
          std::vector<float> mask(bn * H);
          const float sc = float(1.0 / (1.0 - config_.dropout));
          for (auto& q : mask) q = keep(rng) ? sc : 0.0f;
          h = grad::mul(h, Tensor<float>::constant({bn, H}, std::move(mask)));
        }
        const Tensor<float> o = grad::add(grad::matmul(h, w2), b2);
        Tensor<float> loss;
        if (type_ == TaskType::kMulticlass) {
          std::vector<std::size_t> cls(bn);
          for (std::size_t i = 0; i < bn; ++i) cls[i] = static_cast<std::size_t>(tr.y[order[s + i]]);
          loss = grad::scale(grad::sum(grad::select_per_row(grad::log_softmax(o),
                                                            std::span<const std::size_t>(cls))),
                             float(-1.0 / double(bn)));
        } else {
          std::vector<float> yb(bn * out_);
          for (std::size_t i = 0; i < bn; ++i)
            for (std::size_t k = 0; k < out_; ++k) yb[i * out_ + k] = float(tr.y[order[s + i] * out_ + k]);
          const auto y = Tensor<float>::constant({bn, out_}, std::move(yb));
          loss = type_ == TaskType::kRegression ? grad::mse(o, y) : grad::bce_with_logits(o, y);
        }
        for (auto& p : params) p.zero_grad();
        grad::backward(loss);
        ++updates;
        const double c1 = 1.0 - std::pow(0.9, double(updates));
        const double c2 = 1.0 - std::pow(0.999, double(updates));
        for (std::size_t p = 0; p < 4; ++p) {
          const auto g = params[p].grad();
          if (g.empty()) continue;
          auto w = params[p].mutable_values();
          for (std::size_t i = 0; i < w.size(); ++i) {
            m[p][i] = 0.9 * m[p][i] + 0.1 * g[i];
            v[p][i] = 0.999 * v[p][i] + 0.001 * double(g[i]) * g[i];
            w[i] = float(w[i] - cur_lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + 1e-8));
          }
        }
      }
      snapshot(current);
      const double val = evaluate_outputs(current.predict(splits_.valid), splits_.valid, type_);
      trial.valid_curve.push_back(val);
      trial.epochs_run = epoch + 1;
      if (val > trial.best_valid) {
        trial.best_valid = val;
        trial.best_epoch = epoch;
        best = current;
        since_best = 0;
        since_reduce = 0;
      } else {
        ++since_best;
        ++since_reduce;
        if (since_best >= config_.early_stop_patience) break;
        if (since_reduce >= config_.lr_plateau_patience) {
          cur_lr *= config_.lr_plateau_factor;
          since_reduce = 0;
        }
      }
    }
    return trial;
  }

 private:
  const ProbeSplits& splits_;
  TaskType type_;
  std::size_t out_;
  const ProbeConfig& config_;
};

ProbeResult train_probe(const ProbeSplits& splits, TaskType type, std::size_t classes,
                        const ProbeConfig& config, const std::string& task_name) {
  config.validate();
  const ProbeData& tr = splits.train;
  if (tr.n == 0 || splits.valid.n == 0 || splits.test.n == 0) {
    throw DataError("task '" + task_name + "': every split needs at least one example");
  }
  if (splits.valid.dim != tr.dim || splits.test.dim != tr.dim) {
    throw DataError("task '" + task_name + "': splits have different feature dimensions");
  }
  std::size_t out = tr.outputs;
  if (type == TaskType::kMulticlass) {
    if (classes < 2) throw DataError("task '" + task_name + "': multiclass needs >= 2 classes");
    std::set<long> seen;
    for (const ProbeData* d : {&splits.train, &splits.valid, &splits.test})
      for (double y : d->y) {
        if (y < 0 || y >= double(classes) || y != std::floor(y)) {
          throw DataError("task '" + task_name + "': class label " + std::to_string(y) + " outside [0, " +
                          std::to_string(classes) + ")");
        }
      }
    for (double y : tr.y) seen.insert(long(y));
    if (seen.size() < 2) {
      throw DataError("task '" + task_name + "': training labels hold a single class");
    }
    out = classes;
  } else if (type != TaskType::kRegression) {
    bool any_two = false;
    for (std::size_t k = 0; k < tr.outputs; ++k) {
      bool pos = false, neg = false;
      for (std::size_t i = 0; i < tr.n; ++i) (tr.y[i * tr.outputs + k] > 0.5 ? pos : neg) = true;
      any_two = any_two || (pos && neg);
    }
    if (!any_two) throw DataError("task '" + task_name + "': training labels hold a single class");
  }

  ProbeResult result;
  result.metric = metric_name(type);
  result.valid_metric = -std::numeric_limits<double>::infinity();
  const ProbeTrainer trainer(splits, type, out, config);
  for (std::size_t i = 0; i < config.lr_grid.size(); ++i) {
    Mlp best;
    const std::uint64_t seed = config.seed * 1000003ULL + i;
    LrTrial trial = trainer.run(config.lr_grid[i], seed, best);
    if (trial.best_valid > result.valid_metric) {
      result.valid_metric = trial.best_valid;
      result.best_lr = trial.lr;
      result.probe = std::move(best);
    }
    result.trials.push_back(std::move(trial));
  }
  result.test_metric = evaluate_outputs(result.probe.predict(splits.test), splits.test, type,
                                        &result.excluded_tags);
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

double metric_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (labels.empty()) throw std::invalid_argument("accuracy: no items");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return double(hit) / double(labels.size());
}

double metric_roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: length mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the Mann-Whitney statistic, kept integral.
  long long twice_u = 0, neg_below = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    long long p = 0, n = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? p : n) += 1;
      ++j;
    }
    twice_u += p * (2 * neg_below + n);
    neg_below += n;
    pos += p;
    neg += n;
    i = j;
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("roc_auc: labels hold a single class");
  return double(twice_u) / (2.0 * double(pos) * double(neg));
}

double metric_average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: length mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t total_pos = 0;
  for (int l : labels) total_pos += l != 0;
  if (total_pos == 0) throw std::invalid_argument("average_precision: no positive labels");
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, gained = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      gained += labels[idx[j]] != 0;
      ++j;
    }
    tp += gained;
    seen += j - i;
    ap += (double(gained) / double(total_pos)) * (double(tp) / double(seen));
    i = j;
  }
  return ap;
}

namespace {

template <typename F>
MacroMetric macro(std::span<const double> scores, std::span<const int> labels, std::size_t tags, F metric) {
  if (tags == 0 || scores.size() != labels.size() || scores.size() % tags != 0) {
    throw std::invalid_argument("macro metric: inconsistent shapes");
  }
  const std::size_t n = scores.size() / tags;
  MacroMetric m;
  double sum = 0.0;
  for (std::size_t k = 0; k < tags; ++k) {
    std::vector<double> s(n);
    std::vector<int> l(n);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i * tags + k];
      l[i] = labels[i * tags + k] != 0;
      pos += l[i];
    }
    if (pos == 0 || pos == n) {
      ++m.excluded;
      continue;
    }
    sum += metric(std::span<const double>(s), std::span<const int>(l));
    ++m.included;
  }
  m.value = m.included ? sum / double(m.included) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

}  // namespace

MacroMetric metric_macro_roc_auc(std::span<const double> scores, std::span<const int> labels,
                                 std::size_t tags) {
  return macro(scores, labels, tags, metric_roc_auc);
}

MacroMetric metric_macro_average_precision(std::span<const double> scores, std::span<const int> labels,
                                           std::size_t tags) {
  return macro(scores, labels, tags, metric_average_precision);
}

double metric_r2(std::span<const double> predicted, std::span<const double> labels, std::size_t outputs) {
  if (predicted.size() != labels.size() || outputs == 0 || labels.size() % outputs != 0 || labels.empty()) {
    throw std::invalid_argument("r2: inconsistent shapes");
  }
  const std::size_t n = labels.size() / outputs;
  double total = 0.0;
  for (std::size_t k = 0; k < outputs; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += labels[i * outputs + k];
    mean /= double(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels[i * outputs + k];
      ss_res += (y - predicted[i * outputs + k]) * (y - predicted[i * outputs + k]);
      ss_tot += (y - mean) * (y - mean);
    }
    if (ss_tot == 0.0) throw DegenerateDataError("r2: constant labels");
    total += 1.0 - ss_res / ss_tot;
  }
  return total / double(outputs);
}

Key Key::parse(const std::string& text) {
  static const char* names = "C?D?EF?G?A?B";
  const auto space = text.find(' ');
  if (space == std::string::npos || space == 0) throw std::invalid_argument("invalid key '" + text + "'");
  const std::string tonic = text.substr(0, space), mode = text.substr(space + 1);
  const char* p = std::strchr(names, std::toupper(static_cast<unsigned char>(tonic[0])));
  if (p == nullptr || *p == '?') throw std::invalid_argument("invalid key tonic in '" + text + "'");
  int pc = static_cast<int>(p - names);
  for (std::size_t i = 1; i < tonic.size(); ++i) {
    if (tonic[i] == '#') ++pc;
    else if (tonic[i] == 'b') --pc;
    else throw std::invalid_argument("invalid key tonic in '" + text + "'");
  }
  Key k;
  k.tonic = ((pc % 12) + 12) % 12;
  if (mode == "major") k.minor = false;
  else if (mode == "minor") k.minor = true;
  else throw std::invalid_argument("invalid key mode in '" + text + "'");
  return k;
}

std::string Key::str() const {
  static const char* names[] = {"C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};
  return std::string(names[tonic]) + (minor ? " minor" : " major");
}

double key_credit(const Key& predicted, const Key& truth) {
  if (predicted.tonic < 0 || predicted.tonic > 11 || truth.tonic < 0 || truth.tonic > 11) {
    throw std::invalid_argument("key tonic must lie in [0, 11]");
  }
  if (predicted == truth) return 1.0;
  const int up = ((predicted.tonic - truth.tonic) % 12 + 12) % 12;
  if (predicted.minor == truth.minor && up == 7) return 0.5;
  if (!truth.minor && predicted.minor && up == 9) return 0.3;
  if (truth.minor && !predicted.minor && up == 3) return 0.3;
  if (predicted.minor != truth.minor && up == 0) return 0.2;
  return 0.0;
}

double metric_refined_key_accuracy(std::span<const Key> predicted, std::span<const Key> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("key accuracy: length mismatch");
  if (truth.empty()) throw std::invalid_argument("key accuracy: no items");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += key_credit(predicted[i], truth[i]);
  return s / double(truth.size());
}

double metric_beat_f_measure(std::vector<double> predicted, std::vector<double> truth, double tolerance) {
  std::sort(predicted.begin(), predicted.end());
  std::sort(truth.begin(), truth.end());
  if (predicted.empty() && truth.empty()) return 1.0;
  if (predicted.empty() || truth.empty()) return 0.0;
  // Maximum matching; with sorted events and a symmetric window the in-order
  // sweep is optimal.
  std::size_t matched = 0;
  for (std::size_t i = 0, j = 0; i < truth.size() && j < predicted.size();) {
    const double d = predicted[j] - truth[i];
    if (d < -tolerance) {
      ++j;
    } else if (d > tolerance) {
      ++i;
    } else {
      ++matched;
      ++i;
      ++j;
    }
  }
  if (matched == 0) return 0.0;
  const double precision = double(matched) / double(predicted.size());
  const double recall = double(matched) / double(truth.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<double> pick_events(std::span<const double> probabilities, double frame_rate, double threshold) {
  std::vector<double> events;
  for (std::size_t t = 0; t < probabilities.size(); ++t) {
    const double p = probabilities[t];
    if (p <= threshold) continue;
    const bool left = t == 0 || p > probabilities[t - 1];
    const bool right = t + 1 == probabilities.size() || p >= probabilities[t + 1];
    if (left && right) events.push_back(double(t) / frame_rate);
  }
  return events;
}

}  // namespace mert::probe
