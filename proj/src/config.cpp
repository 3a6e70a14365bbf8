// src/config.cpp

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

#include "mert/config.hpp"

#include "mert/container.hpp"

#include <functional>
#include <stdexcept>
#include <type_traits>

namespace mert::config {

using nlohmann::json;

namespace {

template <typename S>
struct Field {
  std::string name;
  std::function<json(const S&)> get;
  std::function<void(S&, const json&)> set;
};

template <typename V>
V convert(const json& j, const std::string& key) {
  try {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (!j.is_number_integer() || j.get<long long>() < 0) throw std::invalid_argument("");
    } else if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw std::invalid_argument("");
    } else if constexpr (std::is_arithmetic_v<V>) {
      if (!j.is_number()) throw std::invalid_argument("");
    }
    return j.get<V>();
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' has an invalid value " + j.dump());
  }
}

template <typename S, typename V>
Field<S> member(const std::string& name, V S::*m) {
  return {name, [m](const S& s) { return json(s.*m); },
          [m, name](S& s, const json& j) { s.*m = convert<V>(j, name); }};
}

template <typename S, typename Sub, typename V>
Field<S> nested(const std::string& name, Sub S::*sub, V Sub::*m) {
  return {name, [sub, m](const S& s) { return json(s.*sub.*m); },
          [sub, m, name](S& s, const json& j) { s.*sub.*m = convert<V>(j, name); }};
}

template <typename S, typename E>
Field<S> enumerated(const std::string& name, E S::*m, std::string (*str)(E), E (*parse)(const std::string&)) {
  return {name, [m, str](const S& s) { return json(str(s.*m)); },
          [m, parse, name](S& s, const json& j) {
            if (!j.is_string()) throw std::invalid_argument("config key '" + name + "' expects a string");
            s.*m = parse(j.get<std::string>());
          }};
}

std::string feature_name(dsp::FeatureKind k) { return dsp::to_string(k); }
std::string teacher_name(teachers::TeacherKind k) { return teachers::to_string(k); }
std::string ln_name(model::LnMode m) { return model::to_string(m); }
std::string codebook_name(pretrain::CodebookMode m) { return pretrain::to_string(m); }

const std::vector<Field<teachers::TeacherConfig>>& teacher_fields() {
  using T = teachers::TeacherConfig;
  static const std::vector<Field<T>> f = {
      enumerated<T, teachers::TeacherKind>("kind", &T::kind, teacher_name, teachers::teacher_kind_from_string),
      {"kmeans_heads",
       [](const T& t) {
         json a = json::array();
         for (const auto& h : t.kmeans_heads) a.push_back({{"feature", feature_name(h.feature)}, {"k", h.k}});
         return a;
       },
       [](T& t, const json& j) {
         if (!j.is_array()) throw std::invalid_argument("config key 'kmeans_heads' expects an array");
         t.kmeans_heads.clear();
         for (const auto& e : j) {
           if (!e.is_object() || !e.contains("feature") || !e.contains("k") || e.size() != 2) {
             throw std::invalid_argument("config key 'kmeans_heads' entries need exactly 'feature' and 'k'");
           }
           t.kmeans_heads.push_back({dsp::feature_kind_from_string(convert<std::string>(e["feature"], "feature")),
                                     convert<std::size_t>(e["k"], "kmeans_heads.k")});
         }
       }},
      member("rvq_stages", &T::rvq_stages),
      member("rvq_k", &T::rvq_k),
      nested("n_mels", &T::logmel, &dsp::LogMelOptions::n_mels),
      nested("n_fft", &T::logmel, &dsp::LogMelOptions::n_fft),
      nested("mel_f_min", &T::logmel, &dsp::LogMelOptions::f_min),
      nested("mel_f_max", &T::logmel, &dsp::LogMelOptions::f_max),
      member("mfcc_coeffs", &T::mfcc_coeffs),
      member("mfcc_context", &T::mfcc_context),
      nested("chroma_left", &T::chroma_layout, &dsp::StackLayout::left),
      nested("chroma_right", &T::chroma_layout, &dsp::StackLayout::right),
      nested("cqt_f_min", &T::cqt, &dsp::CQTParams::f_min),
      nested("cqt_bins_per_octave", &T::cqt, &dsp::CQTParams::bins_per_octave),
      nested("cqt_n_bins", &T::cqt, &dsp::CQTParams::n_bins),
      nested("cqt_log_floor", &T::cqt, &dsp::CQTParams::log_floor),
      member("standardize", &T::standardize),
      member("max_iters", &T::max_iters),
      member("tol", &T::tol),
      member("max_fit_rows", &T::max_fit_rows),
  };
  return f;
}

const std::vector<Field<model::ModelConfig>>& model_fields() {
  using M = model::ModelConfig;
  static const std::vector<Field<M>> f = {
      {"conv_layers",
       [](const M& m) {
         json a = json::array();
         for (const auto& c : m.conv_layers) a.push_back(json::array({c.channels, c.kernel, c.stride}));
         return a;
       },
       [](M& m, const json& j) {
         if (!j.is_array()) throw std::invalid_argument("config key 'conv_layers' expects an array");
         m.conv_layers.clear();
         for (const auto& e : j) {
           if (!e.is_array() || e.size() != 3) {
             throw std::invalid_argument("config key 'conv_layers' entries are [channels, kernel, stride]");
           }
           m.conv_layers.push_back({convert<std::size_t>(e[0], "conv_layers"),
                                    convert<std::size_t>(e[1], "conv_layers"),
                                    convert<std::size_t>(e[2], "conv_layers")});
         }
       }},
      member("d_model", &M::d_model),
      member("n_layers", &M::n_layers),
      member("n_heads", &M::n_heads),
      member("ffn_dim", &M::ffn_dim),
      enumerated<M, model::LnMode>("ln_mode", &M::ln_mode, ln_name, model::ln_mode_from_string),
      member("attention_relaxation_c", &M::attention_relaxation_c),
      member("pos_conv_kernel", &M::pos_conv_kernel),
      member("pos_conv_groups", &M::pos_conv_groups),
      member("codeword_dim", &M::codeword_dim),
      member("tau", &M::tau),
      member("dropout", &M::dropout),
  };
  return f;
}

const std::vector<Field<pretrain::TrainConfig>>& train_fields() {
  using P = pretrain::TrainConfig;
  static const std::vector<Field<P>> f = {
      member("alpha", &P::alpha),
      member("musical_weight", &P::musical_weight),
      member("mixup_prob", &P::mixup_prob),
      member("mixup_gain_min", &P::mixup_gain_min),
      member("mixup_gain_max", &P::mixup_gain_max),
      member("mixup_excerpt_min", &P::mixup_excerpt_min),
      member("mixup_excerpt_max", &P::mixup_excerpt_max),
      member("lr", &P::lr),
      member("warmup_steps", &P::warmup_steps),
      member("linear_decay", &P::linear_decay),
      member("grad_clip", &P::grad_clip),
      member("adam_beta1", &P::adam_beta1),
      member("adam_beta2", &P::adam_beta2),
      member("adam_eps", &P::adam_eps),
      member("batch_clips", &P::batch_clips),
      member("steps", &P::steps),
      enumerated<P, pretrain::CodebookMode>("codebook_mode", &P::codebook_mode, codebook_name,
                                            pretrain::codebook_mode_from_string),
      member("single_head", &P::single_head),
      member("mask_span", &P::mask_span),
      member("mask_prob", &P::mask_prob),
      member("cqt_bias_from_targets", &P::cqt_bias_from_targets),
      member("segment_seconds", &P::segment_seconds),
      member("checkpoint_every", &P::checkpoint_every),
  };
  return f;
}

const std::vector<Field<probe::ProbeConfig>>& probe_fields() {
  using Q = probe::ProbeConfig;
  static const std::vector<Field<Q>> f = {
      member("hidden_units", &Q::hidden_units),
      member("batch_size", &Q::batch_size),
      {"lr_grid", [](const Q& q) { return json(q.lr_grid); },
       [](Q& q, const json& j) {
         if (!j.is_array()) throw std::invalid_argument("config key 'lr_grid' expects an array");
         q.lr_grid.clear();
         for (const auto& e : j) q.lr_grid.push_back(convert<double>(e, "lr_grid"));
       }},
      member("dropout", &Q::dropout),
      member("max_epochs", &Q::max_epochs),
      member("early_stop_patience", &Q::early_stop_patience),
      member("lr_plateau_patience", &Q::lr_plateau_patience),
      member("lr_plateau_factor", &Q::lr_plateau_factor),
      {"layer", [](const Q& q) { return json(q.layer.str()); },
       [](Q& q, const json& j) {
         q.layer = probe::LayerSpec::parse(j.is_string() ? j.get<std::string>() : j.dump());
       }},
      member("window_seconds", &Q::window_seconds),
  };
  return f;
}

template <typename S>
json dump_section(const S& s, const std::vector<Field<S>>& fields) {
  json o = json::object();
  for (const auto& f : fields) o[f.name] = f.get(s);
  return o;
}

template <typename S>
void load_section(S& s, const std::vector<Field<S>>& fields, const json& j, const std::string& section) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    const Field<S>* hit = nullptr;
    for (const auto& f : fields)
      if (f.name == key) hit = &f;
    if (hit == nullptr) throw std::invalid_argument("unknown config key '" + section + "." + key + "'");
    hit->set(s, value);
  }
}

}  // namespace

void RunConfig::propagate_seed() {
  teacher.seed = seed;
  model.init_seed = seed;
  train.seed = seed;
  probe.seed = seed;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  probe.validate();
  if (teacher.kmeans_heads.empty() && teacher.kind == teachers::TeacherKind::kKMeans) {
    throw std::invalid_argument("teacher: kmeans_heads is empty");
  }
  if (teacher.cqt.n_bins <= 0 || static_cast<std::size_t>(teacher.cqt.n_bins) != model.cqt_bins) {
    throw std::invalid_argument("teacher.cqt_n_bins must equal the model's CQT head width");
  }
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["teacher"] = dump_section(c.teacher, teacher_fields());
  j["model"] = dump_section(c.model, model_fields());
  j["train"] = dump_section(c.train, train_fields());
  j["probe"] = dump_section(c.probe, probe_fields());
  return j;
}

namespace {

// Head vocabularies and CQT width follow the teacher.
void derive_model_heads(RunConfig& c) {
  c.model.head_vocab.clear();
  if (c.teacher.kind == teachers::TeacherKind::kKMeans) {
    for (const auto& h : c.teacher.kmeans_heads) c.model.head_vocab.push_back(h.k);
  } else {
    c.model.head_vocab.assign(c.teacher.rvq_stages, c.teacher.rvq_k);
  }
  c.model.cqt_bins = static_cast<std::size_t>(std::max(0, c.teacher.cqt.n_bins));
}

}  // namespace

RunConfig from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") c.seed = convert<std::uint64_t>(value, "seed");
    else if (key == "teacher") load_section(c.teacher, teacher_fields(), value, key);
    else if (key == "model") load_section(c.model, model_fields(), value, key);
    else if (key == "train") load_section(c.train, train_fields(), value, key);
    else if (key == "probe") load_section(c.probe, probe_fields(), value, key);
    else throw std::invalid_argument("unknown config section '" + key + "'");
  }
  derive_model_heads(c);
  c.propagate_seed();
  return c;
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(container::read_text_file(path)); }

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form section.key=value");
  }
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json j = to_json(config);
  if (path == "seed") {
    j["seed"] = value;
  } else {
    const auto dot = path.find('.');
    if (dot == std::string::npos) throw std::invalid_argument("override key '" + path + "' needs a section");
    const std::string section = path.substr(0, dot), key = path.substr(dot + 1);
    if (!j.contains(section)) throw std::invalid_argument("unknown config section '" + section + "'");
    j[section][key] = value;
  }
  config = from_json(j);
}

std::string canonical_text(const RunConfig& config) { return to_json(config).dump(); }

std::string config_hash(const RunConfig& config) {
  return container::hex64(container::fnv1a(canonical_text(config)));
}

RunConfig desk_preset() {
  RunConfig c;
  c.teacher.kmeans_heads = {{dsp::FeatureKind::kLogMel, 64}, {dsp::FeatureKind::kChroma, 24}};
  c.teacher.logmel.n_mels = 64;
  c.teacher.rvq_k = 64;
  c.teacher.max_fit_rows = 20000;
  c.train.lr = 5e-4;
  c.train.warmup_steps = 20;
  c.train.batch_clips = 8;
  c.train.steps = 300;
  c.train.segment_seconds = 2.0;
  c.probe.max_epochs = 60;
  derive_model_heads(c);
  c.propagate_seed();
  return c;
}

}  // namespace mert::config
