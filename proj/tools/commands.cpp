// tools/commands.cpp

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

#include "commands.hpp"

#include "mert/audio_io.hpp"
#include "mert/container.hpp"
#include "mert/dsp.hpp"
#include "mert/errors.hpp"
#include "mert/model.hpp"
#include "mert/pretrain.hpp"
#include "mert/probe.hpp"
#include "mert/synthetic.hpp"
#include "mert/teachers.hpp"

#include "json.hpp"

#include <fmt/core.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace mert::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "mert 0.1.0";

config::RunConfig Common::resolve() const {
  config::RunConfig c = config_path.empty() ? config::desk_preset() : config::load_config(config_path);
  if (seed_given) c.seed = seed;
  c.propagate_seed();
  for (const auto& o : overrides) config::apply_override(c, o);
  c.validate();
  return c;
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One RunManifest per invocation, written when the command returns.
class RunRecord {
 public:
  RunRecord(std::string command, const Common& common, const config::RunConfig& cfg)
      : command_(std::move(command)), out_(common.out) {
    j_["command"] = command_;
    j_["config_path"] = common.config_path;
    j_["config_hash"] = config::config_hash(cfg);
    j_["config"] = config::to_json(cfg);
    j_["seed"] = cfg.seed;
    j_["started"] = utc_now();
    j_["tool_version"] = kToolVersion;
    j_["outputs"] = json::array();
  }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void set(const std::string& key, json value) { j_[key] = std::move(value); }
  RunRecord(const RunRecord&) = delete;
  RunRecord& operator=(const RunRecord&) = delete;
  // A command that throws still leaves its manifest, marked as aborted.
  ~RunRecord() {
    if (done_) return;
    try {
      j_["aborted"] = true;
      finish(-1);
    } catch (...) {
    }
  }
  int finish(int code) {
    done_ = true;
    j_["finished"] = utc_now();
    j_["exit_code"] = code;
    fs::create_directories(out_);
    container::write_text_file(out_ / ("run_" + command_ + ".json"), j_.dump(2) + "\n");
    return code;
  }

 private:
  std::string command_;
  fs::path out_;
  json j_;
  bool done_ = false;
};

audio_io::AudioClip load_clip(const fs::path& path, const std::string& id) {
  audio_io::AudioClip clip = audio_io::load_wav(path);
  if (clip.sample_rate != audio_io::kCanonicalRate) clip = audio_io::resample(clip, audio_io::kCanonicalRate);
  clip.source_id = id;
  return clip;
}

std::vector<audio_io::AudioClip> load_manifest_clips(const fs::path& manifest) {
  std::vector<audio_io::AudioClip> clips;
  for (const auto& r : audio_io::read_manifest(manifest))
    clips.push_back(load_clip(fs::path(r.path), r.source_id()));
  return clips;
}

model::Model<float> load_model(const fs::path& checkpoint, const config::RunConfig& fallback,
                               std::string* hash_text) {
  if (checkpoint.empty()) {
    model::Model<float> m(fallback.model);
    *hash_text = container::hex64(model::parameter_hash(m));
    return m;
  }
  const model::Checkpoint ckpt = model::read_checkpoint(checkpoint);
  model::Model<float> m(config::parse_config(ckpt.config_text).model);
  model::import_parameters<float>(ckpt.parameters, m);
  *hash_text = container::hex64(model::parameter_hash(m));
  return m;
}

std::string labels_text(const audio_io::Labels& labels) {
  std::string s;
  for (const auto& [k, v] : labels) s += (s.empty() ? "" : ";") + k + "=" + v;
  return s;
}

}  // namespace

int run_synth(const Common& common, const SynthArgs& args) {
  const auto cfg = common.resolve();
  RunRecord rec("synth", common, cfg);
  const fs::path audio_dir = common.out / "audio";
  fs::create_directories(audio_dir);
  std::vector<audio_io::ManifestRecord> records;
  if (args.task == "music") {
    synthetic::CorpusOptions o;
    o.clips = args.count;
    o.seconds = args.seconds;
    o.seed = cfg.seed;
    for (const auto& clip : synthetic::music_corpus(o)) {
      audio_io::write_wav(audio_dir / (clip.source_id + ".wav"), clip);
      records.push_back({"audio/" + clip.source_id + ".wav", {{"id", clip.source_id}}});
    }
  } else {
    synthetic::TaskOptions o;
    o.per_class = args.count;
    o.seconds = args.seconds;
    o.seed = cfg.seed;
    const auto task = synthetic::make_task(args.task, o);
    std::vector<std::string> split(task.clips.size());
    for (auto i : task.train) split[i] = "train";
    for (auto i : task.valid) split[i] = "valid";
    for (auto i : task.test) split[i] = "test";
    for (std::size_t i = 0; i < task.clips.size(); ++i) {
      const auto& clip = task.clips[i];
      audio_io::write_wav(audio_dir / (clip.source_id + ".wav"), clip);
      audio_io::Labels labels{{"id", clip.source_id}, {"split", split[i]}};
      if (task.type == probe::TaskType::kFramewise) {
        std::string ev;
        for (double t : task.events[i]) ev += (ev.empty() ? "" : ",") + fmt::format("{:.6f}", t);
        labels["beats"] = ev;
      } else {
        labels["label"] = fmt::format("{}", task.labels[i][0]);
      }
      records.push_back({"audio/" + clip.source_id + ".wav", labels});
    }
  }
  const fs::path manifest = common.out / "manifest.tsv";
  audio_io::write_manifest(manifest, records);
  rec.output(manifest);
  rec.output(audio_dir);
  fmt::print("wrote {} clips and {}\n", records.size(), manifest.string());
  return rec.finish(kOk);
}

int run_features(const Common& common, const FeaturesArgs& args) {
  const auto cfg = common.resolve();
  RunRecord rec("features", common, cfg);
  std::vector<dsp::FeatureKind> kinds;
  for (const auto& k : args.kinds) kinds.push_back(dsp::feature_kind_from_string(k));
  const auto records = audio_io::read_manifest(args.manifest);
  fs::create_directories(common.out);
  const fs::path index_path = common.out / "features.index";
  const fs::path errors_path = common.out / "errors.tsv";
  if (records.empty()) {
    fmt::print("0 clips in manifest; nothing to do\n");
    container::write_text_file(index_path, "");
    rec.output(index_path);
    return rec.finish(kOk);
  }

  // source_id \t kind \t file \t input hash
  std::map<std::pair<std::string, std::string>, std::pair<std::string, std::string>> index;
  if (fs::exists(index_path)) {
    std::istringstream in(container::read_text_file(index_path));
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string id, kind, file, hash;
      if (std::getline(ls, id, '\t') && std::getline(ls, kind, '\t') && std::getline(ls, file, '\t') &&
          std::getline(ls, hash)) {
        index[{id, kind}] = {file, hash};
      }
    }
  }
  const std::string teacher_hash = container::hex64(container::fnv1a(config::to_json(cfg)["teacher"].dump()));
  std::size_t written = 0, skipped = 0;
  std::string errors;
  std::size_t failures = 0;
  for (const auto& r : records) {
    const std::string id = r.source_id();
    const fs::path path = fs::path(r.path);
    try {
      const auto bytes = container::read_file(path);
      const std::uint64_t content = container::fnv1a(bytes);
      std::optional<audio_io::AudioClip> clip;
      for (const auto kind : kinds) {
        const std::string kname = dsp::to_string(kind);
        const std::string hash = container::hex64(container::fnv1a(teacher_hash + kname + container::hex64(content)));
        const std::string file = id + "." + kname + ".mertfeat";
        const auto it = index.find({id, kname});
        if (it != index.end() && it->second.second == hash && fs::exists(common.out / it->second.first)) {
          ++skipped;
          continue;
        }
        if (!clip) {
          auto loaded = audio_io::decode_wav(bytes, id).clip;
          if (loaded.sample_rate != audio_io::kCanonicalRate)
            loaded = audio_io::resample(loaded, audio_io::kCanonicalRate);
          clip = std::move(loaded);
        }
        dsp::FeatureMatrix f;
        switch (kind) {
          case dsp::FeatureKind::kLogMel: f = dsp::log_mel(*clip, cfg.teacher.logmel); break;
          case dsp::FeatureKind::kMfcc:
            f = dsp::mfcc(*clip, cfg.teacher.mfcc_coeffs, cfg.teacher.mfcc_context, cfg.teacher.logmel);
            break;
          case dsp::FeatureKind::kChroma: f = dsp::chroma(*clip, cfg.teacher.chroma_layout, cfg.teacher.cqt); break;
          case dsp::FeatureKind::kCqt: f = dsp::cqt(*clip, cfg.teacher.cqt); break;
          default: throw std::invalid_argument("features: unsupported kind '" + kname + "'");
        }
        dsp::write_features(common.out / file, f);
        index[{id, kname}] = {file, hash};
        ++written;
      }
    } catch (const DataError& e) {
      ++failures;
      errors += path.string() + "\t" + e.what() + "\n";
    } catch (const std::system_error& e) {
      ++failures;
      errors += path.string() + "\t" + e.what() + "\n";
    }
  }
  std::string text;
  for (const auto& [key, value] : index) text += key.first + "\t" + key.second + "\t" + value.first + "\t" + value.second + "\n";
  container::write_text_file(index_path, text);
  container::write_text_file(errors_path, errors);
  rec.output(index_path);
  rec.output(errors_path);
  rec.set("written", written);
  rec.set("skipped", skipped);
  rec.set("failures", failures);
  fmt::print("{} clips: wrote {}, skipped {} up to date, {} failed\n", records.size(), written, skipped, failures);
  if (failures) fmt::print(stderr, "see {} for the failing inputs\n", errors_path.string());
  return rec.finish(failures ? kData : kOk);
}

int run_teach(const Common& common, const TeachArgs& args) {
  const auto cfg = common.resolve();
  RunRecord rec("teach", common, cfg);
  const auto clips = load_manifest_clips(args.manifest);
  if (clips.empty()) throw DataError("teach: manifest " + args.manifest.string() + " lists no clips");
  const teachers::Teacher teacher = teachers::fit_teacher(clips, cfg.teacher);
  fs::create_directories(common.out / "targets");
  if (cfg.teacher.kind == teachers::TeacherKind::kKMeans) {
    for (std::size_t j = 0; j < teacher.kmeans_heads().size(); ++j) {
      const fs::path p = common.out / fmt::format("codebook_{}.mertcb", j);
      container::write_file(p, teachers::encode_codebook(teacher.kmeans_heads()[j]));
      rec.output(p);
    }
  } else {
    const fs::path p = common.out / "codec.mertcb";
    container::write_file(p, teachers::encode_codec(teacher.codec()));
    rec.output(p);
  }
  std::string index;
  for (const auto& clip : clips) {
    const auto bundle = teachers::build_targets(clip, teacher);
    const std::string file = "targets/" + clip.source_id + ".merttgt";
    teachers::write_targets(common.out / file, bundle);
    index += clip.source_id + "\t" + file + "\n";
  }
  const fs::path index_path = common.out / "targets.index";
  container::write_text_file(index_path, index);
  rec.output(index_path);
  fmt::print("fitted {} teacher with {} heads on {} clips\n", teachers::to_string(cfg.teacher.kind),
             teacher.num_heads(), clips.size());
  return rec.finish(kOk);
}

int run_pretrain(const Common& common, const PretrainArgs& args) {
  auto cfg = common.resolve();
  if (args.steps) cfg.train.steps = args.steps;
  RunRecord rec("pretrain", common, cfg);
  auto clips = load_manifest_clips(args.manifest);
  std::vector<teachers::TargetBundle> targets;
  {
    std::istringstream in(container::read_text_file(args.targets / "targets.index"));
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      targets.push_back(teachers::read_targets(args.targets / line.substr(tab + 1)));
    }
  }
  auto corpus = pretrain::match_targets(std::move(clips), std::move(targets));
  pretrain::Trainer trainer(cfg.model, cfg.train, std::move(corpus), config::canonical_text(cfg));
  if (!args.resume.empty()) trainer.restore(model::read_checkpoint(args.resume));
  pretrain::RunOptions opts;
  opts.log_path = common.out / "train_log.ndjson";
  opts.checkpoint_dir = common.out / "checkpoints";
  fs::create_directories(common.out);
  std::size_t skipped = 0;
  opts.on_step = [&](const pretrain::LossReport& r) {
    if (r.skipped) ++skipped;
    if (r.step % 10 == 0 || r.skipped) {
      fmt::print("step {:5d} total {:.4f} musical {:.4f} grad {:.3f}{}\n", r.step, r.total, r.musical,
                 r.grad_norm_preclip, r.skipped ? " skipped: " + r.diagnostic : "");
    }
  };
  const auto reports = pretrain::run_pretraining(trainer, opts);
  rec.output(opts.log_path);
  rec.output(opts.checkpoint_dir / "final.ckpt");
  rec.set("steps_run", reports.size());
  rec.set("skipped_steps", skipped);
  if (!reports.empty()) rec.set("final_total_loss", reports.back().total);
  if (skipped) {
    fmt::print(stderr, "{} steps had non-finite losses or gradients\n", skipped);
    return rec.finish(kNumerical);
  }
  return rec.finish(kOk);
}

int run_probe(const Common& common, const ProbeArgs& args) {
  const auto cfg = common.resolve();
  RunRecord rec("probe", common, cfg);
  std::string model_hash;
  const model::Model<float> model = load_model(args.checkpoint, cfg, &model_hash);
  const double frame_rate = double(audio_io::kCanonicalRate) / double(model.config().total_stride());

  synthetic::TaskOptions topt;
  topt.per_class = args.per_class;
  topt.seconds = args.seconds;
  topt.seed = cfg.seed;
  const auto task = synthetic::make_task(args.task, topt, frame_rate);
  const std::string task_hash = container::hex64(
      container::fnv1a(fmt::format("{}|{}|{}|{}", task.name, args.per_class, args.seconds, cfg.seed)));

  probe::EmbeddingOptions eo;
  eo.layer = cfg.probe.layer;
  eo.window_seconds = std::min(cfg.probe.window_seconds, args.seconds);
  std::vector<probe::ClipEmbedding> emb;
  for (const auto& clip : task.clips) emb.push_back(probe::extract_embeddings(model, clip, eo));

  auto fill = [&](const std::vector<std::size_t>& idx) {
    probe::ProbeData d;
    for (auto i : idx) {
      if (task.type == probe::TaskType::kFramewise) {
        const std::size_t n = std::min(emb[i].frames.frames, task.labels[i].size());
        for (std::size_t t = 0; t < n; ++t) d.append(emb[i].frames.row(t), std::span(&task.labels[i][t], 1));
      } else {
        d.append(emb[i].pooled, task.labels[i]);
      }
    }
    return d;
  };
  probe::ProbeSplits splits{fill(task.train), fill(task.valid), fill(task.test)};
  const auto result = probe::train_probe(splits, task.type, task.classes, cfg.probe, task.name);

  std::string metric = result.metric;
  double value = result.test_metric;
  if (task.type == probe::TaskType::kFramewise) {
    // Per-clip event F-measure on the test clips.
    double f = 0.0;
    for (auto i : task.test) {
      probe::ProbeData one;
      const std::size_t n = std::min(emb[i].frames.frames, task.labels[i].size());
      for (std::size_t t = 0; t < n; ++t) one.append(emb[i].frames.row(t), std::span(&task.labels[i][t], 1));
      auto out = result.probe.predict(one);
      for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
      f += probe::metric_beat_f_measure(probe::pick_events(out, frame_rate), task.events[i]);
    }
    metric = "beat_f_measure";
    value = f / double(task.test.size());
  }

  json row;
  row["task"] = task.name;
  row["task_hash"] = task_hash;
  row["metric"] = metric;
  row["value"] = value;
  row["selection_metric"] = result.metric;
  row["valid_value"] = result.valid_metric;
  row["best_lr"] = result.best_lr;
  row["probe_seed"] = cfg.probe.seed;
  row["split_sizes"] = {splits.train.n, splits.valid.n, splits.test.n};
  row["excluded_tags"] = result.excluded_tags;
  row["checkpoint"] = args.checkpoint.empty() ? "random-init" : args.checkpoint.string();
  row["parameter_hash"] = model_hash;
  row["config_hash"] = config::config_hash(cfg);
  row["layer"] = cfg.probe.layer.str();
  json trials = json::array();
  for (const auto& t : result.trials)
    trials.push_back({{"lr", t.lr}, {"best_valid", t.best_valid}, {"best_epoch", t.best_epoch},
                      {"epochs_run", t.epochs_run}});
  row["trials"] = trials;

  fs::create_directories(common.out);
  const fs::path ledger = common.out / "results.ndjson";
  std::ofstream(ledger, std::ios::app) << row.dump() << "\n";
  rec.output(ledger);
  rec.set("result", row);
  fmt::print("{} {} = {:.4f} (best lr {})\n", task.name, metric, value, result.best_lr);
  return rec.finish(kOk);
}

int run_export(const Common& common, const ExportArgs& args) {
  const auto cfg = common.resolve();
  RunRecord rec("export", common, cfg);
  std::string model_hash;
  const model::Model<float> model = load_model(args.checkpoint, cfg, &model_hash);
  probe::EmbeddingOptions eo;
  eo.layer = probe::LayerSpec::parse(args.layer);
  eo.window_seconds = cfg.probe.window_seconds;
  const auto records = audio_io::read_manifest(args.manifest);
  fs::create_directories(common.out);
  std::string index = "source_id\tfile\tlabels\tpooled\n";
  for (const auto& r : records) {
    const auto clip = load_clip(fs::path(r.path), r.source_id());
    const auto e = probe::extract_embeddings(model, clip, eo);
    const std::string file = clip.source_id + ".mertfeat";
    dsp::write_features(common.out / file, e.frames);
    std::string pooled;
    for (double v : e.pooled) pooled += (pooled.empty() ? "" : ",") + fmt::format("{:.7g}", v);
    index += clip.source_id + "\t" + file + "\t" + labels_text(r.labels) + "\t" + pooled + "\n";
  }
  const fs::path index_path = common.out / "embeddings.index";
  container::write_text_file(index_path, index);
  rec.output(index_path);
  rec.set("clips", records.size());
  rec.set("parameter_hash", model_hash);
  fmt::print("exported {} clips at layer {}\n", records.size(), eo.layer.str());
  return rec.finish(kOk);
}

}  // namespace mert::cli
