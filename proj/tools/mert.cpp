// tools/mert.cpp

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

// mert: synth -> features -> teach -> pretrain -> probe / export.
//
// Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

#include "commands.hpp"

#include "mert/errors.hpp"
#include "mert/grad.hpp"

#include "CLI11.hpp"

#include <fmt/core.h>

#include <functional>

namespace {

void add_common(CLI::App* app, mert::cli::Common& c) {
  app->add_option("--config", c.config_path, "JSON run configuration (default: desk preset)");
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--set", c.overrides, "Override, e.g. train.lr=0.001 (repeatable)");
  app->add_option_function<std::uint64_t>(
      "--seed",
      [&c](const std::uint64_t& s) {
        c.seed = s;
        c.seed_given = true;
      },
      "Run seed");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mert::cli;
  CLI::App app{"Self-supervised music representation lab"};
  app.require_subcommand(1);

  Common common;
  std::function<int()> run;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic corpus or probe task as WAV + manifest");
  add_common(s, common);
  s->add_option("--task", synth.task, "music, pitch, chord_root, beat or arousal");
  s->add_option("--count", synth.count, "Clips (music) or clips per class");
  s->add_option("--seconds", synth.seconds, "Clip duration");
  s->callback([&] { run = [&] { return run_synth(common, synth); }; });

  FeaturesArgs feats;
  auto* f = app.add_subcommand("features", "Extract feature matrices for every clip of a manifest");
  add_common(f, common);
  f->add_option("--manifest", feats.manifest)->required();
  f->add_option("--kinds", feats.kinds, "logmel, mfcc, chroma, cqt")->delimiter(',');
  f->callback([&] { run = [&] { return run_features(common, feats); }; });

  TeachArgs teach;
  auto* t = app.add_subcommand("teach", "Fit the teacher and write codebooks and per-clip targets");
  add_common(t, common);
  t->add_option("--manifest", teach.manifest)->required();
  t->callback([&] { run = [&] { return run_teach(common, teach); }; });

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Masked-prediction training");
  add_common(p, common);
  p->add_option("--manifest", pre.manifest)->required();
  p->add_option("--targets", pre.targets, "Output directory of `teach`")->required();
  p->add_option("--steps", pre.steps, "Total steps (overrides train.steps)");
  p->add_option("--resume", pre.resume, "Checkpoint to resume from");
  p->callback([&] { run = [&] { return run_pretrain(common, pre); }; });

  ProbeArgs probe;
  auto* q = app.add_subcommand("probe", "Train a probe on frozen embeddings and append to results.ndjson");
  add_common(q, common);
  q->add_option("--checkpoint", probe.checkpoint, "Checkpoint (omit for a random-init model)");
  q->add_option("--task", probe.task, "pitch, chord_root, beat or arousal");
  q->add_option("--per-class", probe.per_class, "Examples per class");
  q->add_option("--seconds", probe.seconds, "Clip duration");
  q->callback([&] { run = [&] { return run_probe(common, probe); }; });

  ExportArgs exp;
  auto* e = app.add_subcommand("export", "Write per-clip embeddings and an index");
  add_common(e, common);
  e->add_option("--checkpoint", exp.checkpoint, "Checkpoint (omit for a random-init model)");
  e->add_option("--manifest", exp.manifest)->required();
  e->add_option("--layer", exp.layer, "final, average or a hidden-state index");
  e->callback([&] { run = [&] { return run_export(common, exp); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }
  try {
    return run();
  } catch (const mert::grad::NumericalError& err) {
    fmt::print(stderr, "numerical failure: {}\n", err.what());
    return kNumerical;
  } catch (const mert::VersionError& err) {
    fmt::print(stderr, "version error: {}\n", err.what());
    return kData;
  } catch (const mert::DataError& err) {
    fmt::print(stderr, "data error: {}\n", err.what());
    return kData;
  } catch (const std::invalid_argument& err) {
    fmt::print(stderr, "usage error: {}\n", err.what());
    return kUsage;
  } catch (const std::out_of_range& err) {
    fmt::print(stderr, "usage error: {}\n", err.what());
    return kUsage;
  } catch (const std::exception& err) {
    fmt::print(stderr, "error: {}\n", err.what());
    return kData;
  }
}
