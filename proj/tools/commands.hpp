// tools/commands.hpp

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

#ifndef MERT_TOOLS_COMMANDS_HPP_
#define MERT_TOOLS_COMMANDS_HPP_

#include "mert/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mert::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Flags shared by every subcommand.
struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::filesystem::path out;
  std::vector<std::string> overrides;  // section.key=value

  config::RunConfig resolve() const;
};

struct SynthArgs {
  std::string task = "music";  // music | pitch | chord_root | beat | arousal
  std::size_t count = 16;
  double seconds = 4.0;
};

struct FeaturesArgs {
  std::filesystem::path manifest;
  std::vector<std::string> kinds = {"logmel", "chroma", "cqt"};
};

struct TeachArgs {
  std::filesystem::path manifest;
};

struct PretrainArgs {
  std::filesystem::path manifest;
  std::filesystem::path targets;  // teach output directory
  std::size_t steps = 0;          // 0 keeps train.steps
  std::filesystem::path resume;
};

struct ProbeArgs {
  std::filesystem::path checkpoint;  // empty = random init from the config
  std::string task = "pitch";
  std::size_t per_class = 10;
  double seconds = 1.0;
};

struct ExportArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::string layer = "final";
};

int run_synth(const Common& common, const SynthArgs& args);
int run_features(const Common& common, const FeaturesArgs& args);
int run_teach(const Common& common, const TeachArgs& args);
int run_pretrain(const Common& common, const PretrainArgs& args);
int run_probe(const Common& common, const ProbeArgs& args);
int run_export(const Common& common, const ExportArgs& args);

}  // namespace mert::cli

#endif  // MERT_TOOLS_COMMANDS_HPP_
