// mert/config.hpp

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

#ifndef MERT_CONFIG_HPP_
#define MERT_CONFIG_HPP_

#include "mert/model.hpp"
#include "mert/pretrain.hpp"
#include "mert/probe.hpp"
#include "mert/teachers.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mert::config {

/// Fully-resolved run configuration. The file format is a JSON object with
/// optional "seed", "teacher", "model", "train" and "probe" members; missing
/// keys keep their defaults and unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  teachers::TeacherConfig teacher;
  model::ModelConfig model;
  pretrain::TrainConfig train;
  probe::ProbeConfig probe;

  /// Copies the run seed into every module.
  void propagate_seed();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
/// Throws std::invalid_argument naming the offending key.
RunConfig from_json(const nlohmann::json& j);

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Applies "section.key=value" (value parsed as JSON, else taken as a string).
void apply_override(RunConfig& config, const std::string& assignment);

/// Sorted-key JSON of the resolved configuration, and its FNV-1a hash.
std::string canonical_text(const RunConfig& config);
std::string config_hash(const RunConfig& config);

/// Small preset used by the tests and the acceptance run: 75 Hz frames,
/// d_model 192, 4 layers, modest teacher vocabularies.
RunConfig desk_preset();

}  // namespace mert::config

#endif  // MERT_CONFIG_HPP_
