// tests/test_cli.cpp

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

// Drives the `mert` binary end to end on small inputs.

#include "doctest.h"

#include "mert/container.hpp"

#include "json.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "mert_cli_test";

// Small model and short training for every pipeline command.
const std::string kSmall =
    " --set model.d_model=32 --set model.n_layers=2 --set model.n_heads=4 --set model.ffn_dim=64"
    " --set model.pos_conv_kernel=16 --set model.pos_conv_groups=4"
    " --set teacher.kmeans_heads='[{\"feature\":\"logmel\",\"k\":8},{\"feature\":\"chroma\",\"k\":6}]'"
    " --set teacher.n_mels=32 --set train.batch_clips=2 --set train.segment_seconds=1.0"
    " --set probe.max_epochs=5 --set probe.hidden_units=16 --set probe.lr_grid=[0.001]";

int run_cli(const std::string& args, std::string* output = nullptr) {
  const fs::path log = kRoot / "last_output.txt";
  fs::create_directories(kRoot);
  const std::string cmd = std::string(MERT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = mert::container::read_text_file(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json run_record(const fs::path& out, const std::string& command) {
  return json::parse(mert::container::read_text_file(out / ("run_" + command + ".json")));
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

fs::path fresh(const std::string& name) {
  const fs::path p = kRoot / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(run_cli("") == 1);
  CHECK(run_cli("frobnicate --out " + (kRoot / "x").string()) == 1);
  CHECK(run_cli("synth") == 1);
  CHECK(run_cli("synth --out " + (kRoot / "x").string() + " --set train.nope=1") == 1);
}

TEST_CASE("features: empty manifest, idempotent rerun, one corrupt file among ten") {
  const fs::path empty = fresh("empty");
  fs::create_directories(empty);
  mert::container::write_text_file(empty / "manifest.tsv", "");
  std::string out;
  CHECK(run_cli("features --manifest " + (empty / "manifest.tsv").string() + " --out " + (empty / "f").string(), &out) == 0);
  CHECK(out.find("0 clips") != std::string::npos);

  const fs::path corpus = fresh("ten");
  REQUIRE(run_cli("synth --task music --count 10 --seconds 1 --out " + corpus.string()) == 0);
  const std::string feats = "features --kinds logmel --manifest " + (corpus / "manifest.tsv").string() + " --out " +
                            (corpus / "f").string();
  REQUIRE(run_cli(feats) == 0);
  CHECK(run_record(corpus / "f", "features")["written"] == 10);
  REQUIRE(run_cli(feats) == 0);
  const auto again = run_record(corpus / "f", "features");
  CHECK(again["written"] == 0);
  CHECK(again["skipped"] == 10);

  mert::container::write_text_file(corpus / "audio" / "music_0003.wav", "not a wav file at all");
  fs::remove_all(corpus / "f");
  CHECK(run_cli(feats) == 2);
  const auto partial = run_record(corpus / "f", "features");
  CHECK(partial["written"] == 9);
  CHECK(partial["failures"] == 1);
  CHECK(count_lines(corpus / "f" / "errors.tsv") == 1);
}

TEST_CASE("pipeline: teach, pretrain, probe and export") {
  const fs::path root = fresh("pipe");
  REQUIRE(run_cli("synth --task music --count 4 --seconds 2 --out " + (root / "corpus").string()) == 0);
  const std::string manifest = (root / "corpus" / "manifest.tsv").string();

  REQUIRE(run_cli("teach --manifest " + manifest + " --out " + (root / "t1").string() + kSmall) == 0);
  REQUIRE(run_cli("teach --manifest " + manifest + " --out " + (root / "t2").string() + kSmall) == 0);
  for (const char* f : {"codebook_0.mertcb", "codebook_1.mertcb"})
    CHECK(mert::container::read_file(root / "t1" / f) == mert::container::read_file(root / "t2" / f));
  CHECK(count_lines(root / "t1" / "targets.index") == 4);
  const auto teach_record = run_record(root / "t1", "teach");
  CHECK(teach_record["exit_code"] == 0);
  CHECK(teach_record["config_hash"].get<std::string>().size() == 16);

  REQUIRE(run_cli("pretrain --steps 10 --manifest " + manifest + " --targets " + (root / "t1").string() + " --out " +
               (root / "pre").string() + kSmall) == 0);
  CHECK(count_lines(root / "pre" / "train_log.ndjson") == 10);
  const fs::path ckpt = root / "pre" / "checkpoints" / "final.ckpt";
  REQUIRE(fs::exists(ckpt));

  const std::string probe = "probe --task pitch --per-class 2 --seconds 0.5 --out " + (root / "probe").string() + kSmall;
  REQUIRE(run_cli(probe) == 0);
  REQUIRE(run_cli(probe + " --checkpoint " + ckpt.string()) == 0);
  std::ifstream rows(root / "probe" / "results.ndjson");
  std::string a, b;
  std::getline(rows, a);
  std::getline(rows, b);
  const auto ja = json::parse(a), jb = json::parse(b);
  CHECK(ja["task_hash"] == jb["task_hash"]);
  CHECK(ja["parameter_hash"] != jb["parameter_hash"]);
  CHECK(ja["metric"] == "accuracy");

  REQUIRE(run_cli("export --manifest " + manifest + " --checkpoint " + ckpt.string() + " --out " +
               (root / "emb").string() + kSmall) == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(root / "emb")) files += e.path().extension() == ".mertfeat";
  CHECK(files == 4);
  CHECK(count_lines(root / "emb" / "embeddings.index") == 5);

  // A checkpoint with the wrong format version is a data error.
  auto bytes = mert::container::read_file(ckpt);
  bytes[8] = 99;
  const fs::path bad = root / "bad.ckpt";
  {
    std::ofstream o(bad, std::ios::binary);
    o.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  }
  std::string out;
  CHECK(run_cli(probe + " --checkpoint " + bad.string(), &out) == 2);
  CHECK(out.find("version") != std::string::npos);

  // Divergent training skips its updates and reports a numerical failure.
  CHECK(run_cli("pretrain --steps 4 --manifest " + manifest + " --targets " + (root / "t1").string() + " --out " +
             (root / "diverge").string() + kSmall + " --set train.lr=1e30 --set train.grad_clip=1e30") == 3);
  CHECK(run_record(root / "diverge", "pretrain")["exit_code"] == 3);
}

TEST_CASE("missing inputs are data errors") {
  CHECK(run_cli("teach --manifest " + (kRoot / "does_not_exist.tsv").string() + " --out " + (kRoot / "y").string()) == 2);
}
