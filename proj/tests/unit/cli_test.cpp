// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <map>
#include <memory>

#include "ctcbir/cli.hpp"
#include "test_util.hpp"

namespace ctcbir {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct RunResult {
  int code = -1;
  std::string output;
};

/// Runs the tool with `args` (shell syntax), capturing stdout and stderr.
RunResult run_tool(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + CTCBIR_CLI_PATH + " " + args + " 2>&1";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  RunResult r;
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe.get())) r.output.append(buf, n);
  const int status = pclose(pipe.release());
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

nlohmann::json read_json(const fs::path& p) {
  const auto b = read_file(p);
  return nlohmann::json::parse(b.begin(), b.end());
}

constexpr const char* kRunConfig = R"({
  "encoder": {"input_size": [16, 16], "channels": [4], "out_dim": 8},
  "head": {"proj_dim": 8},
  "train": {"batch_size": 8, "epochs": 1, "seed": 5}
})";

/// One phantom corpus, manifest, and trained checkpoint shared by every test.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write_file_atomic(config_path(), std::string(kRunConfig));
    ASSERT_EQ(run_tool("phantom --out-dir " + q(data()) + " --n-volumes 13 --seed 2 --depth 16 --height 16 --width 16")
                  .code,
              0);
    ASSERT_EQ(run_tool("build-dataset --data-dir " + q(data()) + " --out " + q(manifest()) +
                       " --n-train-volumes 10 --seed 3")
                  .code,
              0);
    const auto t = run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(root() / "run") + " --config " +
                            q(config_path()));
    ASSERT_EQ(t.code, 0) << t.output;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path root() { return dir_->path(); }
  static fs::path data() { return root() / "data"; }
  static fs::path manifest() { return root() / "manifest.json"; }
  static fs::path config_path() { return root() / "run_config.json"; }
  static fs::path checkpoint() { return root() / "run" / "checkpoint.ckpt"; }

  static cli::RunConfig run_config() {
    return cli::load_run_config(config_path(), [](const std::string&) { return std::nullopt; });
  }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, PhantomWritesThirteenVolumesDeterministically) {
  EXPECT_EQ(scan_volume_dir(data()).size(), 13u);
  TempDir other("cli_phantom");
  ASSERT_EQ(run_tool("phantom --out-dir " + q(other.path()) + " --n-volumes 13 --seed 2 --depth 16 --height 16 --width 16")
                .code,
            0);
  for (const auto& [id, path] : scan_volume_dir(data())) {
    const auto twin = other.path() / path.filename();
    EXPECT_EQ(read_file(raw_paths(path).data), read_file(raw_paths(twin).data)) << id;
    EXPECT_EQ(read_file(raw_paths(path).mask), read_file(raw_paths(twin).mask)) << id;
  }
  PhantomOptions opt;
  opt.depth = 16;
  opt.height = 16;
  opt.width = 16;
  EXPECT_EQ(load_volume(scan_volume_dir(data()).at(phantom_volume_id(3))).voxels,
            generate_phantom_volume(phantom_volume_id(3), 2, opt).voxels);
}

TEST_F(CliTest, BuildDatasetMatchesLibraryAndProtocol) {
  const auto m = cli::load_manifest(manifest());
  EXPECT_EQ(m.split(Split::kTrain).size(), 100u);
  EXPECT_EQ(m.split(Split::kTest).size(), 30u);
  EXPECT_EQ(m.volume_sources.size(), 13u);
  const auto library = cli::build_manifest_from_dir(data(), 10, 3);
  const auto bytes = read_file(manifest());
  EXPECT_EQ(std::string(bytes.begin(), bytes.end()), manifest_dump(library));

  const auto again = root() / "manifest_again.json";
  ASSERT_EQ(run_tool("build-dataset --data-dir " + q(data()) + " --out " + q(again) + " --n-train-volumes 10 --seed 3")
                .code,
            0);
  EXPECT_EQ(read_file(again), bytes);
}

TEST_F(CliTest, BuildDatasetRejectsMissingOrEmptyInput) {
  const auto missing = run_tool("build-dataset --data-dir " + q(root() / "absent") + " --out " +
                                q(root() / "x.json") + " --n-train-volumes 1");
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find("error:"), std::string::npos);
  TempDir empty("cli_empty");
  EXPECT_NE(run_tool("build-dataset --data-dir " + q(empty.path()) + " --out " + q(root() / "y.json") +
                     " --n-train-volumes 1")
                .code,
            0);
}

TEST_F(CliTest, TrainWritesCheckpointLogAndEffectiveConfig) {
  EXPECT_TRUE(fs::exists(checkpoint()));
  const auto log = read_file(root() / "run" / "metrics.jsonl");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 1);
  const auto cfg = read_json(root() / "run" / "config.json");
  EXPECT_EQ(cfg["train"]["epochs"], 1);
  EXPECT_EQ(cfg["train"]["batch_size"], 8);
  EXPECT_EQ(cfg["encoder"]["input_size"], nlohmann::json({16, 16}));
  EXPECT_EQ(cfg["augment"]["out_size"], nlohmann::json({16, 16}));
  EXPECT_EQ(cfg["head"]["pred_hidden"], 2);
}

TEST_F(CliTest, TrainMatchesLibraryTraining) {
  const auto cfg = run_config();
  const auto m = cli::load_manifest(manifest());
  const auto lib = train<float>(m, cfg.encoder, cfg.head, cfg.train, cfg.augment);
  EXPECT_EQ(encode_checkpoint(load_checkpoint<float>(checkpoint()).model), encode_checkpoint(lib.state.model));
}

TEST_F(CliTest, ZeroLearningRateLeavesRandomInitUnchanged) {
  const auto out = root() / "lr0";
  ASSERT_EQ(run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(out) + " --config " +
                     q(config_path()) + " --lr 0 --no-pretrain")
                .code,
            0);
  const auto cfg = run_config();
  EXPECT_EQ(encode_checkpoint(load_checkpoint<float>(out / "checkpoint.ckpt").model),
            encode_checkpoint(Model<float>::random(cfg.encoder, cfg.head, cfg.train.seed)));
}

TEST_F(CliTest, BaselineAndDualClipDiverge) {
  const auto out = root() / "baseline";
  ASSERT_EQ(run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(out) + " --config " +
                     q(config_path()) + " --baseline-single-clip")
                .code,
            0);
  EXPECT_EQ(read_json(out / "config.json")["train"]["view_mode"], "baseline");
  EXPECT_NE(encode_checkpoint(load_checkpoint<float>(out / "checkpoint.ckpt").model),
            encode_checkpoint(load_checkpoint<float>(checkpoint()).model));
}

TEST_F(CliTest, ConfigPrecedenceFileEnvFlag) {
  std::map<std::string, std::string> vars{{"CTCBIR_TRAIN_EPOCHS", "4"}, {"CTCBIR_HEAD_PROJ_DIM", "6"}};
  auto env = [&](const std::string& k) -> std::optional<std::string> {
    const auto it = vars.find(k);
    return it == vars.end() ? std::nullopt : std::optional<std::string>(it->second);
  };
  cli::TrainArgs a;
  a.config_file = config_path();
  auto c = cli::resolve_train_config(a, env);
  EXPECT_EQ(c.train.epochs, 4);
  EXPECT_EQ(c.head.proj_dim, 6);
  EXPECT_EQ(c.head.hidden(), 1);
  EXPECT_EQ(c.train.batch_size, 8);
  EXPECT_DOUBLE_EQ(c.train.base_lr(), 0.05 * 8 / 256);
  a.epochs = 9;
  a.lr = 0.5;
  c = cli::resolve_train_config(a, env);
  EXPECT_EQ(c.train.epochs, 9);
  EXPECT_EQ(c.train.base_lr(), 0.5);

  const auto out = root() / "env";
  ASSERT_EQ(run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(out) + " --config " + q(config_path()),
                     "CTCBIR_TRAIN_EPOCHS=2")
                .code,
            0);
  EXPECT_EQ(read_json(out / "config.json")["train"]["epochs"], 2);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  const auto bad = root() / "bad_config.json";
  write_file_atomic(bad, std::string(R"({"optimizer": {}})"));
  EXPECT_EQ(run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(root() / "bad") + " --config " + q(bad))
                .code,
            2);
  EXPECT_EQ(run_tool("train --manifest " + q(manifest()) + " --out-dir " + q(root() / "bad") + " --lr -1").code, 2);
  EXPECT_EQ(run_tool("no-such-command").code, 2);
}

TEST_F(CliTest, CorruptCheckpointExitsOne) {
  auto bytes = read_file(checkpoint());
  bytes[bytes.size() / 2] ^= 0xFF;
  const auto bad = root() / "corrupt.ckpt";
  write_file_atomic(bad, bytes);
  EXPECT_EQ(run_tool("embed --checkpoint " + q(bad) + " --manifest " + q(manifest()) + " --out " +
                     q(root() / "c.store"))
                .code,
            1);
}

TEST_F(CliTest, EmbedMatchesLibrary) {
  const auto out = root() / "all.store";
  ASSERT_EQ(run_tool("embed --checkpoint " + q(checkpoint()) + " --manifest " + q(manifest()) + " --out " + q(out))
                .code,
            0);
  const auto ck = load_checkpoint<float>(checkpoint());
  const auto m = cli::load_manifest(manifest());
  std::vector<const SliceRecord*> all;
  for (const auto& r : m.records) all.push_back(&r);
  EXPECT_EQ(read_file(out), encode_store(embed_records(ck.model, ck.fingerprint,
                                                       std::span<const SliceRecord* const>(all))));
}

TEST_F(CliTest, EvalReportSchemaAndParity) {
  const auto report = root() / "report.json";
  ASSERT_EQ(run_tool("eval --checkpoint " + q(checkpoint()) + " --manifest " + q(manifest()) + " --report " +
                     q(report) + " --rr-masks 20")
                .code,
            0);
  const auto j = read_json(report);
  for (const char* key : {"map", "knn_accuracy", "relevance_rank"}) EXPECT_TRUE(j.contains(key)) << key;

  cli::EvalOptions opt;
  opt.rr_masks = 20;
  const auto ck = load_checkpoint<float>(checkpoint());
  const auto lib = evaluate_checkpoint(ck, cli::load_manifest(manifest()), opt, 5);
  EXPECT_EQ(j["map"].get<double>(), lib.map);
  EXPECT_EQ(j["knn_accuracy"].get<double>(), lib.knn_accuracy);
  ASSERT_TRUE(lib.relevance_rank.has_value());
  EXPECT_EQ(j["relevance_rank"].get<double>(), *lib.relevance_rank);
  EXPECT_EQ(j, nlohmann::json(lib));
}

TEST_F(CliTest, EvalOverSeedsReportsSpread) {
  for (int s : {1, 2, 3}) fs::copy_file(checkpoint(), root() / ("seed" + std::to_string(s) + ".ckpt"));
  const auto report = root() / "seeds.json";
  ASSERT_EQ(run_tool("eval --checkpoint " + q(root() / "seed{seed}.ckpt") + " --seeds 1,2,3 --manifest " +
                     q(manifest()) + " --report " + q(report) + " --rr-masks 10")
                .code,
            0);
  const auto j = read_json(report);
  for (const char* key : {"map_std", "knn_accuracy_std", "relevance_rank_std"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["runs"].size(), 3u);
  EXPECT_EQ(j["map_std"].get<double>(), 0.0);
  EXPECT_EQ(run_tool("eval --checkpoint " + q(checkpoint()) + " --seeds 1,2 --manifest " + q(manifest())).code, 2);
}

TEST(CliStats, MeanAndSampleStd) {
  const auto [m, s] = cli::mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_DOUBLE_EQ(s, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(cli::mean_std({7.0}).second, 0.0);
  EXPECT_EQ(cli::substitute_seed("a{seed}/b{seed}.ckpt", 4), "a4/b4.ckpt");
}

TEST_F(CliTest, ExplainWritesOverlayAndDeterministicSidecar) {
  const auto m = cli::load_manifest(manifest());
  const SliceRecord* liver = nullptr;
  for (const auto& r : m.records)
    if (r.liver_label) liver = &r;
  ASSERT_NE(liver, nullptr);
  const auto png = root() / "explain" / "a.png";
  const std::string base = "explain --checkpoint " + q(checkpoint()) + " --manifest " + q(manifest()) +
                           " --slice-id " + liver->slice_id + " --n-masks 64 --seed 9 --out ";
  ASSERT_EQ(run_tool(base + q(png)).code, 0);
  EXPECT_EQ(png_size(read_file(png)), std::make_pair(16, 16));
  const auto sidecar = read_file(root() / "explain" / "a.json");
  EXPECT_EQ(read_json(root() / "explain" / "a.json")["n_masks"], 64);

  const auto png2 = root() / "explain" / "b.png";
  ASSERT_EQ(run_tool(base + q(png2)).code, 0);
  EXPECT_EQ(read_file(root() / "explain" / "b.json"), sidecar);

  const auto ck = load_checkpoint<float>(checkpoint());
  const auto lib = explain_slice(ck.model, liver->hu, 64, 9);
  EXPECT_EQ(read_file(root() / "explain" / "a.pfm"), encode_pfm(lib.importance));
  EXPECT_EQ(read_file(png), explain_overlay_png(ck.model, liver->hu, lib));

  EXPECT_EQ(run_tool("explain --checkpoint " + q(checkpoint()) + " --manifest " + q(manifest()) + " --slice-id " +
                     liver->slice_id + " --n-masks 0 --out " + q(root() / "explain" / "z.png"))
                .code,
            2);
  EXPECT_EQ(run_tool("explain --checkpoint " + q(checkpoint()) + " --manifest " + q(manifest()) +
                     " --slice-id nope_s0000 --out " + q(root() / "explain" / "z.png"))
                .code,
            2);
}

}  // namespace
}  // namespace ctcbir
