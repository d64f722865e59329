#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "helpers.hpp"
#include "mdts/cli.hpp"

using namespace mdts;
using mdts::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string log, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mdts");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log, err);
  return {code, log.str(), err.str()};
}

std::map<std::string, std::string> tree(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_text(e.path().string());
  return out;
}

nlohmann::json small_config() {
  return nlohmann::json::parse(R"({
    "seed": 3,
    "synth": {"domains": [
      {"name": "alpha", "variates": 2, "samples": 20, "length": 96, "task": "class",
       "class_bands": [[0.01, 0.03], [0.15, 0.2]]},
      {"name": "grid", "variates": 6, "samples": 8, "length": 96, "layout_dims": 2, "task": "class",
       "class_bands": [[0.01, 0.03], [0.15, 0.2]]}
    ]},
    "data": {"manifest": "corpus/manifest.txt", "normalize": true},
    "model": {"variant": "tiny", "patch_size": 24, "context_length": 96},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "finetune": {"task": "cls", "epochs": 1, "batch_size": 8, "context": 48, "horizon": 24},
    "analyze": {"domain": "grid", "layout": "corpus/layouts/grid.csv", "permutations": 19}
  })");
}

class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    config = dir.file("run.json");
    io::write_text(config, small_config().dump(2));
  }

  Outcome synth() { return run_cli({"synth", "--config", config, "--out", dir.file("corpus")}); }

  TempDir dir;
  std::string config;
};

}  // namespace

TEST_F(CliPipeline, SynthIsDeterministic) {
  ASSERT_EQ(synth().code, 0);
  const auto first = tree(dir.file("corpus"));
  ASSERT_EQ(run_cli({"synth", "--config", config, "--out", dir.file("again")}).code, 0);
  const auto second = tree(dir.file("again"));
  EXPECT_EQ(first, second);
  EXPECT_TRUE(first.count("manifest.txt"));
  EXPECT_TRUE(first.count("layouts/grid.csv"));
  EXPECT_TRUE(first.count("resolved_config.json"));
  const auto other_seed = run_cli({"synth", "--config", config, "--seed", "4", "--out", dir.file("other")});
  ASSERT_EQ(other_seed.code, 0);
  EXPECT_NE(tree(dir.file("other")).at("data/alpha_00000.csv"), first.at("data/alpha_00000.csv"));
}

TEST_F(CliPipeline, FullPipelineWritesArtifactsAndLeavesInputsAlone) {
  ASSERT_EQ(synth().code, 0);
  const auto corpus_before = tree(dir.file("corpus"));
  const std::string config_before = io::read_text(config);

  const auto pre = run_cli({"pretrain", "--config", config, "--out", dir.file("pre")});
  ASSERT_EQ(pre.code, 0) << pre.err;
  EXPECT_TRUE(fs::exists(dir.file("pre/checkpoint.bin")));
  const std::string hist = io::read_text(dir.file("pre/loss_history.csv"));
  EXPECT_EQ(hist.rfind("epoch,split,mse,ncc,total,lr\n0,train,", 0), 0u) << hist;
  EXPECT_NE(hist.find("\n0,val,"), std::string::npos);

  const auto ft = run_cli({"finetune", "--config", config, "--checkpoint", dir.file("pre/checkpoint.bin"), "--out", dir.file("ft")});
  ASSERT_EQ(ft.code, 0) << ft.err;
  const std::string metrics = io::read_text(dir.file("ft/metrics.csv"));
  EXPECT_EQ(metrics.rfind("task,metric,value,seed\n", 0), 0u);
  EXPECT_NE(metrics.find("cls,ACC,"), std::string::npos);
  EXPECT_EQ(ft.log.find("included unseen domain"), std::string::npos);  // pre-training registered both domains
  EXPECT_TRUE(fs::exists(dir.file("ft/task_checkpoint.bin")));
  EXPECT_TRUE(fs::exists(dir.file("ft/report.json")));

  const auto ev = run_cli({"evaluate", "--config", config, "--checkpoint", dir.file("ft/task_checkpoint.bin"), "--out", dir.file("ev")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(io::read_text(dir.file("ev/metrics.csv")).rfind("task,metric,value,seed\ncls,ACC,", 0), 0u);

  const auto fc = run_cli({"forecast", "--config", config, "--checkpoint", dir.file("pre/checkpoint.bin"), "--out", dir.file("fc")});
  ASSERT_EQ(fc.code, 0) << fc.err;
  const auto plot = read_forecast_plot(dir.file("fc/forecast_plot.csv"));
  EXPECT_EQ(plot.context.cols(), 48);
  EXPECT_EQ(plot.truth.cols(), 24);
  EXPECT_NE(io::read_text(dir.file("fc/metrics.csv")).find("fcst,MSE_persistence,"), std::string::npos);

  const auto an = run_cli({"analyze", "--config", config, "--checkpoint", dir.file("pre/checkpoint.bin"), "--out", dir.file("an")});
  ASSERT_EQ(an.code, 0) << an.err;
  const auto report = nlohmann::json::parse(io::read_text(dir.file("an/analysis.json")));
  EXPECT_EQ(report.at("projection").size(), 6u);
  EXPECT_TRUE(report.contains("r_squared"));
  EXPECT_TRUE(report.contains("permutation_p_value"));

  EXPECT_EQ(tree(dir.file("corpus")), corpus_before);
  EXPECT_EQ(io::read_text(config), config_before);
}

TEST_F(CliPipeline, UntrainedEvaluateIsNearChance) {
  // 200 balanced two-class samples, 90% held out: an untrained model should
  // sit at chance, 0.5 +- 0.1.
  nlohmann::json j = small_config();
  j["synth"]["domains"][0]["samples"] = 200;
  j["synth"]["domains"].erase(1);
  j["pretrain"]["epochs"] = 0;
  j["finetune"]["val_fraction"] = 0.9;
  io::write_text(config, j.dump());
  ASSERT_EQ(synth().code, 0);
  ASSERT_EQ(run_cli({"pretrain", "--config", config, "--out", dir.file("pre")}).code, 0);
  const auto ev = run_cli({"evaluate", "--config", config, "--checkpoint", dir.file("pre/checkpoint.bin"), "--out", dir.file("ev")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.log.find("no task head"), std::string::npos);
  const std::string metrics = io::read_text(dir.file("ev/metrics.csv"));
  const auto pos = metrics.find("cls,ACC,");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_NEAR(std::stod(metrics.substr(pos + 8)), 0.5, 0.1);
}

TEST_F(CliPipeline, ResumeRejectsChangedConfiguration) {
  ASSERT_EQ(synth().code, 0);
  ASSERT_EQ(run_cli({"pretrain", "--config", config, "--out", dir.file("pre")}).code, 0);
  const auto r = run_cli({"pretrain", "--config", config, "--seed", "99", "--checkpoint", dir.file("pre/checkpoint.bin"), "--out", dir.file("x")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("different"), std::string::npos) << r.err;
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(run_cli({}).code, 0);
  EXPECT_NE(run_cli({"bogus"}).code, 0);
  const auto flag = run_cli({"synth", "--frobnicate"});
  EXPECT_EQ(flag.code, 2);
  EXPECT_EQ(flag.err.rfind("error: ", 0), 0u);
  EXPECT_EQ(std::count(flag.err.begin(), flag.err.end(), '\n'), 1);
  EXPECT_NE(run_cli({"synth", "--config", "/nonexistent/run.json"}).code, 0);
  EXPECT_NE(run_cli({"finetune", "--task", "segment"}).code, 0);
  EXPECT_NE(run_cli({"forecast", "--horizon", "-3"}).code, 0);
}

TEST(Cli, UnknownConfigKeyIsNamed) {
  TempDir dir;
  nlohmann::json j = small_config();
  j["pretrain"]["epoch"] = 3;
  io::write_text(dir.file("bad.json"), j.dump());
  const auto r = run_cli({"synth", "--config", dir.file("bad.json"), "--out", dir.file("o")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown config key 'pretrain.epoch'"), std::string::npos) << r.err;
}

TEST(Cli, MissingCheckpointAndManifest) {
  TempDir dir;
  nlohmann::json j = small_config();
  io::write_text(dir.file("run.json"), j.dump());
  const auto no_ck = run_cli({"evaluate", "--config", dir.file("run.json"), "--out", dir.file("o")});
  EXPECT_EQ(no_ck.code, 1);
  EXPECT_NE(no_ck.err.find("--checkpoint"), std::string::npos);
  const auto no_manifest = run_cli({"pretrain", "--config", dir.file("run.json"), "--out", dir.file("o")});
  EXPECT_EQ(no_manifest.code, 1);
  EXPECT_NE(no_manifest.err.find("manifest"), std::string::npos) << no_manifest.err;
}
