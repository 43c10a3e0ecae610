#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("serinv_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) {
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = std::string(SERINV_CLI_PATH) + " --out-dir " + dir_.string() + " " + args + " 2> " +
                            err.string() + " > /dev/null";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  std::string read(const std::string& name) const {
    std::ifstream in(dir_ / name);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

constexpr const char* kTinyData = "gen-data --num-speakers 6 --utterances-per-speaker 8 --num-emotions 2 --seed 4 "
                                  "--train-fraction 0.5 --validation-fraction 0.2";

std::string tiny_train(const std::string& extra = "") {
  return "train --config CFG --data DATA --split SPLIT --epochs 2 --batch-size 8 --seed 3 " + extra;
}

std::string fill(std::string s, const fs::path& dir) {
  auto rep = [&](const std::string& key, const std::string& value) {
    for (auto p = s.find(key); p != std::string::npos; p = s.find(key)) s.replace(p, key.size(), value);
  };
  rep("CFG", (dir / "model.json").string());
  rep("DATA", (dir / "data.serf").string());
  rep("SPLIT", (dir / "split.json").string());
  return s;
}

}  // namespace

TEST_F(Cli, HappyPathGenerateTrainEvaluateEmbedProbeProject) {
  ASSERT_EQ(run(kTinyData).code, 0);
  EXPECT_TRUE(fs::exists(path("data.serf")));
  EXPECT_TRUE(fs::exists(path("speakers.json")));
  write("model.json", R"({"model": {"preset": "tiny", "speaker_head": {"hidden1": 4, "hidden2": 4, "num_classes": 3}}})");
  const auto t = run(fill(tiny_train(), dir_));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.err.find("event=epoch"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("model.serm")));
  EXPECT_EQ(read("history.csv").substr(0, 5), "epoch");

  ASSERT_EQ(run(fill("evaluate --model " + path("model.serm").string() + " --data DATA --split SPLIT", dir_)).code, 0);
  const auto metrics = nlohmann::json::parse(read("metrics.json"));
  EXPECT_TRUE(metrics.contains("accuracy"));
  EXPECT_TRUE(fs::exists(path("confusion.csv")));

  ASSERT_EQ(run(fill("embed --model " + path("model.serm").string() + " --data DATA --split SPLIT", dir_)).code, 0);
  EXPECT_EQ(read("embeddings.csv").substr(0, 19), "id,emotion,speaker,");
  ASSERT_EQ(run("probe --embeddings " + path("embeddings.csv").string()).code, 0);
  EXPECT_TRUE(nlohmann::json::parse(read("probe.json")).contains("leakage_ratio"));
  ASSERT_EQ(run("project --embeddings " + path("embeddings.csv").string()).code, 0);
  EXPECT_EQ(read("projection.csv").substr(0, 27), "id,emotion,speaker,pc1,pc2\n");
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(run(kTinyData).code, 0);
  write("model.json", R"({"model": {"preset": "tiny", "speaker_head": {"hidden1": 4, "hidden2": 4, "num_classes": 3}}})");
  ASSERT_EQ(run(fill(tiny_train("--strategy DAT --model-out " + path("a.serm").string() + " --history-out " +
                                path("a.csv").string()),
                     dir_))
                .code,
            0);
  ASSERT_EQ(run(fill(tiny_train("--strategy DAT --model-out " + path("b.serm").string() + " --history-out " +
                                path("b.csv").string()),
                     dir_))
                .code,
            0);
  EXPECT_EQ(read("a.csv"), read("b.csv"));
  EXPECT_EQ(read("a.serm"), read("b.serm"));
}

TEST_F(Cli, OverlappingSplitNamesSpeakers) {
  ASSERT_EQ(run(kTinyData).code, 0);
  auto split = nlohmann::json::parse(read("split.json"));
  split["validation"].push_back(split["train"][0]);
  write("split.json", split.dump());
  write("model.json", R"({"model": {"preset": "tiny"}})");
  const auto r = run(fill(tiny_train(), dir_));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error kind=split"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("spk"), std::string::npos) << r.err;
}

TEST_F(Cli, ErrorsAreStructured) {
  write("bad.serf", "XERF garbage");
  write("split.json", R"({"train": [], "validation": []})");
  const auto r = run("evaluate --model " + path("bad.serf").string() + " --data " + path("bad.serf").string() +
                     " --split " + path("split.json").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error kind=format message=", 0), 0u) << r.err;
  const auto usage = run("train --epochs");
  EXPECT_EQ(usage.code, 2);
  EXPECT_NE(usage.err.find("error kind=usage"), std::string::npos);
}

TEST_F(Cli, CrossValidationFolds) {
  ASSERT_EQ(run("gen-data --num-speakers 10 --utterances-per-speaker 2 --sessions 5").code, 0);
  ASSERT_EQ(run("split --data " + path("data.serf").string() + " --cv-folds 5 --speakers " +
                path("speakers.json").string())
                .code,
            0);
  for (int f = 1; f <= 5; ++f) {
    EXPECT_TRUE(fs::exists(path("fold" + std::to_string(f) + "a.json")));
    EXPECT_TRUE(fs::exists(path("fold" + std::to_string(f) + "b.json")));
  }
}

TEST_F(Cli, ExperimentSummaryHasFourStrategyRows) {
  ASSERT_EQ(run(kTinyData).code, 0);
  write("exp.json", R"({"model": {"preset": "tiny"},
    "train": {"epochs": 1, "batch_size": 16, "learning_rate": 0.01},
    "data": {"num_speakers": 9, "utterances_per_speaker": 8, "num_emotions": 4, "length_range": [10, 20]},
    "train_fraction": 0.45, "validation_fraction": 0.2, "seeds": [1, 2]})");
  const auto r = run("experiment --config " + path("exp.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(read("summary.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "strategy,val,test,gap,test_probe_leakage");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find("±"), std::string::npos);
  }
  EXPECT_EQ(rows, 4);
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(read("gradcheck.csv").find("loss_cgt"), std::string::npos);
}
