#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "shortlvlm/cli.hpp"

using namespace shortlvlm;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("shortlvlm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_corpus(path("corpus.jsonl"), SyntheticTask{}.generate(12, 8));
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return cli::run(args, out_, err_);
  }

  void make_model(const std::string& out = "m") {
    ASSERT_EQ(run({"init", "--dim", "16", "--layers", "8", "--heads", "2", "--mlp", "16", "--seed", "4", "--out-dir",
                   path(out)}),
              0)
        << err_.str();
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"frobnicate"}), 2);
  EXPECT_EQ(run({"init", "--bogus", "1"}), 2);
  EXPECT_EQ(run({"localize", "--corpus", path("corpus.jsonl"), "--out-dir", path("x")}), 2);
  EXPECT_EQ(run({"init", "--config", path("missing.json")}), 2);
  EXPECT_EQ(run({"--help"}), 0);
}

TEST_F(CliTest, PipelineErrorsExitOneWithModuleMessage) {
  make_model();
  EXPECT_EQ(run({"localize", "--model", path("m/model.star"), "--corpus", path("nope.jsonl"), "--out-dir", path("o")}), 1);
  EXPECT_NE(err_.str().find("error: "), std::string::npos);
  EXPECT_EQ(run({"localize", "--model", path("m/model.star"), "--corpus", path("corpus.jsonl"), "--ratio", "0.7",
                 "--out-dir", path("o")}),
            1);
  EXPECT_NE(err_.str().find("layer_localizer"), std::string::npos);
  write_file(path("bad.star"), "STARCH01garbage");
  EXPECT_EQ(run({"heatmap", "--model", path("bad.star"), "--corpus", path("corpus.jsonl"), "--out-dir", path("o")}), 1);
}

TEST_F(CliTest, PruneRatioZeroIsForwardIdentical) {
  make_model();
  ASSERT_EQ(run({"prune", "--model", path("m/model.star"), "--corpus", path("corpus.jsonl"), "--ratio", "0",
                 "--out-dir", path("p")}),
            0)
      << err_.str();
  const Model a = load_archive(path("m/model.star")), b = load_archive(path("p/pruned.star"));
  for (const auto& s : SyntheticTask{}.generate(4, 2)) EXPECT_EQ(forward(a, s).logits, forward(b, s).logits);
}

TEST_F(CliTest, TisWithFullKeepReportEqualsAll) {
  make_model();
  const std::vector<std::string> base{"localize", "--model", path("m/model.star"), "--corpus", path("corpus.jsonl")};
  auto with = [&](std::vector<std::string> extra) {
    auto v = base;
    v.insert(v.end(), extra.begin(), extra.end());
    return v;
  };
  ASSERT_EQ(run(with({"--policy", "tis", "--p", "1.0", "--out-dir", path("t")})), 0) << err_.str();
  ASSERT_EQ(run(with({"--policy", "all", "--out-dir", path("a")})), 0);
  const auto strip = [](std::string t) {
    std::string out;
    std::istringstream in(t);
    std::string line;
    while (std::getline(in, line)) out += line.substr(0, line.rfind('\t')) + "\n";
    return out;
  };
  EXPECT_EQ(strip(read_file(path("t/report.tsv"))), strip(read_file(path("a/report.tsv"))));
  const auto pt = nlohmann::json::parse(read_file(path("t/plan.json"))), pa = nlohmann::json::parse(read_file(path("a/plan.json")));
  EXPECT_EQ(pt["pruned"], pa["pruned"]);
}

TEST_F(CliTest, ConfigFileAndExplicitFlagsWin) {
  make_model();
  write_file(path("cfg.json"), R"({"model": ")" + path("m/model.star") + R"(", "corpus": ")" + path("corpus.jsonl") +
                                   R"(", "ratio": 0.25, "policy": "all", "window": "all", "out_dir": ")" + path("c") + R"("})");
  ASSERT_EQ(run({"localize", "--config", path("cfg.json")}), 0) << err_.str();
  auto man = nlohmann::json::parse(read_file(path("c/manifest.json")));
  EXPECT_EQ(man["config"]["ratio"], 0.25);
  EXPECT_EQ(man["config"]["window"], "all");
  EXPECT_EQ(nlohmann::json::parse(read_file(path("c/plan.json")))["pruned"].size(), 2u);
  ASSERT_EQ(run({"localize", "--config", path("cfg.json"), "--ratio", "0.125"}), 0) << err_.str();
  man = nlohmann::json::parse(read_file(path("c/manifest.json")));
  EXPECT_EQ(man["config"]["ratio"], 0.125);
  EXPECT_EQ(nlohmann::json::parse(read_file(path("c/plan.json")))["pruned"].size(), 1u);
}

TEST_F(CliTest, ManifestHashesAndRerunsAreByteIdentical) {
  make_model();
  const std::vector<std::string> args{"prune", "--model", path("m/model.star"), "--corpus", path("corpus.jsonl"),
                                      "--ratio", "0.25", "--k", "8", "--threads", "2", "--out-dir", path("p")};
  ASSERT_EQ(run(args), 0) << err_.str();
  const auto first = read_file(path("p/pruned.star"));
  const auto man = nlohmann::json::parse(read_file(path("p/manifest.json")));
  EXPECT_EQ(man["outputs"]["pruned.star"], content_digest(first));
  EXPECT_EQ(man["inputs"][path("m/model.star")], file_digest(path("m/model.star")));
  EXPECT_EQ(man["config"]["threads"], 2);
  ASSERT_EQ(run(args), 0);
  EXPECT_EQ(read_file(path("p/pruned.star")), first);
  EXPECT_EQ(read_file(path("p/manifest.json")), man.dump(2) + "\n");
  const Model pm = load_archive(path("p/pruned.star"));
  EXPECT_EQ(pm.config.n_layers, 6u);
  EXPECT_EQ(TensorArchive::parse(first).header["provenance"]["feature_site"], "output");
}

TEST_F(CliTest, EveryStageRuns) {
  ASSERT_EQ(run({"train", "--dim", "16", "--layers", "4", "--heads", "2", "--mlp", "16", "--steps", "5",
                 "--calib-size", "8", "--eval-size", "8", "--out-dir", path("tr")}),
            0)
      << err_.str();
  for (const char* f : {"model.star", "calib.jsonl", "eval.jsonl", "train_report.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(path(std::string("tr/") + f))) << f;
  const std::string m = path("tr/model.star"), c = path("tr/calib.jsonl"), e = path("tr/eval.jsonl");
  EXPECT_EQ(run({"extract", "--model", m, "--corpus", c, "--layers", "0,2", "--out-dir", path("x")}), 0) << err_.str();
  EXPECT_EQ(TensorArchive::load(path("x/features.star")).tensors().size(), 2u);
  EXPECT_EQ(run({"score-tokens", "--model", m, "--corpus", c, "--layer", "1", "--out-dir", path("s")}), 0) << err_.str();
  EXPECT_EQ(run({"prune", "--model", m, "--corpus", c, "--ratio", "0.25", "--no-scp", "--out-dir", path("p")}), 0)
      << err_.str();
  EXPECT_EQ(run({"eval", "--model", path("p/pruned.star"), "--baseline-model", m, "--corpus", e, "--out-dir", path("ev")}), 0)
      << err_.str();
  {
    std::istringstream lines(read_file(path("ev/results.jsonl")));
    std::string base, pruned;
    std::getline(lines, base);
    std::getline(lines, pruned);
    EXPECT_TRUE(nlohmann::json::parse(base)["relative"].is_null());
    EXPECT_TRUE(nlohmann::json::parse(pruned)["relative"].is_number());
  }
  EXPECT_EQ(run({"heatmap", "--model", m, "--corpus", c, "--out-dir", path("h")}), 0) << err_.str();
  EXPECT_EQ(run({"seed-study", "--model", m, "--corpus", e, "--ratios", "0,0.25", "--seeds", "2", "--out-dir", path("ss")}), 0)
      << err_.str();
  EXPECT_EQ(run({"enum-oracle", "--model", m, "--corpus", e, "--window", "all", "--count", "1", "--out-dir", path("en")}), 0)
      << err_.str();
  EXPECT_EQ(run({"gap-report", "--model", m, "--corpus", c, "--ratio", "0.25", "--k", "4", "--out-dir", path("g")}), 0)
      << err_.str();
  EXPECT_TRUE(nlohmann::json::parse(read_file(path("g/gap.json"))).contains("delta"));
}
