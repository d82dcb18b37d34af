#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cdl/checkpoint.hpp"
#include "cdl/cli.hpp"
#include "cdl/scoring.hpp"
#include "cdl/selection.hpp"
#include "cdl/text.hpp"
#include "oracles.hpp"

using namespace cdl;

namespace {

const std::string kFixture = std::string(CDL_TEST_DATA) + "/fixture20.jsonl";

std::filesystem::path workdir() {
  auto d = std::filesystem::temp_directory_path() / "cdl_cli";
  std::filesystem::create_directories(d);
  return d;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "cdl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cdl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> tiny_train(const std::string& tag, std::vector<std::string> extra = {}) {
  std::vector<std::string> args = {"train",          "--train",         kFixture,
                                   "--valid",        kFixture,          "--checkpoint",
                                   path(tag + ".ckpt"), "--log",        path(tag + ".csv"),
                                   "--max-epochs",   "1",               "--seed",
                                   "3",              "--set",           "d_model=16",
                                   "--set",          "d_ffn=32",        "--set",
                                   "heads=2",        "--set",           "layers_enc=1",
                                   "--set",          "layers_dec=1",    "--set",
                                   "batch_size=8",   "--set",           "embedding_dim=8",
                                   "--attributes",   "coherence,specificity"};
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, cdl::cli::kUsage);
  EXPECT_EQ(invoke({"bogus"}).code, cdl::cli::kUsage);
  auto r = invoke({"score", "--corpus", kFixture, "--attribute", "coherence", "--out", path("x"),
                "--frobnicate"});
  EXPECT_EQ(r.code, cdl::cli::kUsage);
  EXPECT_FALSE(r.err.empty());
  EXPECT_EQ(invoke({"score", "--corpus", kFixture, "--attribute", "fluency", "--out", path("x")}).code,
            cdl::cli::kUsage);
  EXPECT_EQ(invoke({"split", "--scores", path("x"), "--ratio", "0", "--out", path("y")}).code,
            cdl::cli::kUsage);
}

TEST(Cli, HelpListsFlagsAndSucceeds) {
  auto r = invoke({"train", "--help"});
  EXPECT_EQ(r.code, cdl::cli::kOk);
  EXPECT_NE(r.out.find("--no-orthogonal"), std::string::npos);
  EXPECT_NE(invoke({"generate", "--help"}).out.find("--beam"), std::string::npos);
}

TEST(Cli, DataErrors) {
  EXPECT_EQ(invoke({"score", "--corpus", path("missing.jsonl"), "--attribute", "coherence", "--out",
                 path("x")})
                .code,
            cdl::cli::kData);
  {
    std::ofstream bad(path("bad.jsonl"));
    bad << "{\"context\": [\"hi\"], \"response\": \"yo\"}\nnot json\n";
  }
  auto r = invoke({"score", "--corpus", path("bad.jsonl"), "--attribute", "coherence", "--out",
                path("x")});
  EXPECT_EQ(r.code, cdl::cli::kData);
  EXPECT_NE(r.err.find(":2"), std::string::npos) << r.err;
}

TEST(Cli, ScoreMatchesOracle) {
  auto r = invoke({"score", "--corpus", kFixture, "--attribute", "specificity", "--out",
                path("spe.jsonl")});
  ASSERT_EQ(r.code, cdl::cli::kOk) << r.err;
  EXPECT_NE(r.out.find("# resolved score config"), std::string::npos);
  auto scores = load_scores(path("spe.jsonl"));
  const auto corpus = load_corpus(kFixture);
  ASSERT_EQ(scores.ids.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    EXPECT_NEAR(scores.scores[i], oracle::specificity(corpus, i), 1e-9);
  EXPECT_NE(slurp(path("spe.jsonl")).find(corpus.checksum), std::string::npos);
}

TEST(Cli, SplitFullRatioKeepsEverything) {
  ASSERT_EQ(invoke({"score", "--corpus", kFixture, "--attribute", "informativeness", "--out",
                 path("inf.jsonl")})
                .code,
            cdl::cli::kOk);
  auto r = invoke({"split", "--scores", path("inf.jsonl"), "--ratio", "1.0", "--out", path("inf.idx")});
  ASSERT_EQ(r.code, cdl::cli::kOk) << r.err;
  auto subset = load_subset(path("inf.idx"));
  EXPECT_EQ(subset.ids.size(), 20u);
  EXPECT_EQ(subset.scores_checksum, file_checksum(path("inf.jsonl")));
}

TEST(Cli, PdOnlyTrainingLogsZeroNegativeTerms) {
  auto r = invoke(tiny_train("pd", {"--no-nd", "--no-attributes"}));
  ASSERT_EQ(r.code, cdl::cli::kOk) << r.err;
  EXPECT_NE(r.out.find("no_nd = true"), std::string::npos);
  std::istringstream log(slurp(path("pd.csv")));
  std::size_t rows = 0;
  for (std::string line; std::getline(log, line);) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 7u) << line;
    EXPECT_EQ(std::stod(cells[4]), 0.0) << line;
    EXPECT_EQ(std::stod(cells[5]), 0.0) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 3u * 3u);  // 3 batches of 8 over 20 pairs, 3 branches
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  ASSERT_EQ(invoke(tiny_train("rep")).code, cdl::cli::kOk);
  const auto log1 = slurp(path("rep.csv"));
  const auto ck1 = slurp(path("rep.ckpt"));
  ASSERT_EQ(invoke(tiny_train("rep")).code, cdl::cli::kOk);
  EXPECT_EQ(log1, slurp(path("rep.csv")));
  EXPECT_EQ(ck1, slurp(path("rep.ckpt")));
  const auto corpus = load_corpus(kFixture);
  EXPECT_NE(log1.find("# seed=3"), std::string::npos);
  EXPECT_NE(log1.find(corpus.checksum), std::string::npos);
  EXPECT_NE(ck1.find(corpus.checksum), std::string::npos);

  std::vector<std::string> gen = {"generate", "--checkpoint", path("rep.ckpt"), "--corpus",
                                  kFixture,   "--out",        path("hyp1.jsonl")};
  ASSERT_EQ(invoke(gen).code, cdl::cli::kOk);
  gen.back() = path("hyp2.jsonl");
  ASSERT_EQ(invoke(gen).code, cdl::cli::kOk);
  const auto hyp = slurp(path("hyp1.jsonl"));
  EXPECT_EQ(hyp, slurp(path("hyp2.jsonl")));
  EXPECT_NE(hyp.find(file_checksum(path("rep.ckpt"))), std::string::npos);
  EXPECT_NE(hyp.find(corpus.checksum), std::string::npos);

  auto ev = invoke({"evaluate", "--hypotheses", path("hyp1.jsonl"), "--references", kFixture,
                 "--train", kFixture, "--checkpoint", path("rep.ckpt"), "--out", path("rep.json")});
  ASSERT_EQ(ev.code, cdl::cli::kOk) << ev.err;
  const auto report = nlohmann::json::parse(slurp(path("rep.json")));
  EXPECT_TRUE(report.at("metrics").contains("ave"));
  EXPECT_EQ(report.at("provenance").at("train_checksum"), corpus.checksum);

  auto div = invoke({"diversity", "--checkpoint", path("rep.ckpt"), "--probe", kFixture, "--out",
                  path("div.json")});
  ASSERT_EQ(div.code, cdl::cli::kOk) << div.err;
  EXPECT_NE(div.out.find("branch_l2 = "), std::string::npos);
  const double l2 = nlohmann::json::parse(slurp(path("div.json"))).at("branch_l2").get<double>();
  EXPECT_GT(l2, 0.0);
  EXPECT_LE(l2, 2.0);
}

TEST(Cli, FlagsOverrideConfigFile) {
  {
    std::ofstream f(path("run.cfg"));
    f << "seed = 99\nmax_epochs = 7\nno_nd = false\n";
  }
  auto r = invoke({"train", "--config", path("run.cfg"), "--seed", "5", "--no-nd", "--max-epochs",
                "0", "--train", kFixture, "--valid", kFixture, "--checkpoint", path("o.ckpt"),
                "--set", "d_model=16", "--set", "heads=2", "--attributes", "none"});
  ASSERT_EQ(r.code, cdl::cli::kOk) << r.err;
  EXPECT_NE(r.out.find("seed = 5"), std::string::npos);
  EXPECT_NE(r.out.find("max_epochs = 0"), std::string::npos);
  EXPECT_NE(r.out.find("no_nd = true"), std::string::npos);
}

TEST(Cli, MissingSubsetFileIsDataError) {
  auto r = invoke(tiny_train("miss", {"--set", "subset.coherence=" + path("nope.idx")}));
  EXPECT_EQ(r.code, cdl::cli::kData);
}
