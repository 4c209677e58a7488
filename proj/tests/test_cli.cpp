#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"

using namespace tokmerge;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tokmerge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("tokmerge_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir);
    scene = (dir / "scene.xyz").string();
    ASSERT_EQ(invoke({"generate", "--objects", "4", "--points", "128", "--dim", "16", "--sigma", "0.05",
                   "--seed", "7", "--out", scene})
                  .code,
              0);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::vector<std::string> small(std::vector<std::string> args) const {
    args.insert(args.end(), {"--input", scene, "--patch-size", "128", "--depth", "2", "--heads", "4"});
    return args;
  }

  fs::path dir;
  std::string scene;
};

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(Cli, GenerateLineCountAndDeterminism) {
  const auto out = dir / "a.xyz";
  EXPECT_EQ(invoke({"generate", "--objects", "4", "--points", "256", "--dim", "64", "--sigma", "0.05", "--seed",
                 "7", "--out", out.string()})
                .code,
            0);
  EXPECT_EQ(line_count(slurp(out)), 1024u);
  const auto again = dir / "b.xyz";
  invoke({"generate", "--objects", "4", "--points", "256", "--dim", "64", "--sigma", "0.05", "--seed", "7", "--out",
       again.string()});
  EXPECT_EQ(slurp(out), slurp(again));
}

TEST_F(Cli, GenerateZeroSigmaRepeatsFeatures) {
  const auto out = dir / "z.xyz";
  ASSERT_EQ(invoke({"generate", "--objects", "2", "--points", "5", "--dim", "3", "--sigma", "0", "--out",
                 out.string()})
                .code,
            0);
  const PointCloud c = load_cloud(out.string());
  for (std::size_t i = 1; i < 5; ++i) EXPECT_EQ(c.feats(i, 2), c.feats(0, 2));
  EXPECT_NE(c.feats(5, 0), c.feats(0, 0));
}

TEST_F(Cli, GenerateUnwritablePath) {
  const auto r = invoke({"generate", "--out", "/nonexistent/dir/x.xyz"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("cannot open"), std::string::npos);
}

TEST_F(Cli, RunMergedDefaults) {
  const auto r = invoke({"run", "--input", scene, "--mode", "merged"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_GT(j["reduction_factor"].get<double>(), 1.0);
  EXPECT_EQ(j["schema_version"], 1);
}

TEST_F(Cli, RunDenseUnitReductionToFile) {
  const auto out = dir / "dense.json";
  ASSERT_EQ(invoke(small({"run", "--mode", "dense", "--out", out.string()})).code, 0);
  const auto j = nlohmann::json::parse(slurp(out));
  EXPECT_EQ(j["reduction_factor"].get<double>(), 1.0);
  EXPECT_EQ(j["mode"], "dense");
}

TEST_F(Cli, RunKZeroExitsTwo) {
  const auto r = invoke({"run", "--input", scene, "--rate", "0.99", "--patch-size", "16"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("K = 0"), std::string::npos);
}

TEST_F(Cli, RunNumericErrorExitsThree) {
  const auto bad = dir / "huge.xyz";
  {
    std::ofstream f(bad);
    for (int i = 0; i < 8; ++i) f << i << " 0 0 1e300 -1e300 1e300 1e300\n";
  }
  const auto r = invoke({"run", "--input", bad.string(), "--mode", "dense", "--heads", "2"});
  EXPECT_EQ(r.code, cli::kExitNumeric) << r.err;
}

TEST_F(Cli, RunRejectsUnknownFlagsAndValues) {
  EXPECT_EQ(invoke({"run", "--bogus"}).code, cli::kExitConfig);
  EXPECT_EQ(invoke(small({"run", "--mode", "nonsense"})).code, cli::kExitConfig);
  EXPECT_EQ(invoke(small({"run", "--metric", "w"})).code, cli::kExitConfig);
  EXPECT_EQ(invoke(small({"run", "--grid-bits", "30"})).code, cli::kExitConfig);
  EXPECT_EQ(invoke({"run", "--input", (dir / "missing.xyz").string()}).code, cli::kExitConfig);
  EXPECT_EQ(invoke({}).code, cli::kExitConfig);
}

TEST_F(Cli, ThreadsDoNotChangeChecksums) {
  const auto a = nlohmann::json::parse(invoke(small({"run", "--threads", "1"})).out);
  const auto b = nlohmann::json::parse(invoke(small({"run", "--threads", "8"})).out);
  EXPECT_EQ(a["checksum"], b["checksum"]);
}

TEST_F(Cli, ThreadsEnvironmentFallback) {
  ::setenv("TOKMERGE_THREADS", "0x", 1);
  EXPECT_EQ(invoke(small({"run"})).code, cli::kExitConfig);
  ::setenv("TOKMERGE_THREADS", "4", 1);
  const auto a = invoke(small({"run"}));
  ::unsetenv("TOKMERGE_THREADS");
  EXPECT_EQ(a.code, 0);
  const auto b = invoke(small({"run"}));
  EXPECT_EQ(nlohmann::json::parse(a.out)["checksum"], nlohmann::json::parse(b.out)["checksum"]);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  const auto cfg = dir / "run.toml";
  {
    std::ofstream f(cfg);
    f << "[run]\nmode = \"dense\"\ndepth = 3\n";
  }
  auto j = nlohmann::json::parse(invoke(small({"--config", cfg.string(), "run"})).out);
  EXPECT_EQ(j["mode"], "dense");
  auto r = invoke({"--config", cfg.string(), "run", "--input", scene, "--patch-size", "128", "--heads", "4"});
  EXPECT_EQ(nlohmann::json::parse(r.out)["layers"].size(), 3u);
  j = nlohmann::json::parse(invoke(small({"--config", cfg.string(), "run", "--mode", "merged"})).out);
  EXPECT_EQ(j["mode"], "merged");
  {
    std::ofstream f(dir / "bad.toml");
    f << "[run]\nnot_a_flag = 1\n";
  }
  EXPECT_EQ(invoke({"--config", (dir / "bad.toml").string(), "run"}).code, cli::kExitConfig);
}

TEST_F(Cli, HelpListsDefaults) {
  const auto r = invoke({"run", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"--tau FLOAT [0.2]", "--rate FLOAT [0.8]", "--rate-plus FLOAT [0.97]",
                        "--patch-size UINT [1024]", "--metric TEXT [v]", "--per-head", "[default: on]",
                        "--bins UINT [0]", "--assignment TEXT [bin_local]", "--seed UINT [0]",
                        "TOKMERGE_THREADS"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  for (const char* sub : {"generate", "serialize", "compare", "analyze-te"}) EXPECT_EQ(invoke({sub, "--help"}).code, 0);
}

TEST_F(Cli, CompareTwoModes) {
  const auto r = invoke(small({"compare", "--modes", "dense,merged"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(r.out), 3u);
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "schema_version,mode,flops,reduction,te_rate,rel_error");
}

TEST_F(Cli, CompareDuplicateModeExitsTwo) {
  const auto r = invoke(small({"compare", "--modes", "dense,merged,dense"}));
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_NE(r.err.find("listed twice"), std::string::npos);
}

TEST_F(Cli, CompareFullModeList) {
  const auto out = dir / "cmp.csv";
  const auto r = invoke(small({"compare", "--modes",
                            "dense,merged,mixer:avg_pool,mixer:shuffle_pool,mixer:pool_attn,"
                            "mixer:progressive_tome,mixer:projection,baseline:random_drop,baseline:fps,"
                            "baseline:voxel_grid",
                            "--out", out.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(out);
  EXPECT_EQ(line_count(csv), 11u);
  for (const char* col : {"mode", "flops", "reduction", "te_rate", "rel_error"})
    EXPECT_NE(csv.find(col), std::string::npos);
  const auto j = nlohmann::json::parse(invoke(small({"compare", "--modes", "dense,mixer:avg_pool", "--format",
                                                  "json"}))
                                           .out);
  EXPECT_EQ(j["rows"].size(), 2u);
}

TEST_F(Cli, AnalyzeTeRateZero) {
  const auto r = invoke(small({"analyze-te", "--rates", "0"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["rates"].size(), 1u);
  EXPECT_EQ(j["rates"][0]["layers"].size(), 2u);
  for (const auto& l : j["rates"][0]["layers"])
    for (const char* s : {"te_a", "te_b", "te_c"}) EXPECT_EQ(l[s]["transfer_rate"].get<double>(), 0.0);
}

TEST_F(Cli, AnalyzeTeSeveralRates) {
  const auto r = invoke(small({"analyze-te", "--rates", "0.3,0.5,0.7"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["rates"].size(), 3u);
  for (const auto& block : j["rates"])
    for (const auto& l : block["layers"])
      for (const char* s : {"te_a", "te_b", "te_c"}) {
        ASSERT_TRUE(l[s]["transfer_rate"].is_number());
        EXPECT_LT(l[s]["transfer_rate"].get<double>(), 1.0);
      }
  EXPECT_EQ(invoke(small({"analyze-te", "--rates", "1.2"})).code, cli::kExitConfig);
}

TEST(PairedRate, Endpoints) {
  EXPECT_EQ(cli::paired_aggressive_rate(0.0), 0.0);
  EXPECT_NEAR(cli::paired_aggressive_rate(0.8), 0.97, 1e-12);
  EXPECT_GT(cli::paired_aggressive_rate(0.5), 0.5);
}

TEST_F(Cli, SerializeInspection) {
  const auto r = invoke({"serialize", "--input", scene, "--patch-size", "100"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(line_count(r.out), 513u);
  EXPECT_NE(r.err.find("6 patches"), std::string::npos);
}
