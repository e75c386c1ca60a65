#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ecqx/cli.hpp"

using namespace ecqx;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "ecqx");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class CliDir : public ::testing::Test {
 protected:
  fs::path dir;
  std::string cfg_path;

  void SetUp() override {
    dir = fs::temp_directory_path() / ("ecqx_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    ExperimentConfig c;
    c.task.n_per_class = 30;
    c.preset.clear();
    c.layers = {LayerSpec::dense(16, 24), LayerSpec::relu(), LayerSpec::dense(24, 4)};
    c.seeds = {1};
    c.pretrain.epochs = 3;
    c.qat.epochs = 1;
    c.qat.lambda_grid = {0.0, 1e-3};
    c.qat.p_grid = {0.05};
    c.qat.bitwidths = {4};
    c.out_dir = (dir / "out").string();
    cfg_path = (dir / "cfg.json").string();
    std::ofstream(cfg_path) << serialize_config(c);
  }
  void TearDown() override { fs::remove_all(dir); }
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  const auto h = run({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("sweep"), std::string::npos);
  EXPECT_EQ(run({"sweep", "--frobnicate"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"quantize", "--bits", "7"}).code, 1);
  EXPECT_EQ(run({"quantize", "--mode", "fast"}).code, 1);
}

TEST(Cli, MissingConfigNamesThePath) {
  const auto r = run({"quantize", "--config", "/nonexistent/missing.json"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/missing.json"), std::string::npos) << r.err;
}

TEST_F(CliDir, SweepWritesRunsAndSummary) {
  const auto r = run({"sweep", "--config", cfg_path, "--compare"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = parse_report_csv(slurp(dir / "out" / "sweep.csv"));
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(recs[0].method, "ECQ");
  EXPECT_EQ(recs[2].method, "ECQx");
  for (const auto& rec : recs) {
    EXPECT_EQ(rec.bw, 4);
    EXPECT_GE(rec.acc, 0.0);
    EXPECT_GT(rec.cr, 1.0);
  }
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(dir / "out"))
    if (e.is_directory()) {
      ++runs;
      EXPECT_TRUE(fs::exists(e.path() / "metrics.csv")) << e.path();
      EXPECT_TRUE(fs::exists(e.path() / "record.csv")) << e.path();
    }
  EXPECT_EQ(runs, 4u);

  const auto rep = run({"report", "--out-dir", (dir / "out").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(parse_report_csv(slurp(dir / "out" / "report.csv")).size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
}

TEST_F(CliDir, FlagsReplaceConfigGrids) {
  const auto other = (dir / "elsewhere").string();
  const auto r = run({"sweep", "--config", cfg_path, "--bits", "3", "--p", "0.4", "--lambda", "0.0005", "--out-dir", other});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = parse_report_csv(slurp(fs::path(other) / "sweep.csv"));
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].bw, 3);
  EXPECT_EQ(recs[0].p, 0.4);
  EXPECT_EQ(recs[0].lambda, 0.0005);
  EXPECT_EQ(recs[0].method, "ECQx");
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST_F(CliDir, QuantizeSeedOverride) {
  const auto r = run({"quantize", "--config", cfg_path, "--seed", "5", "--lambda", "0.002", "--mode", "ecq"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find(kReportHeader), std::string::npos);
  EXPECT_NE(r.out.find("ECQ,"), std::string::npos);
  std::size_t runs = 0;
  for (const auto& e : fs::directory_iterator(dir / "out")) runs += e.is_directory();
  EXPECT_EQ(runs, 1u);
}

TEST_F(CliDir, PretrainEncodeDecodeAnalyze) {
  ASSERT_EQ(run({"pretrain", "--config", cfg_path}).code, 0);
  const auto ckpt = (dir / "out" / "pretrained_seed1.ckpt").string();
  ASSERT_TRUE(fs::exists(ckpt));
  const auto bs = (dir / "model.ecqb").string();
  const auto enc = run({"encode", "--config", cfg_path, "--bits", "3", "--lambda", "0.001", ckpt, bs});
  ASSERT_EQ(enc.code, 0) << enc.err;

  const auto js = (dir / "idx.json").string();
  const auto dec = run({"decode", bs, "--json", js});
  ASSERT_EQ(dec.code, 0) << dec.err;
  EXPECT_NE(dec.out.find("layer0_dense"), std::string::npos);
  EXPECT_NE(dec.out.find("bw 3"), std::string::npos);
  // the decoded indices re-encode to the same bytes
  const auto layers = decode(read_file(bs));
  EXPECT_EQ(encode(layers).bytes, read_file(bs));
  const auto j = nlohmann::json::parse(slurp(js));
  ASSERT_EQ(j.size(), layers.size());
  EXPECT_EQ(j[0]["index"].get<std::vector<std::uint8_t>>(), layers[0].assign.index);

  auto corrupt = read_file(bs);
  corrupt[corrupt.size() / 2] ^= 0x10;
  write_file(bs, corrupt);
  EXPECT_EQ(run({"decode", bs}).code, 2);

  const auto an = run({"analyze", "--config", cfg_path, ckpt});
  ASSERT_EQ(an.code, 0) << an.err;
  EXPECT_NE(an.out.find("affine invariance holds"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "out" / "analysis.json"));
}

TEST(Cli, BinaryExitCodes) {
  const std::string bin = ECQX_CLI_PATH;
  auto status = [&](const std::string& args) {
    const int s = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("--no-such-flag"), 1);
  EXPECT_EQ(status("quantize --config /nonexistent/missing.json"), 2);
}
