#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "sth/tensor_io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

/// Runs the CLI with `args`; stderr is discarded.
Run cli(const std::string& args) {
  const std::string cmd = std::string(STH_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sth_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::map<std::string, std::vector<unsigned char>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<unsigned char>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = sth::read_file_bytes(e.path());
  return files;
}

/// Small desk setup: scale 16, 32x32, 4 segments from 8 frames.
std::string tiny_config(const fs::path& dir, bool attention = true) {
  const fs::path cfg = dir / "tiny.cfg";
  write_file(cfg,
             "net.scale_factor = 16\nnet.frames = 4\nnet.input_hw = 32\nnet.num_class = 4\nnet.p = 1/4\n"
             "net.attention = " +
                 std::string(attention ? "true" : "false") +
                 "\n"
                 "train.epochs = 2\ntrain.batch_size = 4\n"
                 "data.task = motion\ndata.resolution = 32\ndata.frames_total = 8\n"
                 "data.samples_per_class = 2\ndata.val_per_class = 1\n");
  return "--config " + cfg.string();
}

}  // namespace

TEST(Cli, AnalyzeReportsHeaderAndTotals) {
  const auto r = cli("analyze");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("p=1/4 kernel_type=dilated attention=false"), std::string::npos);
  EXPECT_NE(r.out.find("params(M) 22.031"), std::string::npos);
}

TEST(Cli, SweepIsMonotone) {
  const auto dir = temp_dir("sweep");
  const auto r = cli("analyze --sweep-p 0,1/8,1/4,1/2 --csv " + (dir / "s.csv").string());
  ASSERT_EQ(r.code, 0);
  std::ifstream is(dir / "s.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "p,params_m,gflops");
  double last_p = 1e9, last_f = 1e9;
  int rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string p, a, b;
    std::getline(ss, p, ',');
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    EXPECT_LT(std::stod(a), last_p);
    EXPECT_LT(std::stod(b), last_f);
    last_p = std::stod(a);
    last_f = std::stod(b);
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST(Cli, ConfigErrorsExitTwoWithoutOutput) {
  const auto dir = temp_dir("badcfg");
  write_file(dir / "a.cfg", "net.p = 1/4\nnet.bogus = 3\n");
  write_file(dir / "b.cfg", "net.p = 1/3\n");
  write_file(dir / "c.cfg", "net.frames three\n");
  for (const char* f : {"a.cfg", "b.cfg", "c.cfg"}) {
    const auto r = cli("analyze --csv " + (dir / "out.csv").string() + " --config " + (dir / f).string());
    EXPECT_EQ(r.code, 2) << f;
    EXPECT_TRUE(r.out.empty()) << f;
    EXPECT_FALSE(fs::exists(dir / "out.csv")) << f;
  }
  EXPECT_EQ(cli("analyze --set net.widths=64,128").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST(Cli, MissingFilesExitThree) {
  EXPECT_EQ(cli("analyze --config /nonexistent/x.cfg").code, 3);
  EXPECT_EQ(cli("eval --checkpoint /nonexistent/ck --data /nonexistent/d").code, 3);
}

TEST(Cli, VerifyOraclePasses) {
  const auto r = cli("verify oracle");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("PASS oracle", 0), 0u);
}

TEST(Cli, GenTrainEvalAreByteDeterministic) {
  const auto dir = temp_dir("det");
  const std::string cfg = tiny_config(dir);
  ASSERT_EQ(cli("gen-data " + cfg + " --out " + (dir / "d1").string()).code, 0);
  ASSERT_EQ(cli("gen-data " + cfg + " --out " + (dir / "d2").string()).code, 0);
  EXPECT_EQ(snapshot(dir / "d1"), snapshot(dir / "d2"));

  const auto t1 = cli("train " + cfg + " --data " + (dir / "d1").string() + " --out " + (dir / "c1").string());
  const auto t2 = cli("train " + cfg + " --data " + (dir / "d1").string() + " --out " + (dir / "c2").string());
  ASSERT_EQ(t1.code, 0);
  EXPECT_EQ(snapshot(dir / "c1"), snapshot(dir / "c2"));
  EXPECT_TRUE(fs::exists(dir / "c1" / "metrics.csv"));

  const auto e1 = cli("eval --checkpoint " + (dir / "c1").string() + " --data " + (dir / "d1").string());
  const auto e2 = cli("eval --checkpoint " + (dir / "c2").string() + " --data " + (dir / "d2").string());
  EXPECT_EQ(e1.code, 0);
  EXPECT_EQ(e1.out, e2.out);
  EXPECT_EQ(e1.out.rfind("val n=4", 0), 0u);

  const auto a = cli("dump-attention --checkpoint " + (dir / "c1").string() + " --data " + (dir / "d1").string() +
                     " --csv " + (dir / "att.csv").string());
  EXPECT_EQ(a.code, 0);
  std::ifstream is(dir / "att.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,sample,alpha_s,alpha_t");
  int rows = 0;
  while (std::getline(is, line)) {
    double s = 0, t = 0;
    ASSERT_EQ(std::sscanf(line.c_str(), "%*d,%*d,%lf,%lf", &s, &t), 2);
    EXPECT_NEAR(s + t, 1.0, 1e-12);
    ++rows;
  }
  EXPECT_EQ(rows, 16 * 4);
}

TEST(Cli, ShapeAndConsistencyErrorsExitFour) {
  const auto dir = temp_dir("mismatch");
  const std::string cfg = tiny_config(dir, false);
  ASSERT_EQ(cli("gen-data " + cfg + " --out " + (dir / "d").string()).code, 0);
  ASSERT_EQ(cli("train " + cfg + " --set train.epochs=1 --data " + (dir / "d").string() + " --out " +
                (dir / "c").string())
                .code,
            0);
  // same task at another resolution
  ASSERT_EQ(cli("gen-data " + cfg + " --set data.resolution=40 --out " + (dir / "d40").string()).code, 0);
  EXPECT_EQ(cli("eval --checkpoint " + (dir / "c").string() + " --data " + (dir / "d40").string()).code, 4);
  // tampered checkpoint tensor shape
  fs::copy(dir / "c" / "params" / "fc.bias.stht", dir / "c" / "params" / "fc.weight.stht",
           fs::copy_options::overwrite_existing);
  EXPECT_EQ(cli("eval --checkpoint " + (dir / "c").string() + " --data " + (dir / "d").string()).code, 4);
}

TEST(Cli, AttentionExportNeedsAttention) {
  const auto dir = temp_dir("noatt");
  const std::string cfg = tiny_config(dir, false);
  ASSERT_EQ(cli("gen-data " + cfg + " --out " + (dir / "d").string()).code, 0);
  ASSERT_EQ(cli("train " + cfg + " --set train.epochs=1 --data " + (dir / "d").string() + " --out " +
                (dir / "c").string())
                .code,
            0);
  EXPECT_EQ(cli("dump-attention --checkpoint " + (dir / "c").string() + " --data " + (dir / "d").string()).code, 2);
}
