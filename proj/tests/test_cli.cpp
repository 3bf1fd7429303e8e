#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fusenet/data.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "fusenet_cli_test";

// Runs the CLI with stdout/stderr captured in <root>/<tag>.log.
int run(const std::string& tag, const std::string& args) {
  fs::create_directories(kRoot);
  const std::string cmd =
      std::string(FUSENET_CLI_PATH) + " " + args + " > " + (kRoot / (tag + ".log")).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

// Tiny desk run shared by the checkpoint-consuming tests.
const std::string kTiny =
    "--profile desk --set data.train_scenes=8 --set data.val_scenes=4 --set run.threads=1 ";

fs::path trained_dir() {
  static const fs::path dir = [] {
    const fs::path d = kRoot / "trained";
    fs::remove_all(d);
    EXPECT_EQ(run("trained", "train " + kTiny + "--epochs 2 --out " + d.string()), 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, HelpAndParseErrors) {
  EXPECT_EQ(run("help", "--help"), 0);
  EXPECT_NE(slurp(kRoot / "help.log").find("train_log.csv"), std::string::npos);
  EXPECT_EQ(run("nocmd", ""), 1);
  EXPECT_EQ(run("badflag", "train --no-such-flag"), 1);
  EXPECT_EQ(run("badset", "train --profile desk --set train.bogus=1 --out " + (kRoot / "x").string()), 1);
  EXPECT_EQ(run("badprofile", "train --profile laptop"), 1);
}

TEST(Cli, TrainWritesLogAndCheckpoints) {
  const fs::path d = trained_dir();
  EXPECT_EQ(line_count(d / "train_log.csv"), 3u);
  EXPECT_TRUE(fs::exists(d / "last.ckpt"));
  EXPECT_TRUE(fs::exists(d / "best.ckpt"));
}

TEST(Cli, DivergenceExitsWithTwo) {
  const fs::path d = kRoot / "nan";
  fs::remove_all(d);
  EXPECT_EQ(run("nan", "train " + kTiny + "--epochs 2 --set train.lr0=1e12 --out " + d.string()), 2);
  EXPECT_TRUE(fs::exists(d / "nan_dump.txt"));
  EXPECT_NE(slurp(kRoot / "nan.log").find("numerical failure"), std::string::npos);
}

TEST(Cli, EvalWritesFixedColumns) {
  const fs::path d = trained_dir();
  const fs::path out = kRoot / "eval";
  ASSERT_EQ(run("eval", "eval " + kTiny + "--checkpoint " + (d / "best.ckpt").string() + " --out " + out.string()), 0);
  std::ifstream in(out / "eval.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "class,AP50,AP50-90");
}

TEST(Cli, EvalErrors) {
  const fs::path d = trained_dir();
  EXPECT_EQ(run("eval_missing", "eval " + kTiny + "--checkpoint " + (kRoot / "none.ckpt").string()), 1);
  const fs::path empty = kRoot / "empty_data";
  fs::create_directories(empty / "images");
  fs::create_directories(empty / "labels");
  EXPECT_EQ(run("eval_empty", "eval " + kTiny + "--checkpoint " + (d / "best.ckpt").string() + " --data " +
                                  empty.string() + " --out " + (kRoot / "eval_empty").string()),
            1);
  // A checkpoint of another architecture is rejected.
  EXPECT_EQ(run("eval_digest", "eval " + kTiny + "--set fusion.setting=4 --checkpoint " + (d / "best.ckpt").string() +
                                   " --out " + (kRoot / "eval_digest").string()),
            1);
}

TEST(Cli, RenderAtHighThresholdDrawsNothing) {
  const fs::path d = trained_dir();
  const fs::path data_dir = kRoot / "gen";
  fs::remove_all(data_dir);
  ASSERT_EQ(run("gen", "gen-data " + kTiny + "--out " + data_dir.string()), 0);
  const fs::path image = data_dir / "val" / "images";
  ASSERT_TRUE(fs::exists(image));
  const fs::path first = fs::directory_iterator(image)->path();
  const fs::path target = kRoot / "render" / "out.ppm";
  ASSERT_EQ(run("render", "render " + kTiny + "--checkpoint " + (d / "last.ckpt").string() + " --image " +
                              first.string() + " --conf 0.99 --output " + target.string()),
            0);
  const auto in = fusenet::data::read_ppm(first), out = fusenet::data::read_ppm(target);
  EXPECT_EQ(out.width, in.width);
  EXPECT_EQ(out.height, in.height);
  EXPECT_EQ(out, in);
  EXPECT_EQ(line_count(kRoot / "render" / "out.txt"), 1u);
}

TEST(Cli, GradcheckAndBench) {
  const fs::path out = kRoot / "gc";
  EXPECT_EQ(run("gradcheck", "gradcheck --out " + out.string()), 0);
  EXPECT_GT(line_count(out / "gradcheck.csv"), 100u);
  // Per-block wall time is reported on the console.
  EXPECT_NE(slurp(kRoot / "gradcheck.log").find(" ms"), std::string::npos);
  EXPECT_EQ(run("gradcheck_strict", "gradcheck --tolerance 1e-30 --out " + (kRoot / "gc2").string()), 2);

  const fs::path bench = kRoot / "bench";
  EXPECT_EQ(run("bench", "bench --profile desk --runs 2 --warmup 0 --out " + bench.string()), 0);
  EXPECT_EQ(line_count(bench / "bench.csv"), 3u);
  const std::string log = slurp(kRoot / "bench.log");
  EXPECT_NE(log.find("latency"), std::string::npos);
  EXPECT_NE(log.find("analytic 3538944 counted 3538944"), std::string::npos);
}
