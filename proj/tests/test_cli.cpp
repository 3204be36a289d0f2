#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <sys/wait.h>

#include "support.hpp"

namespace fs = std::filesystem;
using metarep::test_support::slurp;
using metarep::test_support::TempDir;

namespace {

struct CliRun {
  int code;
  std::string output;  // stdout and stderr
};

CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(METAREP_CLI) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string smoke_args(const fs::path& root) {
  const fs::path src(METAREP_SOURCE_DIR);
  const fs::path data = src / "data" / "mnist5k";
  return "-c " + (src / "configs" / "smoke.toml").string() + " --override run.out_dir=" + (root / "maml").string() +
         " --override experiment.checkpoint_dir=" + (root / "maml").string() +
         " --override experiment.out_dir=" + (root / "analysis").string() +
         " --override supervised.out_dir=" + (root / "supervised").string() +
         " --override data.mnist_train_images=" + (data / "train-images-idx3-ubyte").string() +
         " --override data.mnist_train_labels=" + (data / "train-labels-idx1-ubyte").string() +
         " --override data.mnist_test_images=" + (data / "test-images-idx3-ubyte").string() +
         " --override data.mnist_test_labels=" + (data / "test-labels-idx1-ubyte").string();
}

std::size_t data_rows(const fs::path& csv) {
  std::size_t rows = 0;
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);  // provenance
  std::getline(in, line);  // header
  while (std::getline(in, line)) ++rows;
  return rows;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const CliRun r = run_cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("analyze"), std::string::npos);
  EXPECT_EQ(run_cli("analyze --help").code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli("").code, 1);
  EXPECT_EQ(run_cli("frobnicate").code, 1);
  EXPECT_EQ(run_cli("train --bogus-flag").code, 1);
  const CliRun missing = run_cli("train -c /nonexistent/config.toml");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.output.find("/nonexistent/config.toml"), std::string::npos);
  EXPECT_EQ(run_cli("train --override maml.unknown_key=3").code, 1);
  const CliRun unknown = run_cli("analyze sideways");
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.output.find("to-init"), std::string::npos);  // help lists the pipelines
}

TEST(Cli, AnalyzeWithoutCheckpointsNamesTheExpectedFile) {
  TempDir dir("cli_nockpt");
  const CliRun r = run_cli("analyze to-init --override experiment.checkpoint_dir=" + (dir.path / "none").string() +
                        " --override experiment.out_dir=" + (dir.path / "out").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("none"), std::string::npos);
}

TEST(Cli, CorruptedGradcheckExitsTwo) {
  const CliRun r = run_cli("gradcheck --corrupt-inner-lr-sign");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("FAIL"), std::string::npos);
}

TEST(Cli, EndToEndSmokeRun) {
  TempDir dir("cli_smoke");
  const std::string args = smoke_args(dir.path);
  const CliRun train = run_cli("train " + args);
  ASSERT_EQ(train.code, 0) << train.output;
  EXPECT_NE(train.output.find("done: steps=20"), std::string::npos);
  for (int s : {0, 5, 10, 15, 20}) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%08d.mrck", s);
    EXPECT_TRUE(fs::exists(dir.path / "maml" / name)) << name;
  }
  EXPECT_TRUE(fs::exists(dir.path / "maml" / "train_log.csv"));

  ASSERT_EQ(run_cli("analyze to-init " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "dissim_to_init.csv"), 5u * 5 * 2);
  ASSERT_EQ(run_cli("analyze drift " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "training_drift_delta5.csv"), 3u * 5);
  ASSERT_EQ(run_cli("analyze drift --delta 10 " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "training_drift_delta10.csv"), 2u * 5);
  EXPECT_EQ(run_cli("analyze drift --delta 7 " + args).code, 1);
  ASSERT_EQ(run_cli("analyze trace " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "trace_conv1_coords.csv"), 2u * (1 + 2 * 2));
  EXPECT_TRUE(fs::exists(dir.path / "analysis" / "trace_head_mds.json"));
  ASSERT_EQ(run_cli("analyze accuracy " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "accuracy_curve.csv"), 5u * 3);

  const CliRun sup = run_cli("train-supervised " + args);
  ASSERT_EQ(sup.code, 0) << sup.output;
  ASSERT_EQ(run_cli("analyze baseline " + args).code, 0);
  EXPECT_EQ(data_rows(dir.path / "analysis" / "supervised_baseline.csv"), 3u * 5);
}

TEST(Cli, MismatchedCheckpointsWarn) {
  TempDir dir("cli_warn");
  const std::string args = smoke_args(dir.path);
  ASSERT_EQ(run_cli("train " + args).code, 0);
  const CliRun r = run_cli("analyze drift " + args + " --override maml.inner_lr=0.2");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("warning"), std::string::npos);
}
