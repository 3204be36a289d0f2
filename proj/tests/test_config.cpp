#include <gtest/gtest.h>

#include <fstream>

#include "metarep/config.hpp"
#include "support.hpp"

using namespace metarep;
using metarep::test_support::TempDir;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsDescribeTheDeskRun) {
  const RunConfig c = load_run_config("");
  EXPECT_EQ(c.model.filters, 8u);
  EXPECT_EQ(c.model.image_size, 28u);
  EXPECT_EQ(c.task.synth.n_way, 5u);
  EXPECT_EQ(c.task.synth.k_shot, 1u);
  EXPECT_EQ(c.maml.total_steps, 2000u);
  EXPECT_EQ(c.maml.order, MetaOrder::second);
  EXPECT_EQ(c.supervised.steps, 200u);
  EXPECT_EQ(c.supervised.batch_size, 100u);
}

TEST(Config, FileSyntaxIsParsed) {
  RunConfig c;
  apply_config_text(c, R"(
# comment line
[run]
seed = 12        # trailing comment
out_dir = "runs/x"

[model]
filters = 16
batch_norm = false

[maml]
order = first
inner_lr = 0.05

[task]
n_way = 3
image_size = 20

[supervised]
checkpoint_steps = [0, 5, 10]

[experiment]
layers = ["conv1", "head"]
modes = [post_finetune]
metric = correlation
)");
  c.sync();
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.out_dir, "runs/x");
  EXPECT_EQ(c.model.filters, 16u);
  EXPECT_FALSE(c.model.use_batch_norm);
  EXPECT_EQ(c.maml.order, MetaOrder::first);
  EXPECT_DOUBLE_EQ(c.maml.inner_lr, 0.05);
  EXPECT_EQ(c.model.n_way, 3u);
  EXPECT_EQ(c.model.image_size, 20u);
  EXPECT_EQ(c.task.synth.seed, 12u);
  EXPECT_EQ(c.supervised.checkpoint_steps, (std::vector<std::uint64_t>{0, 5, 10}));
  EXPECT_EQ(c.experiment.layers, (std::vector<std::string>{"conv1", "head"}));
  ASSERT_EQ(c.experiment.modes.size(), 1u);
  EXPECT_EQ(c.experiment.modes[0], CompareMode::post_finetune);
  EXPECT_EQ(c.experiment.metric, RdmMetric::correlation);
}

TEST(Config, ErrorsNameTheLocation) {
  RunConfig c;
  EXPECT_NE(error_of([&] { apply_config_text(c, "[model]\nfliters = 3\n", "a.toml"); }).find("a.toml:2"),
            std::string::npos);
  EXPECT_NE(error_of([&] { apply_config_text(c, "[bogus]\n", "b.toml"); }).find("unknown section"), std::string::npos);
  EXPECT_NE(error_of([&] { apply_config_text(c, "seed = 1\n"); }).find("outside"), std::string::npos);
  EXPECT_NE(error_of([&] { apply_config_text(c, "[run]\nseed\n"); }).find("key = value"), std::string::npos);
  EXPECT_NE(error_of([&] { apply_config_text(c, "[run]\nseed = -3\n"); }), "");
  EXPECT_NE(error_of([&] { apply_config_text(c, "[run]\nseed = 1.5\n"); }), "");
  EXPECT_NE(error_of([&] { apply_config_text(c, "[model]\nbatch_norm = maybe\n"); }), "");
  EXPECT_NE(error_of([&] { apply_config_text(c, "[maml]\norder = third\n"); }), "");
  EXPECT_NE(error_of([&] { apply_config_text(c, "[experiment]\nmodes = [sideways]\n"); }), "");
}

TEST(Config, OverridesApplyAfterTheFile) {
  TempDir dir("cfg");
  std::ofstream(dir.path / "c.toml") << "[maml]\ntotal_steps = 100\ninner_steps = 3\n";
  const RunConfig c = load_run_config(dir.path / "c.toml", {"maml.total_steps=40", "run.seed=5"});
  EXPECT_EQ(c.maml.total_steps, 40u);
  EXPECT_EQ(c.maml.inner_steps, 3u);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_THROW(load_run_config(dir.path / "c.toml", {"maml.nope=1"}), ConfigError);
  EXPECT_THROW(load_run_config(dir.path / "c.toml", {"no_equals"}), ConfigError);
  EXPECT_THROW(load_run_config(dir.path / "missing.toml"), ConfigError);
}

TEST(Config, ValidationRejectsInconsistentValues) {
  EXPECT_THROW(load_run_config("", {"maml.inner_lr=0"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"task.n_way=1"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"task.kind=pgm"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"supervised.checkpoint_steps=[500]"}), ConfigError);
  EXPECT_THROW(load_run_config("", {"experiment.layers=[conv7]"}), ConfigError);
}

TEST(Config, SampleConfigsLoad) {
  for (const char* name : {"desk.toml", "smoke.toml"}) {
    const auto path = std::filesystem::path(METAREP_SOURCE_DIR) / "configs" / name;
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    EXPECT_NO_THROW(load_run_config(path)) << path;
  }
}

TEST(Config, TaskSourceFollowsTheRunSeed) {
  const RunConfig a = load_run_config("", {"run.seed=1", "task.image_size=12"});
  const RunConfig b = load_run_config("", {"run.seed=2", "task.image_size=12"});
  EXPECT_NE(make_task_source(a)->task(0).support_x, make_task_source(b)->task(0).support_x);
  EXPECT_EQ(make_task_source(a)->task(0).support_x, make_task_source(a)->task(0).support_x);
}
