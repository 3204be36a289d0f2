#include <gtest/gtest.h>

#include <cmath>

#include "metarep/checkpoint.hpp"
#include "metarep/maml.hpp"
#include "support.hpp"

using namespace metarep;
using metarep::test_support::TempDir;

namespace {

NetConfig tiny_net() {
  NetConfig c;
  c.image_size = 10;
  c.filters = 3;
  return c;
}

SynthConfig tiny_tasks(const NetConfig& net) {
  SynthConfig s;
  s.image_size = net.image_size;
  s.n_query = 2;
  s.seed = 4;
  return s;
}

}  // namespace

// Toy quadratic with inner loss theta^2 / 2 and outer loss (phi - t)^2 / 2:
// after k steps phi = (1 - a)^k theta, the exact meta-gradient is
// (1 - a)^k (phi - t) and the first-order one is (phi - t).
TEST(Maml, ToyBilevelMatchesClosedForm) {
  for (double a : {0.05, 0.1, 0.3}) {
    for (std::size_t k : {1u, 2u, 5u}) {
      for (double th : {-1.5, 1.0, 2.0}) {
        for (double target : {0.0, 0.7}) {
          const ParamSet theta = {{"theta", Tensor::scalar(th)}};
          const std::vector<ToyQuadraticTask> tasks = {{target}};
          MamlConfig cfg;
          cfg.inner_lr = a;
          cfg.inner_steps = k;
          const double shrink = std::pow(1.0 - a, static_cast<double>(k));
          const double phi = shrink * th;
          cfg.order = MetaOrder::second;
          EXPECT_NEAR(meta_grad(theta, tasks, cfg).grad.at("theta").item(), shrink * (phi - target), 1e-13);
          cfg.order = MetaOrder::first;
          EXPECT_NEAR(meta_grad(theta, tasks, cfg).grad.at("theta").item(), phi - target, 1e-13);
          EXPECT_NEAR(meta_grad(theta, tasks, cfg).outer_loss, 0.5 * (phi - target) * (phi - target), 1e-13);
        }
      }
    }
  }
}

TEST(Maml, ToyBatchAveragesTasks) {
  const ParamSet theta = {{"theta", Tensor::scalar(1.0)}};
  const std::vector<ToyQuadraticTask> tasks = {{0.0}, {1.0}};
  MamlConfig cfg;
  cfg.inner_steps = 1;
  // 0.9 * ((0.9 - 0) + (0.9 - 1)) / 2
  EXPECT_NEAR(meta_grad(theta, tasks, cfg).grad.at("theta").item(), 0.9 * 0.4, 1e-15);
}

// First order equals the query-loss gradient at the adapted parameters.
TEST(Maml, FirstOrderIsQueryGradientAtAdaptedParams) {
  const NetConfig net = tiny_net();
  const ParamSet theta = init_params(net, 8);
  const Episode e = synth_episode(tiny_tasks(net), 3);
  const std::vector<EpisodeTask> tasks = {{&net, &e}};
  MamlConfig cfg;
  cfg.order = MetaOrder::first;
  cfg.inner_steps = 3;
  const ParamSet got = meta_grad(theta, tasks, cfg).grad;

  Adaptation a = inner_adapt(as_params(theta), tasks[0], cfg.inner_lr, 3, false);
  VarMap phi = as_params(values(a.phi));
  const ParamSet expect = values(grad(tasks[0].query(phi).loss, phi));
  EXPECT_LT(max_relative_error(got, expect), 1e-12);
}

TEST(Maml, SecondOrderMatchesFiniteDifferences) {
  const NetConfig net = tiny_net();
  const ParamSet theta = init_params(net, 9);
  const Episode e = synth_episode(tiny_tasks(net), 1);
  const std::vector<EpisodeTask> tasks = {{&net, &e}};
  MamlConfig cfg;
  cfg.inner_steps = 2;
  const ParamSet analytic = meta_grad(theta, tasks, cfg).grad;
  const ParamSet numeric =
      finite_diff_grad([&](const ParamSet& p) { return outer_loss(as_params(p), tasks, cfg).value().item(); }, theta,
                       1e-7);
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-4);
}

TEST(Maml, InnerStepsFollowPlainGradientDescent) {
  const ParamSet theta = {{"theta", Tensor::scalar(2.0)}};
  const ToyQuadraticTask task{0.0};
  Adaptation a = inner_adapt(as_params(theta), task, 0.25, 3, false, {}, true);
  ASSERT_EQ(a.trajectory.size(), 3u);
  EXPECT_DOUBLE_EQ(a.trajectory[0].at("theta").item(), 1.5);
  EXPECT_DOUBLE_EQ(a.trajectory[1].at("theta").item(), 1.125);
  EXPECT_DOUBLE_EQ(a.trajectory[2].at("theta").item(), 0.84375);
  EXPECT_THROW(inner_adapt(as_params(theta), task, 0.25, 0, false), Error);
}

TEST(Maml, NormParametersCanBeFrozenInTheInnerLoop) {
  const NetConfig net = tiny_net();
  const ParamSet theta = init_params(net, 2);
  const Episode e = synth_episode(tiny_tasks(net), 0);
  const EpisodeTask task{&net, &e};
  MamlConfig cfg;
  cfg.adapt_norm_params = false;
  const ParamSet phi = values(inner_adapt(as_params(theta), task, 0.1, 2, false, inner_filter(cfg)).phi);
  for (const auto& [name, t] : theta) {
    if (is_norm_param(name))
      EXPECT_EQ(phi.at(name), t) << name;
    else
      EXPECT_NE(phi.at(name), t) << name;
  }
}

TEST(Maml, ZeroStepQueryIsEvaluatedAtTheta) {
  const NetConfig net = tiny_net();
  const ParamSet theta = init_params(net, 2);
  const Episode e = synth_episode(tiny_tasks(net), 0);
  const EpisodeTask task{&net, &e};
  const VarMap th = as_constants(theta);
  EXPECT_EQ(adapted_query(th, task, MamlConfig{}, 0).loss.value(), task.query(th).loss.value());
}

TEST(Maml, ThreadedMetaGradientIsBitIdentical) {
  const NetConfig net = tiny_net();
  const ParamSet theta = init_params(net, 5);
  std::vector<Episode> eps;
  for (std::uint64_t i = 0; i < 4; ++i) eps.push_back(synth_episode(tiny_tasks(net), i));
  std::vector<EpisodeTask> tasks;
  for (const auto& e : eps) tasks.push_back({&net, &e});
  MamlConfig cfg;
  cfg.inner_steps = 2;
  cfg.threads = 1;
  const ParamSet serial = meta_grad(theta, tasks, cfg).grad;
  cfg.threads = 3;
  EXPECT_EQ(serial, meta_grad(theta, tasks, cfg).grad);
}

// Scalar Adam written out from the update equations.
TEST(Maml, AdamMatchesReferenceRecurrence) {
  Rng rng(4);
  ParamSet p = {{"a", metarep::test_support::uniform_tensor(rng, {3})}, {"b", metarep::test_support::uniform_tensor(rng, {2, 2})}};
  AdamState st = AdamState::for_params(p);
  ParamSet ref = p;
  std::map<std::string, std::vector<double>> m, v;
  for (const auto& [n, t] : p) m[n] = v[n] = std::vector<double>(t.size(), 0.0);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 1; step <= 5; ++step) {
    ParamSet g;
    for (const auto& [n, t] : p) g.emplace(n, metarep::test_support::uniform_tensor(rng, t.shape()));
    auto r = adam_step(st, p, g, lr);
    p = r.params;
    st = r.state;
    for (auto& [n, t] : ref)
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double gi = g.at(n)[i];
        m[n][i] = b1 * m[n][i] + (1 - b1) * gi;
        v[n][i] = b2 * v[n][i] + (1 - b2) * gi * gi;
        const double mh = m[n][i] / (1 - std::pow(b1, step)), vh = v[n][i] / (1 - std::pow(b2, step));
        t[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    EXPECT_LT(max_relative_error(p, ref), 1e-14) << "step " << step;
  }
  EXPECT_EQ(st.t, 5u);
}

TEST(Maml, FirstAdamStepMovesEachCoordinateByTheLearningRate) {
  ParamSet p = {{"w", Tensor(Shape{3}, {0.0, 1.0, -2.0})}};
  ParamSet g = {{"w", Tensor(Shape{3}, {3.0, -0.5, 1e-3})}};
  auto r = adam_step(AdamState::for_params(p), p, g, 0.1);
  EXPECT_NEAR(r.params.at("w")[0], -0.1, 1e-8);
  EXPECT_NEAR(r.params.at("w")[1], 1.1, 1e-8);
  EXPECT_NEAR(r.params.at("w")[2], -2.1, 1e-5);
}

TEST(Maml, TrainingWritesCheckpointsAndIsDeterministic) {
  const NetConfig net = tiny_net();
  SynthTaskSource source(tiny_tasks(net));
  MamlConfig cfg;
  cfg.total_steps = 6;
  cfg.checkpoint_every = 3;
  cfg.log_every = 2;
  cfg.inner_steps = 1;
  cfg.meta_batch = 2;
  TempDir a("train_a"), b("train_b");
  const TrainResult ra = train(net, cfg, source, 17, a.path);
  const TrainResult rb = train(net, cfg, source, 17, b.path);
  EXPECT_EQ(ra.checkpoint_steps, (std::vector<std::uint64_t>{0, 3, 6}));
  EXPECT_EQ(list_checkpoints(a.path), ra.checkpoint_steps);
  EXPECT_EQ(ra.log.size(), 3u);
  for (std::uint64_t s : ra.checkpoint_steps) {
    const std::string bytes = metarep::test_support::slurp(checkpoint_path(a.path, s));
    EXPECT_EQ(bytes, metarep::test_support::slurp(checkpoint_path(b.path, s)));
    EXPECT_EQ(read_checkpoint(checkpoint_path(a.path, s)).step, s);
  }
  EXPECT_EQ(metarep::test_support::slurp(a.path / "train_log.csv"), metarep::test_support::slurp(b.path / "train_log.csv"));
  EXPECT_EQ(read_checkpoint(checkpoint_path(a.path, 6)).params, ra.final_params);
  EXPECT_EQ(read_checkpoint(checkpoint_path(a.path, 0)).params, init_params(net, 17));
}

TEST(Maml, TrainingReducesTheOuterLoss) {
  const NetConfig net = tiny_net();
  SynthTaskSource source(tiny_tasks(net));
  MamlConfig cfg;
  cfg.total_steps = 60;
  cfg.checkpoint_every = 60;
  cfg.log_every = 10;
  cfg.inner_steps = 1;
  cfg.meta_lr = 0.003;
  cfg.order = MetaOrder::first;
  TempDir dir("train_loss");
  const TrainResult r = train(net, cfg, source, 1, dir.path);
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < 2; ++i) early += r.log[i].outer_loss;
  for (std::size_t i = r.log.size() - 2; i < r.log.size(); ++i) late += r.log[i].outer_loss;
  EXPECT_LT(late, early);
}

TEST(Maml, ConfigValidation) {
  MamlConfig c;
  c.inner_lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = MamlConfig{};
  c.meta_batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  const NetConfig net = tiny_net();
  SynthConfig s = tiny_tasks(net);
  s.n_way = 3;
  TempDir dir("train_bad");
  EXPECT_THROW(train(net, MamlConfig{}, SynthTaskSource(s), 0, dir.path), ConfigError);
}

TEST(Maml, SupervisedTrainingCheckpointsListedSteps) {
  const NetConfig net = tiny_net();
  LabeledImages data{Tensor(Shape{40, 1, 10, 10}), {}};
  Rng rng(2);
  for (double& v : data.x.data()) v = rng.uniform();
  for (int i = 0; i < 40; ++i) data.y.push_back(i % 5);
  SupervisedConfig cfg;
  cfg.steps = 4;
  cfg.batch_size = 8;
  cfg.checkpoint_steps = {0, 1, 4};
  TempDir a("sup_a"), b("sup_b");
  const auto ra = supervised_train(net, data, cfg, 3, a.path);
  supervised_train(net, data, cfg, 3, b.path);
  EXPECT_EQ(list_checkpoints(a.path), (std::vector<std::uint64_t>{0, 1, 4}));
  for (std::uint64_t s : {0u, 1u, 4u})
    EXPECT_EQ(metarep::test_support::slurp(checkpoint_path(a.path, s)), metarep::test_support::slurp(checkpoint_path(b.path, s)));
  EXPECT_EQ(read_checkpoint(checkpoint_path(a.path, 4)).params, ra.final_params);
  cfg.checkpoint_steps = {5};
  EXPECT_THROW(supervised_train(net, data, cfg, 3, a.path), ConfigError);
}
