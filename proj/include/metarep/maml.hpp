#pragma once

// Bi-level MAML.
//
// inner_adapt runs plain gradient descent on a task's support loss. With
// second-order meta-gradients the inner gradients are recorded
// (create_graph), so differentiating the query loss at phi back to theta
// goes through the whole unrolled inner loop. First order keeps the inner
// gradients as constants, which makes d phi / d theta the identity.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "metarep/checkpoint.hpp"
#include "metarep/model.hpp"
#include "metarep/params.hpp"
#include "metarep/tasks.hpp"
#include "metarep/util.hpp"

namespace metarep {

enum class MetaOrder { second, first };

inline std::string to_string(MetaOrder o) { return o == MetaOrder::second ? "second" : "first"; }

struct MamlConfig {
  double inner_lr = 0.1;
  std::size_t inner_steps = 5;
  double meta_lr = 0.001;
  std::size_t meta_batch = 4;
  MetaOrder order = MetaOrder::second;
  std::size_t total_steps = 2000;
  std::size_t checkpoint_every = 200;
  std::size_t log_every = 20;
  // Whether batch-norm gamma/beta take part in the inner loop.
  bool adapt_norm_params = true;
  std::size_t threads = 1;

  void validate() const {
    if (!(inner_lr > 0.0)) throw ConfigError("maml.inner_lr must be > 0");
    if (inner_steps < 1) throw ConfigError("maml.inner_steps must be >= 1");
    if (!(meta_lr > 0.0)) throw ConfigError("maml.meta_lr must be > 0");
    if (meta_batch < 1) throw ConfigError("maml.meta_batch must be >= 1");
    if (checkpoint_every < 1) throw ConfigError("maml.checkpoint_every must be >= 1");
    if (log_every < 1) throw ConfigError("maml.log_every must be >= 1");
  }

  // Full-scale Omniglot 20-way 1-shot setup.
  static MamlConfig omniglot_preset() {
    MamlConfig c;
    c.inner_lr = 0.1;
    c.inner_steps = 5;
    c.meta_lr = 0.001;
    c.meta_batch = 16;
    c.total_steps = 60000;
    c.checkpoint_every = 1000;
    return c;
  }
};

struct QueryEval {
  Var loss;
  double accuracy = 0.0;
};

// Anything with a differentiable support loss and query evaluation.
template <typename T>
concept MetaTask = requires(const T& t, const VarMap& p) {
  { t.support_loss(p) } -> std::same_as<Var>;
  { t.query(p) } -> std::same_as<QueryEval>;
};

// Few-shot classification episode on the ConvNet.
struct EpisodeTask {
  const NetConfig* net;
  const Episode* episode;

  Var support_loss(const VarMap& p) const {
    return classification_loss(p, episode->support_x, episode->support_y, *net);
  }
  QueryEval query(const VarMap& p) const {
    Var logits = forward(p, Var::constant(episode->query_x), *net).logits;
    return {softmax_cross_entropy(logits, episode->query_y), accuracy(logits.value(), episode->query_y)};
  }
};

// Toy bilevel quadratic on a single parameter "theta": inner loss
// 0.5 theta^2, outer loss 0.5 (phi - target)^2. Closed forms for one inner
// step: phi = (1 - a) theta, second-order meta-gradient (1 - a)^2 theta -
// (1 - a) target, first order phi - target.
struct ToyQuadraticTask {
  double target = 0.0;

  Var support_loss(const VarMap& p) const {
    const Var& th = p.at("theta");
    return scale(sum(mul(th, th)), 0.5);
  }
  QueryEval query(const VarMap& p) const {
    Var d = add_scalar(p.at("theta"), -target);
    return {scale(sum(mul(d, d)), 0.5), 0.0};
  }
};

using ParamFilter = std::function<bool(const std::string&)>;

inline ParamFilter inner_filter(const MamlConfig& cfg) {
  if (cfg.adapt_norm_params) return [](const std::string&) { return true; };
  return [](const std::string& name) { return !is_norm_param(name); };
}

struct Adaptation {
  VarMap phi;
  // Detached parameter values after each inner step (only when requested).
  std::vector<ParamSet> trajectory;
};

// `steps` rounds of phi <- phi - lr * grad support_loss(phi), starting from
// theta. record_second_order keeps the inner gradients differentiable.
template <MetaTask Task>
Adaptation inner_adapt(const VarMap& theta, const Task& task, double lr, std::size_t steps,
                       bool record_second_order, const ParamFilter& adapt = {},
                       bool keep_trajectory = false) {
  if (steps < 1) throw Error("inner_adapt: steps must be >= 1");
  Adaptation out;
  out.phi = theta;
  for (std::size_t s = 0; s < steps; ++s) {
    VarMap trainable;
    for (const auto& [name, v] : out.phi)
      if (!adapt || adapt(name)) trainable.emplace(name, v);
    try {
      Var loss = task.support_loss(out.phi);
      VarMap g = grad(loss, trainable, record_second_order);
      for (auto& [name, gv] : g) out.phi[name] = sub(out.phi[name], scale(gv, lr));
    } catch (const NumericFault& e) {
      throw NumericFault("inner step " + std::to_string(s + 1) + " of " + std::to_string(steps) + ": " + e.what());
    }
    if (keep_trajectory) out.trajectory.push_back(values(out.phi));
  }
  return out;
}

// Query evaluation after `steps` inner steps (0 = evaluate at theta).
template <MetaTask Task>
QueryEval adapted_query(const VarMap& theta, const Task& task, const MamlConfig& cfg, std::size_t steps) {
  if (steps == 0) return task.query(theta);
  const bool second = cfg.order == MetaOrder::second;
  return task.query(inner_adapt(theta, task, cfg.inner_lr, steps, second, inner_filter(cfg)).phi);
}

// Mean query loss over the batch after inner adaptation, recorded w.r.t.
// theta.
template <MetaTask Task>
Var outer_loss(const VarMap& theta, const std::vector<Task>& tasks, const MamlConfig& cfg,
               std::optional<std::size_t> steps = std::nullopt) {
  if (tasks.empty()) throw Error("outer_loss: empty task batch");
  const std::size_t k = steps.value_or(cfg.inner_steps);
  Var total;
  for (const Task& t : tasks) {
    Var l = adapted_query(theta, t, cfg, k).loss;
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(tasks.size()));
}

struct MetaGradResult {
  ParamSet grad;
  double outer_loss = 0.0;
  std::vector<double> query_loss;      // per task
  std::vector<double> query_accuracy;  // per task
};

// Gradient of outer_loss w.r.t. theta. Tasks are independent given theta and
// may run in parallel; contributions are summed in task order.
template <MetaTask Task>
MetaGradResult meta_grad(const ParamSet& theta, const std::vector<Task>& tasks, const MamlConfig& cfg,
                         std::optional<std::size_t> steps = std::nullopt) {
  if (tasks.empty()) throw Error("meta_grad: empty task batch");
  const std::size_t k = steps.value_or(cfg.inner_steps);
  const std::size_t m = tasks.size();
  std::vector<ParamSet> per_task(m);
  MetaGradResult r;
  r.query_loss.resize(m);
  r.query_accuracy.resize(m);
  parallel_for(m, cfg.threads, [&](std::size_t i) {
    VarMap th = as_params(theta);
    QueryEval q = adapted_query(th, tasks[i], cfg, k);
    per_task[i] = values(grad(q.loss, th));
    r.query_loss[i] = q.loss.value().item();
    r.query_accuracy[i] = q.accuracy;
  });
  r.grad = per_task[0];
  for (std::size_t i = 1; i < m; ++i)
    for (auto& [name, t] : r.grad) {
      const Tensor& o = per_task[i].at(name);
      for (std::size_t j = 0; j < t.size(); ++j) t[j] += o[j];
    }
  const double inv_m = 1.0 / static_cast<double>(m);
  for (auto& [name, t] : r.grad)
    for (double& v : t.data()) v *= inv_m;
  for (double l : r.query_loss) r.outer_loss += l;
  r.outer_loss *= inv_m;
  return r;
}

// --- Adam --------------------------------------------------------------------

struct AdamState {
  ParamSet m, v;
  std::uint64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState for_params(const ParamSet& p) {
    AdamState s;
    for (const auto& [name, t] : p) {
      s.m.emplace(name, Tensor(t.shape()));
      s.v.emplace(name, Tensor(t.shape()));
    }
    return s;
  }
};

struct AdamResult {
  ParamSet params;
  AdamState state;
};

// Bias-corrected Adam.
inline AdamResult adam_step(const AdamState& state, const ParamSet& params, const ParamSet& g, double lr) {
  require_conformable(params, g, "adam_step");
  require_conformable(params, state.m, "adam_step");
  AdamResult r{params, state};
  r.state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(r.state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(r.state.t));
  for (auto& [name, p] : r.params) {
    const Tensor& gt = g.at(name);
    Tensor& m = r.state.m.at(name);
    Tensor& v = r.state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gt[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gt[i] * gt[i];
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p.check_finite("adam_step");
  }
  return r;
}

// --- training ------------------------------------------------------------------

struct TrainLogRow {
  std::uint64_t step = 0;
  double outer_loss = 0.0;
  double query_acc_mean = 0.0;
  double query_acc_std = 0.0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::vector<std::uint64_t> checkpoint_steps;
  ParamSet final_params;
};

inline std::uint64_t config_fingerprint(const NetConfig& net, const MamlConfig& maml, const std::string& source,
                                        std::uint64_t seed) {
  std::ostringstream os;
  os << "net " << net.image_size << ' ' << net.in_channels << ' ' << net.filters << ' ' << net.n_way << ' '
     << net.use_batch_norm << ' ' << net.max_pool << ' ' << fmt_double(net.bn_eps) << " maml "
     << fmt_double(maml.inner_lr) << ' ' << maml.inner_steps << ' ' << fmt_double(maml.meta_lr) << ' '
     << maml.meta_batch << ' ' << to_string(maml.order) << ' ' << maml.total_steps << ' '
     << maml.checkpoint_every << ' ' << maml.adapt_norm_params << " source " << source << " seed " << seed;
  return fnv1a64(os.str());
}

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  // Identical samples have no spread; skip the rounding residue of the mean.
  if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; })) return 0.0;
  const double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "step,outer_loss,query_acc_mean,query_acc_std\n";
  for (const auto& r : rows)
    out << r.step << ',' << fmt_double(r.outer_loss) << ',' << fmt_double(r.query_acc_mean) << ','
        << fmt_double(r.query_acc_std) << '\n';
}

using ProgressFn = std::function<void(const TrainLogRow&)>;

// Meta-training loop: sample meta_batch episodes, meta_grad, Adam. Writes
// the step-0 initialization and every checkpoint_every steps.
inline TrainResult train(const NetConfig& net, const MamlConfig& cfg, const TaskSource& source,
                         std::uint64_t seed, const std::filesystem::path& out_dir,
                         const ProgressFn& progress = {}) {
  net.validate();
  cfg.validate();
  if (source.n_way() != net.n_way) throw ConfigError("task n_way does not match model n_way");
  std::filesystem::create_directories(out_dir);
  const std::uint64_t fp = config_fingerprint(net, cfg, source.describe(), seed);
  TrainResult r;
  ParamSet theta = init_params(net, seed);
  AdamState adam = AdamState::for_params(theta);
  auto save = [&](std::uint64_t step) {
    write_checkpoint(checkpoint_path(out_dir, step), Checkpoint{step, theta, fp});
    r.checkpoint_steps.push_back(step);
  };
  save(0);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    std::vector<Episode> episodes(cfg.meta_batch);
    for (std::size_t i = 0; i < cfg.meta_batch; ++i) episodes[i] = source.task(train_task_index(step, i, cfg.meta_batch));
    std::vector<EpisodeTask> tasks;
    for (const Episode& e : episodes) tasks.push_back({&net, &e});
    MetaGradResult mg;
    try {
      mg = meta_grad(theta, tasks, cfg);
      auto updated = adam_step(adam, theta, mg.grad, cfg.meta_lr);
      theta = std::move(updated.params);
      adam = std::move(updated.state);
    } catch (const NumericFault& e) {
      throw NumericFault("meta-training step " + std::to_string(step + 1) + ": " + e.what());
    }
    const std::uint64_t done = step + 1;
    if (done % cfg.log_every == 0 || done == cfg.total_steps) {
      TrainLogRow row{done, mg.outer_loss, mean_of(mg.query_accuracy), std_of(mg.query_accuracy)};
      r.log.push_back(row);
      if (progress) progress(row);
    }
    if (done % cfg.checkpoint_every == 0) save(done);
  }
  write_train_log(out_dir / "train_log.csv", r.log);
  r.final_params = std::move(theta);
  return r;
}

// --- supervised baseline ---------------------------------------------------------

struct SupervisedConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 100;
  double lr = 0.001;
  std::vector<std::uint64_t> checkpoint_steps = {0, 1, 2, 5, 10, 20, 50, 100, 200};
  std::size_t log_every = 10;

  void validate() const {
    if (steps < 1 || batch_size < 2) throw ConfigError("supervised.steps >= 1 and batch_size >= 2 required");
    if (!(lr > 0.0)) throw ConfigError("supervised.lr must be > 0");
    for (auto s : checkpoint_steps)
      if (s > steps) throw ConfigError("supervised checkpoint step " + std::to_string(s) + " exceeds steps");
  }
};

struct SupervisedLogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct SupervisedResult {
  std::vector<SupervisedLogRow> log;
  std::vector<std::uint64_t> checkpoint_steps;
  ParamSet final_params;
};

// Rows [first, first + n) of an N x ... tensor.
inline Tensor slice_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  Shape s = x.shape();
  const std::size_t stride = x.size() / s[0];
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
  return out;
}

// Plain single-level Adam training of the same network.
inline SupervisedResult supervised_train(const NetConfig& net, const LabeledImages& data,
                                         const SupervisedConfig& cfg, std::uint64_t seed,
                                         const std::filesystem::path& out_dir) {
  net.validate();
  cfg.validate();
  const std::size_t n = data.y.size();
  if (n < cfg.batch_size) throw ConfigError("dataset smaller than batch size");
  std::filesystem::create_directories(out_dir);
  std::ostringstream desc;
  desc << "supervised " << cfg.steps << ' ' << cfg.batch_size << ' ' << fmt_double(cfg.lr) << " n=" << n;
  const std::uint64_t fp = config_fingerprint(net, MamlConfig{}, desc.str(), seed);
  SupervisedResult r;
  ParamSet theta = init_params(net, seed);
  AdamState adam = AdamState::for_params(theta);
  const auto wants_checkpoint = [&](std::uint64_t s) {
    return std::find(cfg.checkpoint_steps.begin(), cfg.checkpoint_steps.end(), s) != cfg.checkpoint_steps.end();
  };
  auto save = [&](std::uint64_t step) {
    write_checkpoint(checkpoint_path(out_dir, step), Checkpoint{step, theta, fp});
    r.checkpoint_steps.push_back(step);
  };
  if (wants_checkpoint(0)) save(0);
  std::vector<std::size_t> order(n);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed({seed, step, 0xba7cULL}));
    // partial Fisher-Yates: first batch_size entries are a uniform sample
    for (std::size_t i = 0; i < cfg.batch_size; ++i) std::swap(order[i], order[i + rng.index(n - i)]);
    std::vector<std::size_t> rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.batch_size));
    Tensor x = slice_rows(data.x, rows);
    std::vector<int> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) y[i] = data.y[rows[i]];
    VarMap th = as_params(theta);
    Var logits = forward(th, Var::constant(x), net).logits;
    Var loss = softmax_cross_entropy(logits, y);
    auto updated = adam_step(adam, theta, values(grad(loss, th)), cfg.lr);
    theta = std::move(updated.params);
    adam = std::move(updated.state);
    const std::uint64_t done = step + 1;
    if (done % cfg.log_every == 0 || done == cfg.steps || done == 1)
      r.log.push_back({done, loss.value().item(), accuracy(logits.value(), y)});
    if (wants_checkpoint(done)) save(done);
  }
  std::ofstream out(out_dir / "train_log.csv", std::ios::binary);
  out << "step,loss,accuracy\n";
  for (const auto& row : r.log) out << row.step << ',' << fmt_double(row.loss) << ',' << fmt_double(row.accuracy) << '\n';
  r.final_params = std::move(theta);
  return r;
}

}  // namespace metarep
