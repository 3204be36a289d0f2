#pragma once

// Finite-difference checks of the differentiation stack: single operations,
// full-network gradients, exact second-order meta-gradients, and the toy
// bilevel quadratic whose meta-gradients have closed forms.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metarep/autodiff.hpp"
#include "metarep/maml.hpp"
#include "metarep/model.hpp"
#include "metarep/params.hpp"
#include "metarep/random.hpp"
#include "metarep/tasks.hpp"

namespace metarep {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t networks = 20;  // seeded tiny nets for the full-gradient check
  std::size_t filters = 4;
  std::size_t image_size = 12;
  std::size_t meta_batches = 2;  // fixed 2-episode batches for the meta check
  std::size_t meta_inner_steps = 2;
  double inner_lr = 0.1;
  // Init weights are ~0.02 and batch norm rescales by 1/sigma, so the loss
  // is strongly curved in the weights and ReLU inputs sit close to their
  // kink; larger steps show truncation error or step across the kink.
  // Round-off at this step is ~1e-9 relative.
  double fd_step = 1e-7;
  // Single operations on O(1) random inputs are smooth at this scale.
  double op_fd_step = 1e-5;
  double op_tol = 1e-6;
  double grad_tol = 1e-5;
  double meta_tol = 1e-4;
  double toy_tol = 1e-12;
  // Test hook: meta_grad sees a negated inner learning rate while the
  // finite-difference reference keeps the correct one.
  bool corrupt_inner_lr_sign = false;
};

struct CheckResult {
  std::string name;
  double error = 0.0;  // max relative error (or |value - expected| for closed forms)
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// d/dx of sum(op(x...) * r) for a fixed random r, against central
// differences.
inline CheckResult check_op(const std::string& name, const ParamSet& inputs,
                            const std::function<Var(const VarMap&)>& op, const GradcheckOptions& o, Rng& rng) {
  // Inputs stay differentiable in the reference evaluations too: ops that
  // take a gradient internally need a recorded graph to do so.
  const Var weights = Var::constant(random_tensor(rng, op(as_params(inputs)).shape()));
  const auto loss = [&](const VarMap& p) { return sum(mul(op(p), weights)); };
  VarMap p = as_params(inputs);
  const ParamSet analytic = values(grad(loss(p), p));
  const ParamSet numeric =
      finite_diff_grad([&](const ParamSet& at) { return loss(as_params(at)).value().item(); }, inputs, o.op_fd_step);
  const double err = max_relative_error(analytic, numeric);
  return {"op " + name, err, o.op_tol, err < o.op_tol, ""};
}

inline Episode tiny_episode(const NetConfig& net, std::uint64_t seed, std::uint64_t index, std::size_t k_shot) {
  SynthConfig sc;
  sc.n_way = net.n_way;
  sc.k_shot = k_shot;
  sc.n_query = 2;
  sc.image_size = net.image_size;
  sc.seed = seed;
  return synth_episode(sc, eval_task_index(index));
}

}  // namespace detail

inline NetConfig tiny_net(const GradcheckOptions& o) {
  NetConfig net;
  net.filters = o.filters;
  net.image_size = o.image_size;
  net.n_way = 5;
  return net;
}

// Gradients of single operations (and their gradients: each check is also
// run through a first-order backward to exercise double backward).
inline std::vector<CheckResult> check_operations(const GradcheckOptions& o) {
  Rng rng(derive_seed({o.seed, 0x0b5ULL}));
  std::vector<CheckResult> out;
  const auto in = [&](std::initializer_list<std::pair<const char*, Shape>> specs, double lo = -1.0, double hi = 1.0) {
    ParamSet p;
    for (const auto& [n, s] : specs) p.emplace(n, detail::random_tensor(rng, s, lo, hi));
    return p;
  };
  out.push_back(detail::check_op("mul", in({{"a", {3, 4}}, {"b", {3, 4}}}),
                                 [](const VarMap& p) { return mul(p.at("a"), p.at("b")); }, o, rng));
  out.push_back(detail::check_op("exp", in({{"a", {5}}}), [](const VarMap& p) { return exp(p.at("a")); }, o, rng));
  out.push_back(detail::check_op("powc", in({{"a", {5}}}, 0.5, 2.0),
                                 [](const VarMap& p) { return powc(p.at("a"), -0.5); }, o, rng));
  out.push_back(detail::check_op("matmul", in({{"a", {3, 4}}, {"b", {4, 2}}}),
                                 [](const VarMap& p) { return matmul(p.at("a"), p.at("b")); }, o, rng));
  out.push_back(detail::check_op("conv2d stride 1", in({{"x", {2, 2, 5, 5}}, {"w", {3, 2, 3, 3}}}),
                                 [](const VarMap& p) { return conv2d(p.at("x"), p.at("w"), 1); }, o, rng));
  out.push_back(detail::check_op("conv2d stride 2", in({{"x", {2, 2, 6, 5}}, {"w", {3, 2, 3, 3}}}),
                                 [](const VarMap& p) { return conv2d(p.at("x"), p.at("w"), 2); }, o, rng));
  out.push_back(detail::check_op("log_softmax", in({{"a", {3, 5}}}),
                                 [](const VarMap& p) { return log_softmax(p.at("a")); }, o, rng));
  out.push_back(detail::check_op("batch_norm", in({{"x", {3, 2, 3, 3}}, {"g", {2}}, {"b", {2}}}),
                                 [](const VarMap& p) { return batch_norm_train(p.at("x"), p.at("g"), p.at("b"), 1e-3); },
                                 o, rng));
  out.push_back(detail::check_op("max_pool2x2", in({{"x", {2, 2, 5, 5}}}),
                                 [](const VarMap& p) { return max_pool2x2(p.at("x")); }, o, rng));
  // Second order: differentiate a recorded gradient.
  out.push_back(detail::check_op(
      "double backward conv2d", in({{"x", {2, 2, 5, 5}}, {"w", {3, 2, 3, 3}}}),
      [](const VarMap& p) {
        Var y = conv2d(p.at("x"), p.at("w"), 2);
        Var l = sum(mul(mul(y, y), y));
        return grad(l, std::vector<Var>{p.at("w")}, true)[0];
      },
      o, rng));
  out.push_back(detail::check_op(
      "double backward batch_norm", in({{"x", {3, 2, 2, 2}}, {"g", {2}}, {"b", {2}}}),
      [](const VarMap& p) {
        Var y = batch_norm_train(p.at("x"), p.at("g"), p.at("b"), 1e-3);
        Var l = sum(mul(y, exp(scale(y, 0.3))));
        return grad(l, std::vector<Var>{p.at("x")}, true)[0];
      },
      o, rng));
  return out;
}

// Full classification-loss gradient on `networks` seeded tiny ConvNets.
inline CheckResult check_network_gradients(const GradcheckOptions& o) {
  const NetConfig net = tiny_net(o);
  double worst = 0.0;
  for (std::size_t i = 0; i < o.networks; ++i) {
    const std::uint64_t s = derive_seed({o.seed, i, 0x9e7ULL});
    const ParamSet theta = init_params(net, s);
    const Episode e = detail::tiny_episode(net, s, 0, 1);
    VarMap p = as_params(theta);
    const ParamSet analytic = values(grad(classification_loss(p, e.query_x, e.query_y, net), p));
    const ParamSet numeric = finite_diff_grad(
        [&](const ParamSet& at) {
          NoRecordGuard nr;
          return classification_loss(as_constants(at), e.query_x, e.query_y, net).value().item();
        },
        theta, o.fd_step);
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  return {"network grad (" + std::to_string(o.networks) + " nets)", worst, o.grad_tol, worst < o.grad_tol, ""};
}

// Second-order meta-gradient against finite differences of outer_loss on
// fixed 2-episode batches (k_shot 2).
inline CheckResult check_meta_gradient(const GradcheckOptions& o) {
  const NetConfig net = tiny_net(o);
  MamlConfig reference;
  reference.inner_lr = o.inner_lr;
  reference.inner_steps = o.meta_inner_steps;
  reference.order = MetaOrder::second;
  MamlConfig tested = reference;
  if (o.corrupt_inner_lr_sign) tested.inner_lr = -tested.inner_lr;
  double worst = 0.0;
  for (std::size_t b = 0; b < o.meta_batches; ++b) {
    const std::uint64_t s = derive_seed({o.seed, b, 0x3e7aULL});
    const ParamSet theta = init_params(net, s);
    std::vector<Episode> eps = {detail::tiny_episode(net, s, 0, 2), detail::tiny_episode(net, s, 1, 2)};
    std::vector<EpisodeTask> tasks = {{&net, &eps[0]}, {&net, &eps[1]}};
    const ParamSet analytic = meta_grad(theta, tasks, tested).grad;
    const ParamSet numeric = finite_diff_grad(
        [&](const ParamSet& at) { return outer_loss(as_params(at), tasks, reference).value().item(); }, theta,
        o.fd_step);
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  return {"meta grad second order (" + std::to_string(o.meta_batches) + " batches, k=2)", worst, o.meta_tol,
          worst < o.meta_tol, ""};
}

// Toy quadratic, theta = 1, target = 0, one inner step with lr 0.1:
// second order (1 - a)^2 = 0.81, first order 1 - a = 0.9.
inline std::vector<CheckResult> check_toy_bilevel(const GradcheckOptions& o) {
  std::vector<CheckResult> out;
  const ParamSet theta = {{"theta", Tensor::scalar(1.0)}};
  const std::vector<ToyQuadraticTask> tasks = {{0.0}};
  for (auto [order, expected] : {std::pair{MetaOrder::second, 0.81}, std::pair{MetaOrder::first, 0.9}}) {
    MamlConfig cfg;
    cfg.inner_lr = o.corrupt_inner_lr_sign ? -0.1 : 0.1;
    cfg.inner_steps = 1;
    cfg.order = order;
    const double got = meta_grad(theta, tasks, cfg).grad.at("theta").item();
    const double err = std::abs(got - expected);
    out.push_back({"toy bilevel " + to_string(order) + " order", err, o.toy_tol, err <= o.toy_tol,
                   "value " + fmt_double(got) + " expected " + fmt_double(expected)});
  }
  return out;
}

inline std::vector<CheckResult> run_gradcheck(const GradcheckOptions& o) {
  std::vector<CheckResult> all = check_operations(o);
  all.push_back(check_network_gradients(o));
  all.push_back(check_meta_gradient(o));
  for (auto& r : check_toy_bilevel(o)) all.push_back(std::move(r));
  return all;
}

}  // namespace metarep
