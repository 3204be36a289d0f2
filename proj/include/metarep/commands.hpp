#pragma once

// Command bodies behind the `metarep` executable. Each takes a resolved
// RunConfig, writes its outputs, prints plain log lines to `out`, and
// returns the process exit code: 0 success, 1 configuration error, 2 runtime
// or numeric failure.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "metarep/config.hpp"
#include "metarep/experiments.hpp"
#include "metarep/gradcheck.hpp"
#include "metarep/maml.hpp"
#include "metarep/tasks.hpp"
#include "metarep/util.hpp"

namespace metarep {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

inline const std::vector<std::string>& analyze_pipelines() {
  static const std::vector<std::string> names = {"to-init", "drift", "baseline", "trace", "accuracy"};
  return names;
}

// Runs `body`, mapping exceptions to exit codes.
inline int guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline std::size_t resolve_threads(const RunConfig& cfg) { return cfg.threads ? cfg.threads : default_threads(); }

inline std::uint64_t run_fingerprint(const RunConfig& cfg, const TaskSource& source) {
  return config_fingerprint(cfg.model, cfg.maml, source.describe(), cfg.seed);
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out = std::cout) {
  auto source = make_task_source(cfg);
  MamlConfig maml = cfg.maml;
  maml.threads = resolve_threads(cfg);
  out << "train: " << source->describe() << ", order=" << to_string(maml.order) << ", steps=" << maml.total_steps
      << ", out=" << cfg.out_dir.string() << '\n';
  const TrainResult r = train(cfg.model, maml, *source, cfg.seed, cfg.out_dir, [&](const TrainLogRow& row) {
    out << "step " << row.step << " outer_loss " << fmt_double(row.outer_loss) << " query_acc "
        << fmt_double(row.query_acc_mean) << '\n';
  });
  const TrainLogRow last = r.log.empty() ? TrainLogRow{} : r.log.back();
  out << "done: steps=" << maml.total_steps << " final_outer_loss=" << fmt_double(last.outer_loss)
      << " final_query_acc=" << fmt_double(last.query_acc_mean) << " checkpoints=" << r.checkpoint_steps.size()
      << " dir=" << cfg.out_dir.string() << '\n';
  return kExitOk;
}

inline LabeledImages load_mnist_split(const std::filesystem::path& images, const std::filesystem::path& labels) {
  for (const auto& p : {images, labels})
    if (!std::filesystem::exists(p)) throw ConfigError("missing data file '" + p.string() + "'");
  return load_mnist_idx(images, labels);
}

// The supervised baseline network: same architecture, one output per class.
inline NetConfig supervised_net(const RunConfig& cfg, const LabeledImages& data) {
  NetConfig net = cfg.model;
  net.in_channels = data.x.shape()[1];
  net.image_size = data.x.shape()[2];
  int max_label = 0;
  for (int y : data.y) max_label = std::max(max_label, y);
  net.n_way = static_cast<std::size_t>(max_label) + 1;
  net.validate();
  return net;
}

inline int cmd_train_supervised(const RunConfig& cfg, std::ostream& out = std::cout) {
  const LabeledImages train_set = load_mnist_split(cfg.data.mnist_train_images, cfg.data.mnist_train_labels);
  const NetConfig net = supervised_net(cfg, train_set);
  out << "train-supervised: " << train_set.y.size() << " images, " << net.n_way << " classes, steps="
      << cfg.supervised.steps << ", batch=" << cfg.supervised.batch_size << ", out=" << cfg.supervised_out_dir.string()
      << '\n';
  const SupervisedResult r = supervised_train(net, train_set, cfg.supervised, cfg.seed, cfg.supervised_out_dir);
  const SupervisedLogRow last = r.log.empty() ? SupervisedLogRow{} : r.log.back();
  out << "done: steps=" << cfg.supervised.steps << " final_loss=" << fmt_double(last.loss)
      << " final_batch_acc=" << fmt_double(last.accuracy) << " checkpoints=" << r.checkpoint_steps.size()
      << " dir=" << cfg.supervised_out_dir.string() << '\n';
  return kExitOk;
}

inline int cmd_analyze(const RunConfig& cfg, const std::string& pipeline, std::optional<std::uint64_t> delta = {},
                       std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  const auto& names = analyze_pipelines();
  if (std::find(names.begin(), names.end(), pipeline) == names.end())
    throw ConfigError("unknown analysis '" + pipeline + "' (expected to-init, drift, baseline, trace or accuracy)");
  ExperimentSpec spec = cfg.experiment;
  spec.threads = resolve_threads(cfg);
  std::filesystem::create_directories(spec.out_dir);

  if (pipeline == "baseline") {
    const LabeledImages test_set = load_mnist_split(cfg.data.mnist_test_images, cfg.data.mnist_test_labels);
    const NetConfig net = supervised_net(cfg, test_set);
    spec.checkpoint_dir = cfg.supervised_out_dir;
    const CheckpointSeries series = load_series(spec.checkpoint_dir, net);
    const Probe probe = dataset_probe(test_set, spec.probe_seed, spec.probe_size);
    const auto path = spec.out_dir / "supervised_baseline.csv";
    write_baseline(path, provenance("supervised_baseline", spec, series.config_fingerprint, probe.fingerprint),
                   exp_supervised_baseline(spec, net, series, probe));
    out << path.string() << '\n';
    return kExitOk;
  }

  auto source = make_task_source(cfg);
  const CheckpointSeries series = load_series(spec.checkpoint_dir, cfg.model);
  if (series.config_fingerprint != run_fingerprint(cfg, *source))
    err << "warning: checkpoints in '" << spec.checkpoint_dir.string()
        << "' were written with a different configuration (fingerprint " << hex64(series.config_fingerprint) << ")\n";
  const ExperimentContext ctx{cfg.model, cfg.maml, source.get()};
  const Probe probe = make_probe(*source, spec);
  const auto prov = [&](const std::string& name, const std::string& extra = "") {
    return provenance(name, spec, series.config_fingerprint, probe.fingerprint, extra);
  };

  if (pipeline == "to-init") {
    const auto path = spec.out_dir / "dissim_to_init.csv";
    write_dissim_to_init(path,
                         prov("dissim_to_init", "n_tasks=" + std::to_string(spec.n_tasks) +
                                                    " finetune_steps=" + std::to_string(spec.finetune_steps)),
                         exp_dissim_to_init(spec, ctx, series, probe));
    out << path.string() << '\n';
  } else if (pipeline == "drift") {
    const std::uint64_t d = delta.value_or(checkpoint_spacing(series.periodic_steps()));
    const auto path = spec.out_dir / ("training_drift_delta" + std::to_string(d) + ".csv");
    write_drift(path, prov("training_drift", "delta=" + std::to_string(d)),
                exp_training_drift(spec, ctx, series, probe, d));
    out << path.string() << '\n';
  } else if (pipeline == "trace") {
    const TraceResult r = exp_finetune_trace(spec, ctx, series, probe);
    for (const auto& p : write_trace(spec.out_dir, prov("finetune_trace"), r)) out << p.string() << '\n';
  } else {
    const auto path = spec.out_dir / "accuracy_curve.csv";
    write_accuracy(path,
                   prov("accuracy_curve", "finetune_steps=" + std::to_string(spec.finetune_steps) +
                                              " accuracy_tasks=" + std::to_string(spec.accuracy_tasks)),
                   exp_accuracy_curve(spec, ctx, series));
    out << path.string() << '\n';
  }
  return kExitOk;
}

inline int cmd_gradcheck(const RunConfig& cfg, bool corrupt_inner_lr_sign = false, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  GradcheckOptions o;
  o.seed = cfg.seed;
  o.inner_lr = cfg.maml.inner_lr;
  o.corrupt_inner_lr_sign = corrupt_inner_lr_sign;
  bool ok = true;
  for (const CheckResult& r : run_gradcheck(o)) {
    out << (r.pass ? "ok    " : "FAIL  ") << r.name << ": max_rel_err=" << fmt_double(r.error)
        << " tol=" << fmt_double(r.tolerance);
    if (!r.detail.empty()) out << " (" << r.detail << ')';
    out << '\n';
    if (!r.pass) {
      err << "gradcheck: '" << r.name << "' exceeds tolerance\n";
      ok = false;
    }
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace metarep
