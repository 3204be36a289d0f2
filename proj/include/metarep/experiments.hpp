#pragma once

// Analysis pipelines over a directory of checkpoints.
//
// Every pipeline evaluates representations on one fixed probe set (the query
// inputs of a held-out task), so RDMs from different checkpoints, tasks and
// inner steps are comparable. Each CSV starts with a provenance comment that
// carries the checkpoints' config fingerprint and the probe fingerprint.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metarep/checkpoint.hpp"
#include "metarep/maml.hpp"
#include "metarep/mds.hpp"
#include "metarep/model.hpp"
#include "metarep/repsim.hpp"
#include "metarep/tasks.hpp"
#include "metarep/util.hpp"

namespace metarep {

enum class CompareMode { pre_finetune, post_finetune };

inline std::string to_string(CompareMode m) {
  return m == CompareMode::pre_finetune ? "pre_finetune" : "post_finetune";
}

inline CompareMode parse_compare_mode(const std::string& s) {
  if (s == "pre_finetune" || s == "pre") return CompareMode::pre_finetune;
  if (s == "post_finetune" || s == "post") return CompareMode::post_finetune;
  throw ConfigError("unknown comparison mode '" + s + "' (expected pre_finetune or post_finetune)");
}

inline RdmMetric parse_rdm_metric(const std::string& s) {
  if (s == "euclidean") return RdmMetric::euclidean;
  if (s == "correlation") return RdmMetric::correlation;
  throw ConfigError("unknown RDM metric '" + s + "' (expected euclidean or correlation)");
}

struct ExperimentSpec {
  std::filesystem::path checkpoint_dir = "runs/maml";
  std::filesystem::path out_dir = "runs/analysis";
  std::uint64_t probe_seed = 0;
  // Probe inputs: n_way * (probe_size / n_way) query images of the probe task.
  std::size_t probe_size = 50;
  std::vector<std::string> layers = {"conv1", "conv2", "conv3", "conv4", "head"};
  std::vector<std::size_t> inner_marks = {0, 1, 5, 10};
  std::size_t max_inner_steps = 10;
  // Tasks sampled per checkpoint in exp_dissim_to_init.
  std::size_t n_tasks = 50;
  std::vector<CompareMode> modes = {CompareMode::pre_finetune, CompareMode::post_finetune};
  // Inner steps for post_finetune and for exp_accuracy_curve.
  std::size_t finetune_steps = 5;
  std::size_t trace_checkpoints = 5;
  std::size_t fixed_tasks = 4;
  std::size_t accuracy_tasks = 100;
  RdmMetric metric = RdmMetric::euclidean;
  std::size_t threads = 1;

  void validate() const {
    if (layers.empty()) throw ConfigError("experiment.layers must not be empty");
    for (const auto& l : layers)
      if (!is_layer_name(l)) throw ConfigError("experiment.layers: unknown layer '" + l + "'");
    if (inner_marks.empty() || inner_marks.front() != 0)
      throw ConfigError("experiment.inner_marks must start with 0");
    for (std::size_t i = 1; i < inner_marks.size(); ++i)
      if (inner_marks[i] <= inner_marks[i - 1])
        throw ConfigError("experiment.inner_marks must be strictly ascending");
    if (inner_marks.back() > max_inner_steps)
      throw ConfigError("experiment.inner_marks: mark " + std::to_string(inner_marks.back()) +
                        " exceeds max_inner_steps " + std::to_string(max_inner_steps));
    if (n_tasks < 1) throw ConfigError("experiment.n_tasks must be >= 1");
    if (modes.empty()) throw ConfigError("experiment.modes must not be empty");
    if (finetune_steps < 1) throw ConfigError("experiment.finetune_steps must be >= 1");
    if (trace_checkpoints < 1) throw ConfigError("experiment.trace_checkpoints must be >= 1");
    if (fixed_tasks < 1) throw ConfigError("experiment.fixed_tasks must be >= 1");
    if (accuracy_tasks < 1) throw ConfigError("experiment.accuracy_tasks must be >= 1");
    if (probe_size < 3) throw ConfigError("experiment.probe_size must be >= 3");
  }
};

// What the pipelines need besides the checkpoints: the architecture, the
// inner-loop settings used for adaptation, and where tasks come from.
struct ExperimentContext {
  NetConfig net;
  MamlConfig maml;
  const TaskSource* source = nullptr;
};

// --- checkpoint series -----------------------------------------------------------

struct CheckpointSeries {
  std::vector<Checkpoint> items;  // ascending step
  std::uint64_t config_fingerprint = 0;

  const Checkpoint& at_step(std::uint64_t step) const {
    for (const auto& c : items)
      if (c.step == step) return c;
    throw Error("no checkpoint for step " + std::to_string(step));
  }
  bool has_step(std::uint64_t step) const {
    return std::any_of(items.begin(), items.end(), [&](const Checkpoint& c) { return c.step == step; });
  }
  // Periodic checkpoints, i.e. everything after the step-0 initialization.
  std::vector<std::uint64_t> periodic_steps() const {
    std::vector<std::uint64_t> s;
    for (const auto& c : items)
      if (c.step > 0) s.push_back(c.step);
    return s;
  }
};

// Reads every checkpoint in `dir`, checks they come from one run and fit the
// network.
inline CheckpointSeries load_series(const std::filesystem::path& dir, const NetConfig& net) {
  if (!std::filesystem::is_directory(dir))
    throw ConfigError("checkpoint directory '" + dir.string() + "' does not exist");
  const auto steps = list_checkpoints(dir);
  if (steps.empty())
    throw ConfigError("no checkpoints in '" + dir.string() + "' (expected files like " +
                      checkpoint_path(dir, 0).filename().string() + ")");
  CheckpointSeries s;
  for (auto step : steps) {
    Checkpoint c = read_checkpoint(checkpoint_path(dir, step));
    require_compatible(c.params, net);
    if (s.items.empty())
      s.config_fingerprint = c.config_fingerprint;
    else if (c.config_fingerprint != s.config_fingerprint)
      throw FormatError("checkpoint " + checkpoint_path(dir, step).string() +
                        " belongs to a different run (config fingerprint " + hex64(c.config_fingerprint) +
                        " vs " + hex64(s.config_fingerprint) + ")");
    s.items.push_back(std::move(c));
  }
  return s;
}

inline std::uint64_t checkpoint_spacing(const std::vector<std::uint64_t>& periodic) {
  if (periodic.empty()) throw ConfigError("no periodic checkpoints (only the step-0 initialization)");
  const std::uint64_t spacing = periodic.front();
  for (std::size_t i = 0; i < periodic.size(); ++i)
    if (periodic[i] != spacing * (i + 1))
      throw FormatError("checkpoints are not evenly spaced (step " + std::to_string(periodic[i]) +
                        " breaks spacing " + std::to_string(spacing) + ")");
  return spacing;
}

// --- probe and representations -----------------------------------------------------

struct Probe {
  Tensor x;
  std::uint64_t fingerprint = 0;
};

inline Probe make_probe(const TaskSource& source, const ExperimentSpec& spec) {
  Episode e = probe_task(source, spec.probe_seed, spec.probe_size);
  return {e.query_x, fingerprint(e.query_x)};
}

inline Probe make_probe(Tensor x) {
  const std::uint64_t fp = fingerprint(x);
  return {std::move(x), fp};
}

inline std::size_t layer_index(const std::string& layer) {
  for (std::size_t i = 0; i < kLayerNames.size(); ++i)
    if (kLayerNames[i] == layer) return i;
  throw ConfigError("unknown layer '" + layer + "'");
}

// RDM per requested layer (same order as spec.layers).
inline std::vector<Rdm> layer_rdms(const ParamSet& params, const Probe& probe, const NetConfig& net,
                                   const ExperimentSpec& spec) {
  const auto reps = representations(params, probe.x, net);
  std::vector<Rdm> out;
  out.reserve(spec.layers.size());
  for (const auto& l : spec.layers) out.push_back(make_rdm(reps[layer_index(l)], spec.metric));
  return out;
}

inline std::string provenance(const std::string& pipeline, const ExperimentSpec& spec, std::uint64_t config_fp,
                              std::uint64_t probe_fp, const std::string& extra = "") {
  std::ostringstream os;
  os << "metarep " << pipeline << " config=" << hex64(config_fp) << " probe=" << hex64(probe_fp)
     << " probe_seed=" << spec.probe_seed << " metric=" << to_string(spec.metric);
  if (!extra.empty()) os << ' ' << extra;
  return os.str();
}

// Task-adapted parameters after each of 1..steps inner steps. Values only:
// the adaptation is not differentiated further.
inline std::vector<ParamSet> adaptation_trajectory(const ParamSet& theta, const Episode& episode,
                                                   const ExperimentContext& ctx, std::size_t steps) {
  EpisodeTask task{&ctx.net, &episode};
  return inner_adapt(as_params(theta), task, ctx.maml.inner_lr, steps, false, inner_filter(ctx.maml), true)
      .trajectory;
}

inline std::uint64_t analysis_task_index(std::size_t j) { return eval_task_index(j); }

// --- exp_dissim_to_init ---------------------------------------------------------------

struct DissimToInitRow {
  std::uint64_t step;
  std::string layer;
  CompareMode mode;
  double mean, std;
  std::size_t n_tasks;
};

// RSA dissimilarity of each checkpoint's representation (at theta_t, or at
// phi after finetune_steps adaptation steps) to the step-0 representation.
inline std::vector<DissimToInitRow> exp_dissim_to_init(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                                       const CheckpointSeries& series, const Probe& probe) {
  spec.validate();
  if (!series.has_step(0))
    throw ConfigError("exp_dissim_to_init: missing step-0 checkpoint " +
                      checkpoint_path(spec.checkpoint_dir, 0).string());
  const auto base = layer_rdms(series.at_step(0).params, probe, ctx.net, spec);
  const std::size_t nl = spec.layers.size();
  std::vector<Episode> tasks;
  const bool need_tasks = std::find(spec.modes.begin(), spec.modes.end(), CompareMode::post_finetune) != spec.modes.end();
  if (need_tasks) {
    if (!ctx.source) throw ConfigError("exp_dissim_to_init: post_finetune needs a task source");
    for (std::size_t j = 0; j < spec.n_tasks; ++j) tasks.push_back(ctx.source->task(analysis_task_index(j)));
  }
  std::vector<DissimToInitRow> rows;
  for (const auto& ck : series.items) {
    for (CompareMode mode : spec.modes) {
      // per task, per layer
      std::vector<std::vector<double>> d(spec.n_tasks, std::vector<double>(nl));
      if (mode == CompareMode::pre_finetune) {
        // theta_t does not depend on the task: every task sees the same value.
        const auto rdms = layer_rdms(ck.params, probe, ctx.net, spec);
        for (std::size_t l = 0; l < nl; ++l) {
          const double v = rsa_dissimilarity(rdms[l], base[l], spec.layers[l] + "@" + std::to_string(ck.step),
                                             spec.layers[l] + "@0");
          for (auto& per_task : d) per_task[l] = v;
        }
      } else {
        parallel_for(spec.n_tasks, spec.threads, [&](std::size_t j) {
          const auto traj = adaptation_trajectory(ck.params, tasks[j], ctx, spec.finetune_steps);
          const auto rdms = layer_rdms(traj.back(), probe, ctx.net, spec);
          for (std::size_t l = 0; l < nl; ++l) d[j][l] = rsa_dissimilarity(rdms[l], base[l]);
        });
      }
      for (std::size_t l = 0; l < nl; ++l) {
        std::vector<double> col(spec.n_tasks);
        for (std::size_t j = 0; j < spec.n_tasks; ++j) col[j] = d[j][l];
        rows.push_back({ck.step, spec.layers[l], mode, mean_of(col), std_of(col), spec.n_tasks});
      }
    }
  }
  return rows;
}

inline void write_dissim_to_init(const std::filesystem::path& path, const std::string& prov,
                                 const std::vector<DissimToInitRow>& rows) {
  CsvWriter csv(path.string(), prov, "step,layer,mode,dissim_mean,dissim_std,n_tasks");
  for (const auto& r : rows)
    csv.row({std::to_string(r.step), r.layer, to_string(r.mode), fmt_double(r.mean), fmt_double(r.std),
             std::to_string(r.n_tasks)});
}

// --- exp_training_drift ---------------------------------------------------------------

struct DriftRow {
  std::uint64_t step;
  std::string layer;
  double dissim;
};

// RSA dissimilarity between theta_{t - delta} and theta_t over the periodic
// checkpoints. delta must be a multiple of the checkpoint spacing; 0 pairs
// each checkpoint with itself.
inline std::vector<DriftRow> exp_training_drift(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                                const CheckpointSeries& series, const Probe& probe,
                                                std::uint64_t delta) {
  spec.validate();
  const auto periodic = series.periodic_steps();
  const std::uint64_t spacing = checkpoint_spacing(periodic);
  if (delta % spacing != 0)
    throw ConfigError("drift delta " + std::to_string(delta) + " is not a multiple of the checkpoint spacing " +
                      std::to_string(spacing));
  std::map<std::uint64_t, std::vector<Rdm>> rdms;
  for (auto s : periodic) rdms.emplace(s, layer_rdms(series.at_step(s).params, probe, ctx.net, spec));
  std::vector<DriftRow> rows;
  for (auto t : periodic) {
    if (t < delta || !rdms.count(t - delta)) continue;
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      rows.push_back({t, spec.layers[l], rsa_dissimilarity(rdms.at(t - delta)[l], rdms.at(t)[l])});
  }
  return rows;
}

inline void write_drift(const std::filesystem::path& path, const std::string& prov, const std::vector<DriftRow>& rows) {
  CsvWriter csv(path.string(), prov, "step,layer,dissim");
  for (const auto& r : rows) csv.row({std::to_string(r.step), r.layer, fmt_double(r.dissim)});
}

// --- exp_supervised_baseline ------------------------------------------------------------

struct BaselineRow {
  std::uint64_t step;
  std::string layer;
  double rsa_dissim, cka_sim;
};

// Held-out probe for the supervised baseline: probe_size images drawn
// without replacement from a labelled set (the MNIST test split).
inline Probe dataset_probe(const LabeledImages& data, std::uint64_t probe_seed, std::size_t probe_size) {
  const std::size_t n = data.y.size();
  if (probe_size > n)
    throw ConfigError("probe size " + std::to_string(probe_size) + " exceeds dataset size " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({probe_seed, 0x9a0beULL}));
  for (std::size_t i = 0; i < probe_size; ++i) std::swap(order[i], order[i + rng.index(n - i)]);
  order.resize(probe_size);
  return make_probe(slice_rows(data.x, order));
}

inline std::vector<BaselineRow> exp_supervised_baseline(const ExperimentSpec& spec, const NetConfig& net,
                                                        const CheckpointSeries& series, const Probe& probe) {
  spec.validate();
  if (!series.has_step(0))
    throw ConfigError("exp_supervised_baseline: missing step-0 checkpoint " +
                      checkpoint_path(spec.checkpoint_dir, 0).string());
  const auto base_reps = representations(series.at_step(0).params, probe.x, net);
  std::vector<BaselineRow> rows;
  for (const auto& ck : series.items) {
    const auto reps = representations(ck.params, probe.x, net);
    for (const auto& layer : spec.layers) {
      const std::size_t li = layer_index(layer);
      const double rsa =
          rsa_dissimilarity(make_rdm(reps[li], spec.metric), make_rdm(base_reps[li], spec.metric));
      rows.push_back({ck.step, layer, rsa, linear_cka(reps[li], base_reps[li])});
    }
  }
  return rows;
}

inline void write_baseline(const std::filesystem::path& path, const std::string& prov,
                           const std::vector<BaselineRow>& rows) {
  CsvWriter csv(path.string(), prov, "step,layer,rsa_dissim,cka_sim");
  for (const auto& r : rows)
    csv.row({std::to_string(r.step), r.layer, fmt_double(r.rsa_dissim), fmt_double(r.cka_sim)});
}

// --- exp_finetune_trace -------------------------------------------------------------------

struct TracePoint {
  std::uint64_t step;
  int task;  // -1: the task-independent inner-step-0 point
  std::size_t inner_step;
};

struct TraceLayer {
  std::string layer;
  Tensor dissim;  // points x points, second-order RSA
  Embedding embedding;
};

struct TraceResult {
  std::vector<std::uint64_t> steps;
  std::vector<TracePoint> points;
  std::vector<TraceLayer> layers;
};

// `count` checkpoints evenly spread over the periodic grid, ending at the
// last one (2000-step run, spacing 200, count 5 -> 400, 800, ..., 2000).
inline std::vector<std::uint64_t> select_trace_steps(const std::vector<std::uint64_t>& periodic, std::size_t count) {
  if (periodic.empty()) throw ConfigError("no periodic checkpoints to trace");
  const std::size_t n = periodic.size(), k = std::min(count, n);
  std::vector<std::uint64_t> out;
  for (std::size_t i = 1; i <= k; ++i) out.push_back(periodic[(i * n + k - 1) / k - 1]);
  return out;
}

inline TraceResult exp_finetune_trace(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                      const CheckpointSeries& series, const Probe& probe) {
  spec.validate();
  if (!ctx.source) throw ConfigError("exp_finetune_trace: needs a task source");
  TraceResult r;
  r.steps = select_trace_steps(series.periodic_steps(), spec.trace_checkpoints);
  std::vector<Episode> tasks;
  for (std::size_t j = 0; j < spec.fixed_tasks; ++j) tasks.push_back(ctx.source->task(analysis_task_index(j)));
  const std::size_t max_mark = spec.inner_marks.back();
  const std::size_t nl = spec.layers.size();

  // rdms[point][layer]
  std::vector<std::vector<Rdm>> rdms;
  for (auto step : r.steps) {
    const ParamSet& theta = series.at_step(step).params;
    r.points.push_back({step, -1, 0});
    rdms.push_back(layer_rdms(theta, probe, ctx.net, spec));
    if (max_mark == 0) continue;
    std::vector<std::vector<std::vector<Rdm>>> per_task(tasks.size());
    parallel_for(tasks.size(), spec.threads, [&](std::size_t j) {
      const auto traj = adaptation_trajectory(theta, tasks[j], ctx, max_mark);
      for (std::size_t m = 1; m < spec.inner_marks.size(); ++m)
        per_task[j].push_back(layer_rdms(traj[spec.inner_marks[m] - 1], probe, ctx.net, spec));
    });
    for (std::size_t j = 0; j < tasks.size(); ++j)
      for (std::size_t m = 1; m < spec.inner_marks.size(); ++m) {
        r.points.push_back({step, static_cast<int>(j), spec.inner_marks[m]});
        rdms.push_back(std::move(per_task[j][m - 1]));
      }
  }

  const std::size_t np = r.points.size();
  for (std::size_t l = 0; l < nl; ++l) {
    TraceLayer tl{spec.layers[l], Tensor(Shape{np, np}), {}};
    for (std::size_t i = 0; i < np; ++i)
      for (std::size_t j = 0; j < i; ++j)
        tl.dissim.at(i, j) = tl.dissim.at(j, i) = rsa_dissimilarity(rdms[i][l], rdms[j][l]);
    tl.embedding = classical_mds(tl.dissim, 2);
    r.layers.push_back(std::move(tl));
  }
  return r;
}

inline std::string trace_task_label(const TracePoint& p) { return p.task < 0 ? "all" : std::to_string(p.task); }

// Per layer: trace_<layer>_matrix.csv, trace_<layer>_coords.csv and a JSON
// sidecar with the MDS eigenvalues. Returns the CSV paths.
inline std::vector<std::filesystem::path> write_trace(const std::filesystem::path& dir, const std::string& prov,
                                                      const TraceResult& r) {
  std::vector<std::filesystem::path> written;
  const std::size_t np = r.points.size();
  for (const auto& tl : r.layers) {
    const auto mpath = dir / ("trace_" + tl.layer + "_matrix.csv");
    const auto cpath = dir / ("trace_" + tl.layer + "_coords.csv");
    std::string header = "point_id,checkpoint,task,inner_step";
    for (std::size_t j = 0; j < np; ++j) header += ",d" + std::to_string(j);
    {
      CsvWriter csv(mpath.string(), prov + " layer=" + tl.layer, header);
      for (std::size_t i = 0; i < np; ++i) {
        const auto& p = r.points[i];
        std::vector<std::string> cells = {std::to_string(i), std::to_string(p.step), trace_task_label(p),
                                          std::to_string(p.inner_step)};
        for (std::size_t j = 0; j < np; ++j) cells.push_back(fmt_double(tl.dissim.at(i, j)));
        csv.row(cells);
      }
    }
    {
      CsvWriter csv(cpath.string(), prov + " layer=" + tl.layer, "point_id,checkpoint,task,inner_step,x,y");
      for (std::size_t i = 0; i < np; ++i) {
        const auto& p = r.points[i];
        csv.row({std::to_string(i), std::to_string(p.step), trace_task_label(p), std::to_string(p.inner_step),
                 fmt_double(tl.embedding.coords.at(i, 0)), fmt_double(tl.embedding.coords.at(i, 1))});
      }
    }
    nlohmann::json j;
    j["layer"] = tl.layer;
    j["eigenvalues"] = tl.embedding.eigenvalues;
    j["residual"] = tl.embedding.residual;
    j["provenance"] = prov;
    std::ofstream out(dir / ("trace_" + tl.layer + "_mds.json"), std::ios::binary);
    if (!out) throw Error("cannot write MDS sidecar in '" + dir.string() + "'");
    out << j.dump(2) << '\n';
    written.push_back(mpath);
    written.push_back(cpath);
  }
  return written;
}

// --- exp_accuracy_curve -----------------------------------------------------------------

struct AccuracyRow {
  std::uint64_t step;
  std::string task_id;  // fixed task number or "avg"
  double accuracy;
};

inline std::vector<AccuracyRow> exp_accuracy_curve(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                                   const CheckpointSeries& series) {
  spec.validate();
  if (!ctx.source) throw ConfigError("exp_accuracy_curve: needs a task source");
  // Fixed tasks are the first eval tasks; the average uses its own block of
  // accuracy_tasks eval tasks after them.
  const std::size_t nf = spec.fixed_tasks, na = spec.accuracy_tasks;
  std::vector<Episode> tasks;
  for (std::size_t j = 0; j < nf + na; ++j) tasks.push_back(ctx.source->task(analysis_task_index(j)));
  std::vector<AccuracyRow> rows;
  for (const auto& ck : series.items) {
    std::vector<double> acc(tasks.size());
    parallel_for(tasks.size(), spec.threads, [&](std::size_t j) {
      const auto traj = adaptation_trajectory(ck.params, tasks[j], ctx, spec.finetune_steps);
      const Tensor logits = forward(traj.back(), tasks[j].query_x, ctx.net).logits.value();
      acc[j] = accuracy(logits, tasks[j].query_y);
    });
    for (std::size_t j = 0; j < nf; ++j) rows.push_back({ck.step, std::to_string(j), acc[j]});
    rows.push_back({ck.step, "avg", mean_of(std::vector<double>(acc.begin() + static_cast<std::ptrdiff_t>(nf), acc.end()))});
  }
  return rows;
}

inline void write_accuracy(const std::filesystem::path& path, const std::string& prov,
                           const std::vector<AccuracyRow>& rows) {
  CsvWriter csv(path.string(), prov, "step,task_id,accuracy");
  for (const auto& r : rows) csv.row({std::to_string(r.step), r.task_id, fmt_double(r.accuracy)});
}

// --- inner-loop change -----------------------------------------------------------------

// Mean (over n_tasks tasks) RSA dissimilarity between theta_t and phi after
// each of `marks` inner steps, per layer: result[mark index][layer index].
inline std::vector<std::vector<double>> inner_step_dissim(const ExperimentSpec& spec, const ExperimentContext& ctx,
                                                          const ParamSet& theta, const Probe& probe,
                                                          const std::vector<std::size_t>& marks) {
  spec.validate();
  if (!ctx.source) throw ConfigError("inner_step_dissim: needs a task source");
  if (marks.empty()) throw ConfigError("inner_step_dissim: no inner-step marks");
  for (auto m : marks)
    if (m < 1) throw ConfigError("inner_step_dissim: marks must be >= 1");
  const std::size_t max_mark = *std::max_element(marks.begin(), marks.end());
  const std::size_t nl = spec.layers.size();
  const auto base = layer_rdms(theta, probe, ctx.net, spec);
  // d[task][mark][layer]
  std::vector<std::vector<std::vector<double>>> d(spec.n_tasks);
  parallel_for(spec.n_tasks, spec.threads, [&](std::size_t j) {
    const Episode e = ctx.source->task(analysis_task_index(j));
    const auto traj = adaptation_trajectory(theta, e, ctx, max_mark);
    for (auto m : marks) {
      const auto rdms = layer_rdms(traj[m - 1], probe, ctx.net, spec);
      std::vector<double> row(nl);
      for (std::size_t l = 0; l < nl; ++l) row[l] = rsa_dissimilarity(base[l], rdms[l]);
      d[j].push_back(std::move(row));
    }
  });
  std::vector<std::vector<double>> out(marks.size(), std::vector<double>(nl, 0.0));
  for (std::size_t mi = 0; mi < marks.size(); ++mi)
    for (std::size_t l = 0; l < nl; ++l) {
      std::vector<double> col(spec.n_tasks);
      for (std::size_t j = 0; j < spec.n_tasks; ++j) col[j] = d[j][mi][l];
      out[mi][l] = mean_of(col);
    }
  return out;
}

}  // namespace metarep
