#pragma once

// Run configuration: a TOML-style file of [section] headers and
// `key = value` lines, plus `section.key=value` overrides.
//
// Values are integers, reals, booleans (true/false), strings (bare or
// double-quoted) and flat lists in square brackets. '#' starts a comment
// outside quotes. Unknown sections and keys are errors, so a typo never
// silently falls back to a default.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "metarep/experiments.hpp"
#include "metarep/maml.hpp"
#include "metarep/model.hpp"
#include "metarep/tasks.hpp"

namespace metarep {

enum class TaskKind { synthetic, pgm };

struct TaskConfig {
  TaskKind kind = TaskKind::synthetic;
  SynthConfig synth;
  // pgm: one sub-directory of .pgm images per class.
  std::filesystem::path pgm_root;
};

struct DataConfig {
  std::filesystem::path mnist_train_images = "data/mnist5k/train-images-idx3-ubyte";
  std::filesystem::path mnist_train_labels = "data/mnist5k/train-labels-idx1-ubyte";
  std::filesystem::path mnist_test_images = "data/mnist5k/test-images-idx3-ubyte";
  std::filesystem::path mnist_test_labels = "data/mnist5k/test-labels-idx1-ubyte";
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/maml";
  std::size_t threads = 0;  // 0: METAREP_THREADS or all cores
  NetConfig model;
  MamlConfig maml;
  TaskConfig task;
  SupervisedConfig supervised;
  std::filesystem::path supervised_out_dir = "runs/supervised";
  DataConfig data;
  ExperimentSpec experiment;

  // The task section owns n_way and the image size; the model follows. The
  // run seed also seeds the task source, so one seed fixes every random
  // choice of a run.
  void sync() {
    task.synth.seed = seed;
    model.n_way = task.synth.n_way;
    model.image_size = task.synth.image_size;
  }

  void validate() const {
    model.validate();
    maml.validate();
    task.synth.validate();
    supervised.validate();
    experiment.validate();
    if (task.kind == TaskKind::pgm && task.pgm_root.empty()) throw ConfigError("task.pgm_root is required for kind = pgm");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string v = unquote(trim(raw));
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError(key + ": cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = unquote(trim(raw));
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<std::string> parse_list(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(key + ": expected a [list], got '" + v + "'");
  std::vector<std::string> out;
  std::stringstream ss(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = unquote(trim(item));
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> parse_number_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  for (const auto& s : parse_list(key, raw)) out.push_back(parse_number<T>(key, s));
  return out;
}

}  // namespace detail

// Binds every "section.key" to a setter on a RunConfig.
class ConfigBinder {
 public:
  explicit ConfigBinder(RunConfig& c) {
    using namespace detail;
    auto u64 = [this](const char* k, std::uint64_t& f) { set_[k] = [k, &f](const std::string& v) { f = parse_number<std::uint64_t>(k, v); }; };
    auto usz = [this](const char* k, std::size_t& f) { set_[k] = [k, &f](const std::string& v) { f = parse_number<std::size_t>(k, v); }; };
    auto dbl = [this](const char* k, double& f) { set_[k] = [k, &f](const std::string& v) { f = parse_number<double>(k, v); }; };
    auto bln = [this](const char* k, bool& f) { set_[k] = [k, &f](const std::string& v) { f = parse_bool(k, v); }; };
    auto pth = [this](const char* k, std::filesystem::path& f) { set_[k] = [&f](const std::string& v) { f = unquote(trim(v)); }; };

    u64("run.seed", c.seed);
    pth("run.out_dir", c.out_dir);
    usz("run.threads", c.threads);

    usz("model.filters", c.model.filters);
    usz("model.in_channels", c.model.in_channels);
    bln("model.batch_norm", c.model.use_batch_norm);
    bln("model.max_pool", c.model.max_pool);
    dbl("model.bn_eps", c.model.bn_eps);

    dbl("maml.inner_lr", c.maml.inner_lr);
    usz("maml.inner_steps", c.maml.inner_steps);
    dbl("maml.meta_lr", c.maml.meta_lr);
    usz("maml.meta_batch", c.maml.meta_batch);
    set_["maml.order"] = [&c](const std::string& raw) {
      const std::string v = unquote(trim(raw));
      if (v == "second") c.maml.order = MetaOrder::second;
      else if (v == "first") c.maml.order = MetaOrder::first;
      else throw ConfigError("maml.order: expected second or first, got '" + v + "'");
    };
    usz("maml.total_steps", c.maml.total_steps);
    usz("maml.checkpoint_every", c.maml.checkpoint_every);
    usz("maml.log_every", c.maml.log_every);
    bln("maml.adapt_norm_params", c.maml.adapt_norm_params);

    set_["task.kind"] = [&c](const std::string& raw) {
      const std::string v = unquote(trim(raw));
      if (v == "synthetic") c.task.kind = TaskKind::synthetic;
      else if (v == "pgm") c.task.kind = TaskKind::pgm;
      else throw ConfigError("task.kind: expected synthetic or pgm, got '" + v + "'");
    };
    usz("task.n_way", c.task.synth.n_way);
    usz("task.k_shot", c.task.synth.k_shot);
    usz("task.n_query", c.task.synth.n_query);
    usz("task.image_size", c.task.synth.image_size);
    dbl("task.blur_sigma", c.task.synth.blur_sigma);
    dbl("task.noise_sigma", c.task.synth.noise_sigma);
    pth("task.pgm_root", c.task.pgm_root);

    usz("supervised.steps", c.supervised.steps);
    usz("supervised.batch_size", c.supervised.batch_size);
    dbl("supervised.lr", c.supervised.lr);
    usz("supervised.log_every", c.supervised.log_every);
    pth("supervised.out_dir", c.supervised_out_dir);
    set_["supervised.checkpoint_steps"] = [&c](const std::string& v) {
      c.supervised.checkpoint_steps = parse_number_list<std::uint64_t>("supervised.checkpoint_steps", v);
    };

    pth("data.mnist_train_images", c.data.mnist_train_images);
    pth("data.mnist_train_labels", c.data.mnist_train_labels);
    pth("data.mnist_test_images", c.data.mnist_test_images);
    pth("data.mnist_test_labels", c.data.mnist_test_labels);

    pth("experiment.checkpoint_dir", c.experiment.checkpoint_dir);
    pth("experiment.out_dir", c.experiment.out_dir);
    u64("experiment.probe_seed", c.experiment.probe_seed);
    usz("experiment.probe_size", c.experiment.probe_size);
    set_["experiment.layers"] = [&c](const std::string& v) { c.experiment.layers = parse_list("experiment.layers", v); };
    set_["experiment.inner_marks"] = [&c](const std::string& v) {
      c.experiment.inner_marks = parse_number_list<std::size_t>("experiment.inner_marks", v);
    };
    usz("experiment.max_inner_steps", c.experiment.max_inner_steps);
    usz("experiment.n_tasks", c.experiment.n_tasks);
    set_["experiment.modes"] = [&c](const std::string& v) {
      c.experiment.modes.clear();
      for (const auto& m : parse_list("experiment.modes", v)) c.experiment.modes.push_back(parse_compare_mode(m));
    };
    usz("experiment.finetune_steps", c.experiment.finetune_steps);
    usz("experiment.trace_checkpoints", c.experiment.trace_checkpoints);
    usz("experiment.fixed_tasks", c.experiment.fixed_tasks);
    usz("experiment.accuracy_tasks", c.experiment.accuracy_tasks);
    set_["experiment.metric"] = [&c](const std::string& v) { c.experiment.metric = parse_rdm_metric(unquote(trim(v))); };
  }

  void set(const std::string& key, const std::string& value) {
    auto it = set_.find(key);
    if (it == set_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value);
  }

  bool known(const std::string& key) const { return set_.count(key) != 0; }

  std::vector<std::string> keys() const {
    std::vector<std::string> k;
    for (const auto& [name, _] : set_) k.push_back(name);
    return k;
  }

 private:
  std::map<std::string, std::function<void(const std::string&)>> set_;
};

// Applies `text` (config file syntax) on top of `cfg`. `origin` names the
// source in error messages.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
  ConfigBinder bind(cfg);
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = detail::trim(line.substr(1, line.size() - 2));
      static const char* const kSections[] = {"run", "model", "maml", "task", "supervised", "data", "experiment"};
      if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections))
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
    if (section.empty()) throw ConfigError(where + "key outside of any [section]");
    const std::string key = section + "." + detail::trim(line.substr(0, eq));
    try {
      bind.set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

// `section.key=value`.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  ConfigBinder(cfg).set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), path.string());
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.sync();
  cfg.validate();
  return cfg;
}

// Task source described by the task section.
inline std::unique_ptr<TaskSource> make_task_source(const RunConfig& cfg) {
  if (cfg.task.kind == TaskKind::synthetic) return std::make_unique<SynthTaskSource>(cfg.task.synth);
  auto pool = std::make_shared<const ClassPool>(load_pgm_classes(cfg.task.pgm_root, cfg.task.synth.image_size));
  return std::make_unique<PoolTaskSource>(pool, cfg.task.synth.n_way, cfg.task.synth.k_shot, cfg.task.synth.n_query,
                                          cfg.task.synth.seed);
}

}  // namespace metarep
