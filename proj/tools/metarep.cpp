// metarep: train MAML / the supervised baseline and run the representation
// analyses on their checkpoints.
//
//   metarep train            [--config F] [--seed N] [--threads N] [--override k=v]...
//   metarep train-supervised [same flags]
//   metarep analyze <to-init|drift|baseline|trace|accuracy> [--delta N] [same flags]
//   metarep gradcheck        [same flags]

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metarep/commands.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "Config file (TOML-style [section] key = value)");
    cmd->add_option("--seed", seed, "Run seed; every random choice derives from it (overrides run.seed)");
    cmd->add_option("--threads", threads,
                    "Worker threads (overrides run.threads; default METAREP_THREADS or all cores)");
    cmd->add_option("--override", overrides, "Set section.key=value after loading the config (repeatable)")
        ->allow_extra_args(false);
  }

  metarep::RunConfig resolve() const {
    std::vector<std::string> all = overrides;
    if (seed) all.push_back("run.seed=" + std::to_string(*seed));
    if (threads) all.push_back("run.threads=" + std::to_string(*threads));
    return metarep::load_run_config(config, all);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metarep: MAML training and layer-wise representation analysis (RSA, CKA, MDS)"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  CommonFlags train_flags, sup_flags, analyze_flags, check_flags;

  CLI::App* train = app.add_subcommand("train", "Meta-train with MAML; writes checkpoints and train_log.csv");
  train_flags.attach(train);

  CLI::App* sup = app.add_subcommand("train-supervised", "Train the same network on MNIST (supervised baseline)");
  sup_flags.attach(sup);

  CLI::App* analyze = app.add_subcommand("analyze", "Run an analysis pipeline over saved checkpoints");
  std::string pipeline;
  std::optional<std::uint64_t> delta;
  analyze->add_option("pipeline", pipeline, "One of: to-init, drift, baseline, trace, accuracy")->required();
  analyze->add_option("--delta", delta, "drift: step gap between compared checkpoints (default: checkpoint spacing)");
  analyze_flags.attach(analyze);

  CLI::App* check = app.add_subcommand("gradcheck", "Finite-difference checks of gradients and meta-gradients");
  check_flags.attach(check);
  bool corrupt_alpha = false;
  check->add_flag("--corrupt-inner-lr-sign", corrupt_alpha,
                  "Test hook: negate the inner learning rate inside meta_grad (must make the check fail)")
      ->group("Testing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return metarep::kExitConfig;
  }

  using namespace metarep;
  if (train->parsed()) return guarded([&] { return cmd_train(train_flags.resolve()); });
  if (sup->parsed()) return guarded([&] { return cmd_train_supervised(sup_flags.resolve()); });
  if (analyze->parsed())
    return guarded([&] {
      const auto& names = analyze_pipelines();
      if (std::find(names.begin(), names.end(), pipeline) == names.end()) {
        std::cerr << analyze->help();
        throw ConfigError("unknown analysis '" + pipeline + "'");
      }
      return cmd_analyze(analyze_flags.resolve(), pipeline, delta);
    });
  return guarded([&] { return cmd_gradcheck(check_flags.resolve(), corrupt_alpha); });
}
