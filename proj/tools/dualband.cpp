// dualband: simulate, train, calibrate, monitor, evaluate, or run everything.
//
// Exit codes: 0 ok, 2 invalid config, 3 stage failure, 4 numerical error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dualband/dualband.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kNumerical = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string input;
  std::vector<double> alpha_grid;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
}

dualband::RunConfig resolve(const Options& o) {
  auto c = dualband::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  c.jobs = o.jobs;
  c.validate();
  return c;
}

void print_summary(const std::vector<dualband::EventRecord>& records) {
  for (const auto& r : records) {
    std::cout << r.id << ' ' << to_string(r.metric) << " alpha=" << dualband::io::fmt(r.alpha)
              << " label=" << to_string(r.event.label) << " k=" << r.event.detected_time
              << " action=" << to_string(dualband::recommend_action(r.event.label)) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-band failure and OOD monitor"};
  app.require_subcommand(1);
  Options o;

  auto* simulate = app.add_subcommand("simulate", "render the synthetic dataset and manifest");
  auto* train = app.add_subcommand("train", "train the success and failure world models");
  auto* calibrate = app.add_subcommand("calibrate", "fit stats and conformal thresholds");
  auto* monitor = app.add_subcommand("monitor", "score test trajectories (or --input) into event records");
  auto* evaluate = app.add_subcommand("evaluate", "accuracy, detection-time and histogram reports");
  auto* pipeline = app.add_subcommand("pipeline", "run all five stages in order");
  auto* defaults = app.add_subcommand("default-config", "print the default config as JSON");
  for (auto* sub : {simulate, train, calibrate, monitor, evaluate, pipeline}) add_common(sub, o);
  monitor->add_option("--input", o.input, "trajectory file or directory of .traj files")->check(CLI::ExistingPath);
  evaluate->add_option("--alpha-grid", o.alpha_grid, "calibrated alphas to report, e.g. 0.1,0.05")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  const char* stage = "config";
  try {
    if (defaults->parsed()) {
      std::cout << dualband::config_to_json(dualband::RunConfig{}).dump(2) << '\n';
      return kOk;
    }
    const auto config = resolve(o);
    const dualband::ParallelFor pfor(config.jobs);
    if (simulate->parsed()) {
      stage = "simulate";
      dualband::stage_simulate(config, pfor);
    } else if (train->parsed()) {
      stage = "train";
      dualband::stage_train(config, pfor);
    } else if (calibrate->parsed()) {
      stage = "calibrate";
      dualband::stage_calibrate(config, pfor);
    } else if (monitor->parsed()) {
      stage = "monitor";
      std::optional<std::filesystem::path> input;
      if (!o.input.empty()) input = o.input;
      const auto records = dualband::stage_monitor(config, pfor, input);
      if (input) print_summary(records);
    } else if (evaluate->parsed()) {
      stage = "evaluate";
      std::optional<std::vector<double>> alphas;
      if (!o.alpha_grid.empty()) alphas = o.alpha_grid;
      dualband::stage_evaluate(config, pfor, alphas);
    } else if (pipeline->parsed()) {
      stage = "pipeline";
      dualband::run_pipeline(config, pfor);
    }
    std::cerr << "dualband: " << stage << " done (config " << dualband::config_hash(config) << ")\n";
    return kOk;
  } catch (const dualband::ConfigurationError& e) {
    std::cerr << "dualband: invalid config: " << e.what() << '\n';
    return kConfig;
  } catch (const dualband::NumericalError& e) {
    std::cerr << "dualband: numerical error in " << stage << ": " << e.what() << '\n';
    return kNumerical;
  } catch (const dualband::StageError& e) {
    std::cerr << "dualband: stage failed: " << e.what() << '\n';
    return kStage;
  } catch (const std::exception& e) {
    std::cerr << "dualband: " << stage << " failed: " << e.what() << '\n';
    return kStage;
  }
}
