#include <glob.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "isblab/experiment.hpp"

namespace fs = std::filesystem;
using namespace isblab;

static std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::string> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  ::globfree(&g);
  return out;
}

static int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                   const std::optional<std::string>& strategy, std::string out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (strategy) {
    cfg.strategy = parse_strategy(*strategy);
    cfg.validate();
  }
  if (out_dir.empty())
    out_dir = "runs/" + std::string(task_name(cfg.task)) + "-" + strategy_name(cfg.strategy) + "-s" + std::to_string(cfg.seed);
  const RunResult r = run_experiment(cfg, out_dir);
  const MetricsRow* last = nullptr;
  for (const MetricsRow& row : r.rows)
    if (row.validated) last = &row;
  std::cout << r.metrics_path << '\n';
  if (last)
    std::cout << "final validation return " << last->validation_return << ", success rate " << last->success_rate
              << " at iteration " << last->iteration << '\n';
  return 0;
}

static int cmd_compare(const std::vector<std::string>& patterns, const std::string& out) {
  std::vector<std::string> paths;
  for (const std::string& p : patterns) {
    const auto found = expand_glob(p);
    paths.insert(paths.end(), found.begin(), found.end());
  }
  if (paths.empty()) {
    std::cerr << "no metrics files match\n";
    return 1;
  }
  const auto summary = compare_runs(paths, out);
  for (const MethodSummary& s : summary)
    std::cout << s.task << ' ' << s.method << " runs=" << s.runs << " final=" << s.final_return.mean << " +- "
              << s.final_return.std << " success=" << s.success_rate.mean << '\n';
  std::cout << "wrote " << out << '\n';
  return 0;
}

// Prints the ISB after the given iteration. Uses a saved dump when the run has
// one, otherwise replays the run from its config up to that iteration.
static int cmd_dump_buffer(const std::string& run_dir, long phase) {
  const fs::path dump = fs::path(run_dir) / ("isb_phase_" + std::to_string(phase) + ".jsonl");
  if (!fs::exists(dump)) {
    ExperimentConfig cfg = load_config((fs::path(run_dir) / "config.json").string());
    if (phase < 1 || phase > cfg.iterations) {
      std::cerr << "phase must lie in [1, " << cfg.iterations << "]\n";
      return 1;
    }
    cfg.iterations = phase;
    cfg.output = OutputOptions{};
    cfg.output.checkpoints = false;
    cfg.output.diagnostics = false;
    cfg.output.dump_isb_iterations = {phase};
    const fs::path replay = fs::path(run_dir) / ("replay_phase_" + std::to_string(phase));
    run_experiment(cfg, replay.string());
    fs::copy_file(replay / dump.filename(), dump, fs::copy_options::overwrite_existing);
  }
  std::ifstream in(dump);
  std::cout << in.rdbuf();
  return 0;
}

int main(int argc, char** argv) {
  CLI::App app{"Initial-state-buffer experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train one seeded configuration");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  run->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--strategy", strategy, "override the isb strategy")
      ->check(CLI::IsMember({"vanilla", "random", "obs", "cl", "terminal", "value"}));
  run->add_option("--out", out_dir, "output directory");

  auto* compare = app.add_subcommand("compare", "summarize metrics files as CSV");
  std::vector<std::string> inputs;
  std::string report;
  compare->add_option("--inputs", inputs, "metrics file glob(s)")->required();
  compare->add_option("--out", report, "CSV report path")->required();

  auto* dumpb = app.add_subcommand("dump-buffer", "print the initial state buffer after an iteration");
  std::string run_dir;
  long phase = 0;
  dumpb->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  dumpb->add_option("--phase", phase, "iteration")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config_path, seed, strategy, out_dir);
    if (*compare) return cmd_compare(inputs, report);
    if (*dumpb) return cmd_dump_buffer(run_dir, phase);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
