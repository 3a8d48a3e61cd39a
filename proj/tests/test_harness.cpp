#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "isblab/experiment.hpp"

using namespace isblab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("isblab_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json tiny_json(const std::string& strategy, const std::string& task = "locomotion") {
  nlohmann::json j = {{"task", task},
                      {"strategy", strategy},
                      {"seed", 7},
                      {"iterations", 6},
                      {"num_envs", 4},
                      {"rollout_steps", 32},
                      {"validation_interval", 2},
                      {"policy_hidden", {16}},
                      {"value_hidden", {16}},
                      {"isb", {{"n", 16}, {"k", 4}, {"filters", {{"min_episode_step", 5}}}}},
                      {"contrastive",
                       {{"top_k", 4}, {"tracked_count", 16}, {"embedding_dim", 8}, {"hidden", {16}},
                        {"train_steps_per_update", 2}}}};
  if (task == "locomotion") j["locomotion"] = {{"horizon", 40}};
  else j["racing"] = {{"horizon", 60}};
  return j;
}

ExperimentConfig tiny(const std::string& strategy, const std::string& task = "locomotion") {
  return config_from_json(tiny_json(strategy, task));
}

void write_metrics(const fs::path& p, const std::string& method, const std::vector<double>& validation,
                   const std::vector<std::string>& keys = {"flat"}, const std::string& task = "locomotion") {
  std::ofstream out(p);
  out << nlohmann::json{{"schema", kMetricsSchema}, {"method", method}, {"task", task}, {"seed", 1},
                        {"validation_keys", keys}}
             .dump()
      << '\n';
  long it = 0;
  for (double v : validation) {
    MetricsRow r;
    r.iteration = ++it;
    r.validated = true;
    r.validation_return = v;
    for (const auto& k : keys) r.validation_groups.emplace_back(k, v);
    out << metrics_row_to_json(r).dump() << '\n';
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsMatchDeskScale) {
  const ExperimentConfig c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.num_envs, 64);
  EXPECT_EQ(c.rollout_steps, 64);
  EXPECT_EQ(c.iterations, 300);
  EXPECT_EQ(c.validation_interval, 20);
  EXPECT_EQ(c.isb_n, 256);
  EXPECT_EQ(c.kmeans_k, 64);
  EXPECT_EQ(c.isb_capacity, 4096);
  EXPECT_EQ(c.effective_visited_capacity(), 64 * 64);
  EXPECT_DOUBLE_EQ(c.p, 0.8);
  EXPECT_EQ(c.filters.min_episode_step, 15);
  EXPECT_FALSE(c.filters.require_nominal_start_trajectory);
  EXPECT_EQ(c.strategy, Strategy::Vanilla);
}

TEST(Config, RacingDefaultsToNominalStartFilter) {
  EXPECT_TRUE(config_from_json({{"task", "racing"}}).filters.require_nominal_start_trajectory);
  nlohmann::json j = {{"task", "racing"}, {"isb", {{"filters", {{"require_nominal_start_trajectory", false}}}}}};
  EXPECT_FALSE(config_from_json(j).filters.require_nominal_start_trajectory);
}

TEST(Config, RejectsInvalidValuesAndUnknownKeys) {
  EXPECT_THROW(config_from_json({{"isb", {{"p", 1.5}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"num_envs", 0}}), ConfigError);
  EXPECT_THROW(config_from_json({{"strategy", "greedy"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"task", "swimming"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"itrations", 5}}), ConfigError);
  EXPECT_THROW(config_from_json({{"isb", {{"filters", {{"min_step", 3}}}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"gae", {{"lambda", 2.0}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"iterations", "many"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"strategy", "cl"}, {"contrastive", {{"top_k", 100}, {"tracked_count", 128}}}}),
               ConfigError);
  EXPECT_THROW(config_from_json({{"task", "racing"}, {"prior_init", true}}), ConfigError);
}

TEST(Config, IsbStrategyKeyOverridesTopLevel) {
  EXPECT_EQ(config_from_json({{"strategy", "random"}, {"isb", {{"strategy", "obs"}}}}).strategy, Strategy::Obs);
  EXPECT_THROW(config_from_json({{"isb", {{"strategy", 3}}}}), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny("cl");
  c.contrastive.aggregation = DeltaVAggregation::Last;
  c.locomotion.layout.assign(9, Terrain::Rough);
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  const ExperimentConfig r = tiny("terminal", "racing");
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(r))), config_to_json(r));
}

TEST(Config, InvalidConfigFailsBeforeAnyWork) {
  ExperimentConfig c = tiny("vanilla");
  c.p = -1;
  const fs::path dir = scratch("invalid");
  EXPECT_THROW(run_experiment(c, dir.string()), ConfigError);
  EXPECT_FALSE(fs::exists(dir));
}

// ---------------------------------------------------------------------------
// Runs

TEST(Run, IdenticalConfigAndSeedGiveBitIdenticalMetrics) {
  for (const std::string s : {"cl", "obs", "vanilla"}) {
    const ExperimentConfig c = tiny(s);
    const fs::path a = scratch("det_a_" + s), b = scratch("det_b_" + s);
    run_experiment(c, a.string());
    run_experiment(c, b.string());
    const std::string ma = slurp(a / "metrics.jsonl");
    EXPECT_FALSE(ma.empty());
    EXPECT_EQ(ma, slurp(b / "metrics.jsonl")) << s;
    EXPECT_EQ(slurp(a / "policy.ckpt.json"), slurp(b / "policy.ckpt.json")) << s;
  }
}

TEST(Run, DifferentSeedsDiffer) {
  ExperimentConfig c = tiny("random");
  const fs::path a = scratch("seed_a"), b = scratch("seed_b");
  run_experiment(c, a.string());
  c.seed = 8;
  run_experiment(c, b.string());
  EXPECT_NE(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
}

TEST(Run, ValidationRowsExactlyAtIntervalMultiples) {
  ExperimentConfig c = tiny("value");
  c.iterations = 7;
  c.validation_interval = 3;
  const fs::path dir = scratch("schedule");
  run_experiment(c, dir.string());
  const MetricsFile f = read_metrics((dir / "metrics.jsonl").string());
  ASSERT_EQ(f.rows.size(), 7u);
  for (const MetricsRow& r : f.rows) {
    EXPECT_EQ(r.validated, r.iteration % 3 == 0) << r.iteration;
    if (r.validated) {
      EXPECT_EQ(r.validation_groups.size(), f.validation_keys.size());
    }
  }
  EXPECT_EQ(f.method, "value");
  EXPECT_EQ(f.task, "locomotion");
  EXPECT_EQ(f.validation_keys.size(), 5u);
  EXPECT_EQ(f.final_validation()->iteration, 6);
}

TEST(Run, VanillaNeverBuildsABuffer) {
  const long before = buffer_constructions().load();
  const fs::path dir = scratch("vanilla");
  const RunResult r = run_experiment(tiny("vanilla"), dir.string());
  EXPECT_EQ(buffer_constructions().load(), before);
  for (const MetricsRow& row : r.rows) {
    EXPECT_EQ(row.isb_occupancy, 0u);
    EXPECT_EQ(row.visited_occupancy, 0u);
    EXPECT_EQ(row.isb_initializations, 0);
  }
  run_experiment(tiny("random"), scratch("not_vanilla").string());
  EXPECT_GT(buffer_constructions().load(), before);
}

TEST(Run, EpisodeInitializationsAreConserved) {
  for (const std::string s : {"vanilla", "cl", "terminal"}) {
    const RunResult r = run_experiment(tiny(s), scratch("conserve_" + s).string());
    for (const MetricsRow& row : r.rows)
      EXPECT_EQ(row.nominal_initializations + row.isb_initializations, row.total_episodes + 4) << s;
    if (s != "vanilla") {
      EXPECT_GT(r.rows.back().isb_initializations, 0) << s;
    }
  }
}

TEST(Run, DumpedIsbRespectsFilters) {
  ExperimentConfig c = tiny("random");
  c.filters.min_episode_step = 15;
  c.output.dump_isb_iterations = {3, 6};
  const fs::path dir = scratch("dump");
  run_experiment(c, dir.string());
  for (const char* name : {"isb_phase_3.jsonl", "isb_phase_6.jsonl"}) {
    const auto recs = load_records((dir / name).string());
    EXPECT_FALSE(recs.empty());
    for (const StateRecord& rec : recs) {
      EXPECT_GE(rec.episode_step, 15);
      EXPECT_GE(rec.accumulated_reward, 0.0);
    }
  }
}

TEST(Run, RacingRunsAndReportsSuccessRate) {
  const fs::path dir = scratch("racing");
  const RunResult r = run_experiment(tiny("cl", "racing"), dir.string());
  const MetricsFile f = read_metrics(r.metrics_path);
  EXPECT_EQ(f.validation_keys, (std::vector<std::string>{"track"}));
  for (const MetricsRow* row : f.validation_rows()) {
    EXPECT_GE(row->success_rate, 0.0);
    EXPECT_LE(row->success_rate, 1.0);
  }
  EXPECT_TRUE(fs::exists(dir / "embedding.ckpt.json"));
}

TEST(Run, OutputsAreWritten) {
  const fs::path dir = scratch("outputs");
  run_experiment(tiny("cl"), dir.string());
  for (const char* f : {"config.json", "metrics.jsonl", "timing.jsonl", "diagnostics.jsonl", "policy.ckpt.json",
                        "value.ckpt.json", "policy_log_std.json", "embedding.ckpt.json"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  // The written config reproduces the run's config.
  const nlohmann::json written = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_EQ(written, config_to_json(tiny("cl")));
  // Wall-clock time stays out of the metrics file.
  EXPECT_EQ(slurp(dir / "metrics.jsonl").find("wall_clock"), std::string::npos);
  const MlpParams policy = load_checkpoint((dir / "policy.ckpt.json").string());
  EXPECT_EQ(policy.input_dim(), LocomotionEnv::kObsDim);
}

// ---------------------------------------------------------------------------
// Random streams

TEST(Streams, StrategyDoesNotPerturbLaneStreams) {
  // Before the first refresh the ISB is empty, so every strategy restarts lanes
  // from the lanes' own p0 draws; the first row must therefore agree.
  ExperimentConfig vc = tiny("vanilla"), cc = tiny("cl");
  vc.locomotion.horizon = cc.locomotion.horizon = 12;
  const RunResult v = run_experiment(vc, scratch("iso_v").string());
  const RunResult c = run_experiment(cc, scratch("iso_c").string());
  ASSERT_TRUE(v.rows[0].mean_train_return.has_value());
  EXPECT_EQ(v.rows[0].mean_train_return, c.rows[0].mean_train_return);
  EXPECT_EQ(v.rows[0].episodes, c.rows[0].episodes);
}

TEST(Streams, LabelsAreIndependent) {
  int collisions = 0;
  for (int i = 0; i < 1000; ++i) {
    Rng a = seeded_rng(3, "env-lane-" + std::to_string(i));
    Rng b = seeded_rng(3, "env-lane-" + std::to_string(i + 1000));
    bool same = true;
    for (int k = 0; k < 10; ++k) same = same && a() == b();
    collisions += same ? 1 : 0;
  }
  EXPECT_EQ(collisions, 0);
}

// ---------------------------------------------------------------------------
// Comparison

TEST(Compare, KnownValuesGivePopulationStd) {
  const fs::path dir = scratch("compare");
  fs::create_directories(dir);
  write_metrics(dir / "a.jsonl", "cl", {5, 9});
  write_metrics(dir / "b.jsonl", "cl", {7, 11});
  write_metrics(dir / "v.jsonl", "vanilla", {1, 2});
  const auto s = compare_runs({(dir / "a.jsonl").string(), (dir / "b.jsonl").string(), (dir / "v.jsonl").string()},
                              (dir / "report.csv").string());
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].method, "cl");
  EXPECT_EQ(s[0].runs, 2u);
  EXPECT_DOUBLE_EQ(s[0].final_return.mean, 10.0);
  EXPECT_DOUBLE_EQ(s[0].final_return.std, 1.0);
  EXPECT_DOUBLE_EQ(s[0].auc.mean, 8.0);
  EXPECT_DOUBLE_EQ(s[1].final_return.std, 0.0);
  const std::string csv = slurp(dir / "report.csv");
  EXPECT_NE(csv.find("population standard deviation"), std::string::npos);
  EXPECT_NE(csv.find("task,method,runs,final_mean,final_std,auc_mean,auc_std,success_mean,success_std,flat_mean,flat_std"),
            std::string::npos);
  EXPECT_NE(csv.find("locomotion,cl,2,10,1,8,"), std::string::npos);
}

TEST(Compare, SingleAndDuplicatedRunsHaveZeroStd) {
  const fs::path dir = scratch("compare_dup");
  fs::create_directories(dir);
  write_metrics(dir / "a.jsonl", "obs", {3, 4.5});
  const auto one = compare_runs({(dir / "a.jsonl").string()}, (dir / "r1.csv").string());
  EXPECT_EQ(one[0].final_return.std, 0.0);
  const auto two = compare_runs({(dir / "a.jsonl").string(), (dir / "a.jsonl").string()}, (dir / "r2.csv").string());
  EXPECT_EQ(two[0].final_return.mean, 4.5);
  EXPECT_EQ(two[0].final_return.std, 0.0);
}

TEST(Compare, SchemaMismatchesAreErrors) {
  const fs::path dir = scratch("compare_bad");
  fs::create_directories(dir);
  write_metrics(dir / "a.jsonl", "cl", {1}, {"flat"});
  write_metrics(dir / "b.jsonl", "vanilla", {1}, {"flat", "rough"});
  EXPECT_THROW(compare_runs({(dir / "a.jsonl").string(), (dir / "b.jsonl").string()}, (dir / "r.csv").string()),
               SchemaError);
  std::ofstream(dir / "c.jsonl") << "{\"schema\":\"other\"}\n";
  EXPECT_THROW(compare_runs({(dir / "c.jsonl").string()}, (dir / "r.csv").string()), SchemaError);
  std::ofstream(dir / "d.jsonl") << nlohmann::json{{"schema", kMetricsSchema}, {"method", "cl"}, {"task", "racing"},
                                                   {"seed", 1}, {"validation_keys", {"track"}}}
                                        .dump()
                                 << "\n{\"iteration\":1}\n";
  EXPECT_THROW(compare_runs({(dir / "d.jsonl").string()}, (dir / "r.csv").string()), SchemaError);
  write_metrics(dir / "e.jsonl", "cl", {}, {"flat"});
  EXPECT_THROW(compare_runs({(dir / "e.jsonl").string()}, (dir / "r.csv").string()), SchemaError);
}

TEST(Compare, MetricsRowJsonRoundTrip) {
  MetricsRow r;
  r.iteration = 40;
  r.mean_train_return = 12.5;
  r.episodes = 3;
  r.total_episodes = 99;
  r.nominal_initializations = 20;
  r.isb_initializations = 83;
  r.isb_occupancy = 512;
  r.visited_occupancy = 4096;
  r.validated = true;
  r.validation_return = 7.25;
  r.success_rate = 0.5;
  r.validation_groups = {{"flat", 1.0}, {"rough", 2.0}};
  const MetricsRow b = metrics_row_from_json(metrics_row_to_json(r));
  EXPECT_EQ(metrics_row_to_json(b), metrics_row_to_json(r));
  MetricsRow plain;
  plain.iteration = 1;
  EXPECT_TRUE(metrics_row_to_json(plain).at("validation").is_null());
  EXPECT_TRUE(metrics_row_to_json(plain).at("mean_train_return").is_null());
}
