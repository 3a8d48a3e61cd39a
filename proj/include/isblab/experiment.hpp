#pragma once

// The train/validate loop for every strategy, its metrics files, and the
// multi-run summary.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "isblab/config.hpp"

namespace isblab {

inline constexpr const char* kMetricsSchema = "isb-lab-metrics-v1";

struct MetricsRow {
  long iteration = 0;  // completed training iterations
  std::optional<double> mean_train_return;
  int episodes = 0;  // finished during this iteration's rollout
  long total_episodes = 0;
  long nominal_initializations = 0;  // cumulative
  long isb_initializations = 0;      // cumulative
  std::size_t isb_occupancy = 0;
  std::size_t visited_occupancy = 0;
  bool validated = false;
  double validation_return = 0.0;
  std::vector<std::pair<std::string, double>> validation_groups;
  double success_rate = 0.0;
  double wall_clock_seconds = 0.0;  // written to timing.jsonl only
};

inline nlohmann::json metrics_row_to_json(const MetricsRow& r) {
  nlohmann::json j = {{"iteration", r.iteration},
                      {"mean_train_return", r.mean_train_return ? nlohmann::json(*r.mean_train_return) : nlohmann::json()},
                      {"episodes", r.episodes},
                      {"total_episodes", r.total_episodes},
                      {"nominal_initializations", r.nominal_initializations},
                      {"isb_initializations", r.isb_initializations},
                      {"isb_occupancy", r.isb_occupancy},
                      {"visited_occupancy", r.visited_occupancy}};
  if (r.validated) {
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [k, v] : r.validation_groups) groups[k] = v;
    j["validation"] = {{"mean_return", r.validation_return}, {"groups", groups}, {"success_rate", r.success_rate}};
  } else {
    j["validation"] = nullptr;
  }
  return j;
}

inline MetricsRow metrics_row_from_json(const nlohmann::json& j) {
  MetricsRow r;
  try {
    r.iteration = j.at("iteration").get<long>();
    if (!j.at("mean_train_return").is_null()) r.mean_train_return = j.at("mean_train_return").get<double>();
    r.episodes = j.at("episodes").get<int>();
    r.total_episodes = j.at("total_episodes").get<long>();
    r.nominal_initializations = j.at("nominal_initializations").get<long>();
    r.isb_initializations = j.at("isb_initializations").get<long>();
    r.isb_occupancy = j.at("isb_occupancy").get<std::size_t>();
    r.visited_occupancy = j.at("visited_occupancy").get<std::size_t>();
    const auto& v = j.at("validation");
    if (!v.is_null()) {
      r.validated = true;
      r.validation_return = v.at("mean_return").get<double>();
      r.success_rate = v.at("success_rate").get<double>();
      for (auto it = v.at("groups").begin(); it != v.at("groups").end(); ++it)
        r.validation_groups.emplace_back(it.key(), it.value().get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed metrics row: ") + e.what());
  }
  return r;
}

struct MetricsFile {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  std::vector<std::string> validation_keys;
  std::vector<MetricsRow> rows;

  std::vector<const MetricsRow*> validation_rows() const {
    std::vector<const MetricsRow*> out;
    for (const MetricsRow& r : rows)
      if (r.validated) out.push_back(&r);
    return out;
  }
  const MetricsRow* final_validation() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
      if (it->validated) return &*it;
    return nullptr;
  }
  const MetricsRow* validation_at(long iteration) const {
    for (const MetricsRow& r : rows)
      if (r.validated && r.iteration == iteration) return &r;
    return nullptr;
  }
  /// Mean validation return over all validation rows.
  double validation_auc() const {
    const auto v = validation_rows();
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (const MetricsRow* r : v) s += r->validation_return;
    return s / static_cast<double>(v.size());
  }
};

inline MetricsFile read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics file " + path);
  MetricsFile f;
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path + ": empty metrics file");
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path + ": bad header: " + e.what());
  }
  if (!head.is_object() || head.value("schema", "") != kMetricsSchema)
    throw SchemaError(path + ": expected schema " + kMetricsSchema);
  try {
    f.method = head.at("method").get<std::string>();
    f.task = head.at("task").get<std::string>();
    f.seed = head.at("seed").get<std::uint64_t>();
    f.validation_keys = head.at("validation_keys").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path + ": bad header: " + e.what());
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      f.rows.push_back(metrics_row_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path + ": " + e.what());
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Validation starts

struct ValidationPlan {
  std::vector<EnvState> starts;
  std::vector<std::string> group_of_start;
  std::vector<std::string> group_names;  // in first-appearance order
};

/// Locomotion: the center of every terrain type with four command headings.
/// Racing: the nominal start.
inline ValidationPlan make_validation_plan(const Environment& env) {
  ValidationPlan plan;
  if (const auto* loco = dynamic_cast<const LocomotionEnv*>(&env)) {
    const auto types = loco->terrain_center_types();
    plan.starts = locomotion_validation_starts(*loco);
    const std::size_t per = plan.starts.size() / types.size();
    for (std::size_t i = 0; i < plan.starts.size(); ++i) plan.group_of_start.push_back(terrain_name(types[i / per]));
    for (Terrain t : types) plan.group_names.push_back(terrain_name(t));
  } else {
    Rng unused(0);
    plan.starts = {env.nominal_state(unused)};
    plan.group_of_start = {"track"};
    plan.group_names = {"track"};
  }
  return plan;
}

// ---------------------------------------------------------------------------
// run_experiment

struct RunResult {
  std::string metrics_path;
  std::vector<MetricsRow> rows;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::pair<double, double> range_of(const std::vector<TrackedState>& t, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return {0.0, 0.0};
  double lo = t[idx.front()].delta_v, hi = lo;
  for (std::size_t i : idx) {
    lo = std::min(lo, t[i].delta_v);
    hi = std::max(hi, t[i].delta_v);
  }
  return {lo, hi};
}

}  // namespace detail

/// Runs the full loop and writes into out_dir:
///   metrics.jsonl      header line, then one MetricsRow per iteration
///   timing.jsonl       wall-clock seconds per iteration
///   diagnostics.jsonl  per-update losses and buffer diagnostics
///   config.json        the resolved configuration
///   isb_phase_<I>.jsonl, *.ckpt.json, validation_trajectories.jsonl when requested
inline RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  {
    std::ofstream c(dir / "config.json");
    c << config_to_json(cfg).dump(2) << '\n';
  }

  const std::unique_ptr<Environment> prototype = make_environment(cfg);
  const ValidationPlan plan = make_validation_plan(*prototype);
  const bool uses_isb = cfg.strategy != Strategy::Vanilla;
  const bool uses_cl = cfg.strategy == Strategy::Cl;

  Rng nets_rng = seeded_rng(cfg.seed, "nets");
  Rng ppo_rng = seeded_rng(cfg.seed, "ppo");
  Rng policy_rng = seeded_rng(cfg.seed, "policy");
  Rng sampler_rng = seeded_rng(cfg.seed, "sampler");
  Rng kmeans_rng = seeded_rng(cfg.seed, "kmeans");
  Rng track_rng = seeded_rng(cfg.seed, "track");
  Rng cl_rng = seeded_rng(cfg.seed, "cl");

  PpoLearner learner = make_learner(prototype->observation_dim(), prototype->action_dim(), cfg.policy_hidden,
                                    cfg.initial_log_std, cfg.ppo, nets_rng);
  if (cfg.value_hidden != cfg.policy_hidden) {
    learner.value = make_mlp(prototype->observation_dim(), cfg.value_hidden, 1, nets_rng);
    learner.value_opt = make_adam(learner.value, cfg.ppo.value_learning_rate);
  }
  std::vector<Lane> lanes = make_lanes(*prototype, cfg.num_envs, cfg.seed);

  std::optional<VisitedStatesBuffer> visited;
  std::shared_ptr<InitialStateBuffer> isb;
  ResetSampler sampler = nominal_sampler();
  if (uses_isb) {
    visited.emplace(static_cast<std::size_t>(cfg.effective_visited_capacity()));
    isb = std::make_shared<InitialStateBuffer>(static_cast<std::size_t>(cfg.isb_capacity));
    sampler = make_isb_sampler(isb, cfg.p, sampler_rng);
  }
  std::optional<MlpParams> embedding;
  std::optional<AdamState> embedding_opt;
  if (uses_cl) {
    Rng emb_rng = seeded_rng(cfg.seed, "embedding-init");
    embedding = make_embedding_net(prototype->observation_dim(), cfg.contrastive, emb_rng);
    embedding_opt = make_adam(*embedding, cfg.contrastive.learning_rate);
  }

  const std::string metrics_path = (dir / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path);
  std::ofstream timing(dir / "timing.jsonl");
  std::ofstream diagnostics;
  if (cfg.output.diagnostics) diagnostics.open(dir / "diagnostics.jsonl");
  std::ofstream val_traj;
  if (cfg.output.validation_trajectories) val_traj.open(dir / "validation_trajectories.jsonl");
  if (!metrics || !timing) throw std::runtime_error("cannot write into " + out_dir);
  metrics << nlohmann::json{{"schema", kMetricsSchema},
                            {"method", strategy_name(cfg.strategy)},
                            {"task", task_name(cfg.task)},
                            {"seed", cfg.seed},
                            {"validation_keys", plan.group_names}}
                 .dump()
          << '\n';

  RunResult result;
  result.metrics_path = metrics_path;
  long nominal_total = 0, isb_total = 0, episodes_total = 0;
  const auto t_start = std::chrono::steady_clock::now();

  try {
    for (long it = 0; it < cfg.iterations; ++it) {
      RolloutBatch batch = collect_rollout(learner.policy, learner.value, lanes, cfg.rollout_steps, sampler, policy_rng, it);
      compute_batch_advantages(batch, cfg.gae, cfg.ppo.normalize_advantages);
      nlohmann::json diag = {{"iteration", it + 1}};

      std::vector<std::size_t> cluster_sizes;
      if (uses_isb) {
        diag["visited_accepted"] = push_batch(*visited, batch, cfg.filters);
        std::vector<std::size_t> chosen;
        const auto n = static_cast<std::size_t>(cfg.isb_n);
        switch (cfg.strategy) {
          case Strategy::Random: chosen = select_random_indices(*visited, n, kmeans_rng); break;
          case Strategy::Obs:
            if (!visited->empty()) {
              const ClusterSelection sel = cluster_select(observation_matrix(*visited), n, cfg.kmeans_k, kKMeansMaxIters, kmeans_rng);
              chosen = sel.indices;
              cluster_sizes = sel.cluster_sizes;
            }
            break;
          case Strategy::Cl: {
            const ClusterSelection sel = select_cl_detail(*visited, n, cfg.kmeans_k, *embedding, kmeans_rng);
            chosen = sel.indices;
            cluster_sizes = sel.cluster_sizes;
            break;
          }
          case Strategy::Terminal: chosen = select_terminal_indices(*visited, n, cfg.terminal_window, kmeans_rng); break;
          case Strategy::Value: chosen = select_value_indices(*visited, n, learner.value); break;
          case Strategy::Vanilla: break;
        }
        refresh_isb(*isb, gather(*visited, chosen));
        diag["isb_selected"] = chosen.size();
        if (!cluster_sizes.empty()) diag["cluster_sizes"] = cluster_sizes;
      }

      std::vector<TrackedState> tracked;
      TailIndex tails;
      if (uses_cl) {
        tracked = track_states(*visited, batch, static_cast<std::size_t>(cfg.contrastive.tracked_count), track_rng);
        tails = build_tail_index(tracked, batch);
      }

      const UpdateLog log = ppo_update(learner, batch, cfg.ppo, ppo_rng, uses_cl ? &tails.observations : nullptr);
      diag["policy_loss"] = detail::mean_of(log.policy_loss);
      diag["value_loss"] = detail::mean_of(log.value_loss);
      diag["clip_fraction"] = detail::mean_of(log.clip_fraction);
      diag["log_std"] = vec_to_json(learner.policy.log_std);

      if (uses_cl && !tracked.empty()) {
        std::vector<std::vector<DeltaVEstimate>> per_step;
        per_step.reserve(log.value_snapshots.size());
        for (const Vec& snap : log.value_snapshots) per_step.push_back(delta_v_from_snapshot(tracked, tails, snap, batch, cfg.gae));
        aggregate_delta_v(tracked, per_step, cfg.contrastive.aggregation);
        EmbeddingTrainResult tr = train_embedding(std::move(*embedding), tracked, cfg.contrastive, std::move(*embedding_opt), cl_rng);
        embedding = std::move(tr.net);
        embedding_opt = std::move(tr.opt);
        const auto [plo, phi] = detail::range_of(tracked, tr.sets.positive);
        const auto [nlo, nhi] = detail::range_of(tracked, tr.sets.negative);
        diag["cl"] = {{"tracked", tracked.size()},
                      {"k", tr.sets.k},
                      {"k_reduced", tr.sets.reduced},
                      {"loss_first", tr.losses.empty() ? 0.0 : tr.losses.front()},
                      {"loss_last", tr.losses.empty() ? 0.0 : tr.losses.back()},
                      {"positive_delta_v", {plo, phi}},
                      {"negative_delta_v", {nlo, nhi}}};
      }

      MetricsRow row;
      row.iteration = it + 1;
      row.episodes = static_cast<int>(batch.episode_returns.size());
      if (!batch.episode_returns.empty()) row.mean_train_return = detail::mean_of(batch.episode_returns);
      episodes_total += row.episodes;
      nominal_total += batch.nominal_initializations;
      isb_total += batch.isb_initializations;
      row.total_episodes = episodes_total;
      row.nominal_initializations = nominal_total;
      row.isb_initializations = isb_total;
      row.isb_occupancy = isb ? isb->size() : 0;
      row.visited_occupancy = visited ? visited->size() : 0;

      if (row.iteration % cfg.validation_interval == 0) {
        const EvalResult ev = evaluate_policy(learner.policy, *prototype, plan.starts, cfg.validation_episodes,
                                              val_traj.is_open() ? &val_traj : nullptr);
        row.validated = true;
        row.validation_return = ev.mean_return;
        row.success_rate = ev.success_rate;
        for (const std::string& g : plan.group_names) {
          double s = 0.0;
          int c = 0;
          for (std::size_t i = 0; i < plan.starts.size(); ++i)
            if (plan.group_of_start[i] == g) {
              s += ev.per_init_return[i];
              ++c;
            }
          row.validation_groups.emplace_back(g, s / c);
        }
      }
      row.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

      metrics << metrics_row_to_json(row).dump() << '\n';
      timing << nlohmann::json{{"iteration", row.iteration}, {"wall_clock_seconds", row.wall_clock_seconds}}.dump() << '\n';
      if (diagnostics.is_open()) diagnostics << diag.dump() << '\n';
      result.rows.push_back(std::move(row));

      for (long dump_it : cfg.output.dump_isb_iterations)
        if (dump_it == it + 1) {
          const std::string name = "isb_phase_" + std::to_string(dump_it) + ".jsonl";
          if (isb) dump_records((dir / name).string(), *isb);
          else dump_records((dir / name).string(), std::vector<StateRecord>{});
        }
    }
  } catch (const NumericError& e) {
    metrics.flush();
    timing.flush();
    if (diagnostics.is_open()) diagnostics.flush();
    throw NumericError(std::string("run aborted at iteration ") + std::to_string(result.rows.size() + 1) + ": " + e.what());
  }

  if (cfg.output.checkpoints) {
    save_checkpoint((dir / "policy.ckpt.json").string(), learner.policy.mean);
    save_checkpoint((dir / "value.ckpt.json").string(), learner.value);
    std::ofstream ls(dir / "policy_log_std.json");
    ls << vec_to_json(learner.policy.log_std).dump() << '\n';
    if (embedding) save_checkpoint((dir / "embedding.ckpt.json").string(), *embedding);
  }
  return result;
}

// ---------------------------------------------------------------------------
// compare_runs

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

struct MethodSummary {
  std::string method;
  std::string task;
  std::size_t runs = 0;
  MeanStd final_return;
  MeanStd auc;
  MeanStd success_rate;
  std::vector<std::pair<std::string, MeanStd>> groups;
};

/// Groups files by (task, method) and writes one CSV line per group.
inline std::vector<MethodSummary> compare_runs(const std::vector<std::string>& metrics_paths, const std::string& report_path) {
  if (metrics_paths.empty()) throw std::invalid_argument("compare_runs: no metrics files");
  std::map<std::pair<std::string, std::string>, std::vector<MetricsFile>> by_method;
  std::map<std::string, std::vector<std::string>> keys_of_task;
  for (const std::string& p : metrics_paths) {
    MetricsFile f = read_metrics(p);
    auto [it, inserted] = keys_of_task.emplace(f.task, f.validation_keys);
    if (!inserted && it->second != f.validation_keys)
      throw SchemaError(p + ": validation keys differ from other " + f.task + " runs");
    if (!f.final_validation()) throw SchemaError(p + ": no validation rows");
    by_method[{f.task, f.method}].push_back(std::move(f));
  }

  std::vector<MethodSummary> out;
  for (const auto& [key, files] : by_method) {
    MethodSummary s;
    s.task = key.first;
    s.method = key.second;
    s.runs = files.size();
    std::vector<double> fin, auc, succ;
    for (const MetricsFile& f : files) {
      fin.push_back(f.final_validation()->validation_return);
      auc.push_back(f.validation_auc());
      succ.push_back(f.final_validation()->success_rate);
    }
    s.final_return = mean_std(fin);
    s.auc = mean_std(auc);
    s.success_rate = mean_std(succ);
    for (const std::string& g : keys_of_task.at(s.task)) {
      std::vector<double> v;
      for (const MetricsFile& f : files)
        for (const auto& [name, val] : f.final_validation()->validation_groups)
          if (name == g) v.push_back(val);
      s.groups.emplace_back(g, mean_std(v));
    }
    out.push_back(std::move(s));
  }

  std::ofstream rep(report_path);
  if (!rep) throw std::runtime_error("cannot write " + report_path);
  rep << "# mean and population standard deviation over runs; final = last validation row\n";
  rep << "task,method,runs,final_mean,final_std,auc_mean,auc_std,success_mean,success_std";
  const auto& widest = *std::max_element(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.groups.size() < b.groups.size(); });
  const bool single_task = keys_of_task.size() == 1;
  if (single_task)
    for (const auto& [g, ms] : widest.groups) rep << ',' << g << "_mean," << g << "_std";
  rep << '\n';
  rep << std::setprecision(10);
  for (const auto& s : out) {
    rep << s.task << ',' << s.method << ',' << s.runs << ',' << s.final_return.mean << ',' << s.final_return.std << ','
        << s.auc.mean << ',' << s.auc.std << ',' << s.success_rate.mean << ',' << s.success_rate.std;
    if (single_task)
      for (const auto& [g, ms] : s.groups) rep << ',' << ms.mean << ',' << ms.std;
    rep << '\n';
  }
  return out;
}

}  // namespace isblab
