#pragma once

// Declarative description of one seeded run, read from and written to JSON.

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "isblab/clbuffer.hpp"
#include "isblab/locomotion.hpp"
#include "isblab/ppo.hpp"
#include "isblab/racing.hpp"

namespace isblab {

struct OutputOptions {
  std::vector<long> dump_isb_iterations;  // write isb_phase_<I>.jsonl after these iterations
  bool checkpoints = true;                // final policy/value/embedding networks
  bool diagnostics = true;                // per-iteration update diagnostics
  bool validation_trajectories = false;   // JSON-lines transitions of every validation episode
};

struct ExperimentConfig {
  Task task = Task::Locomotion;
  Strategy strategy = Strategy::Vanilla;
  std::uint64_t seed = 0;
  long iterations = 300;
  int num_envs = 64;
  int rollout_steps = 64;
  long validation_interval = 20;
  int validation_episodes = 1;

  double p = 0.8;
  int isb_n = 256;
  int kmeans_k = 64;
  int visited_capacity = 0;  // 0: num_envs * rollout_steps
  int isb_capacity = 4096;
  FilterConfig filters;
  int terminal_window = 5;

  PpoConfig ppo;
  GaeConfig gae;
  ContrastiveConfig contrastive;
  std::vector<Eigen::Index> policy_hidden = {128, 128};
  std::vector<Eigen::Index> value_hidden = {128, 128};
  double initial_log_std = -0.5;

  bool prior_init = false;
  LocomotionConfig locomotion;
  RacingConfig racing;
  OutputOptions output;

  int effective_visited_capacity() const { return visited_capacity > 0 ? visited_capacity : num_envs * rollout_steps; }

  void validate() const {
    if (iterations < 1 || num_envs < 1 || rollout_steps < 1 || validation_interval < 1 || validation_episodes < 1)
      throw ConfigError("iterations, num_envs, rollout_steps, validation_interval and validation_episodes must be positive");
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("isb.p must lie in [0, 1]");
    if (isb_n < 1 || kmeans_k < 1 || isb_capacity < 1 || visited_capacity < 0)
      throw ConfigError("isb.n, isb.k and isb capacities must be positive");
    if (terminal_window < 0) throw ConfigError("isb.terminal_window must be >= 0");
    gae.validate();
    if (policy_hidden.empty() || value_hidden.empty()) throw ConfigError("network hidden layer lists must not be empty");
    for (auto h : policy_hidden)
      if (h < 1) throw ConfigError("hidden widths must be positive");
    for (auto h : value_hidden)
      if (h < 1) throw ConfigError("hidden widths must be positive");
    filters.validate();
    ppo.validate();
    if (strategy == Strategy::Cl) contrastive.validate();
    if (prior_init && task != Task::Locomotion) throw ConfigError("prior_init is only defined for locomotion");
  }
};

namespace detail {

/// Reads keys from a JSON object and rejects any it did not consume.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "config");
  std::string task = task_name(c.task), strategy = strategy_name(c.strategy);
  r.get("task", task);
  r.get("strategy", strategy);  // alias for isb.strategy
  if (const auto* isb = j.is_object() && j.contains("isb") ? &j.at("isb") : nullptr)
    if (isb->is_object() && isb->contains("strategy")) {
      if (!isb->at("strategy").is_string()) throw ConfigError("isb.strategy must be a string");
      strategy = isb->at("strategy").get<std::string>();
    }
  c.task = parse_task(task);
  c.strategy = parse_strategy(strategy);
  r.get("seed", c.seed);
  r.get("iterations", c.iterations);
  r.get("num_envs", c.num_envs);
  r.get("rollout_steps", c.rollout_steps);
  r.get("validation_interval", c.validation_interval);
  r.get("validation_episodes", c.validation_episodes);
  r.get("prior_init", c.prior_init);
  r.get("policy_hidden", c.policy_hidden);
  r.get("value_hidden", c.value_hidden);
  r.get("initial_log_std", c.initial_log_std);

  // Racing keeps only states from nominal-start trajectories unless told otherwise.
  c.filters.require_nominal_start_trajectory = c.task == Task::Racing;

  if (const auto* isb = r.child("isb")) {
    detail::ObjectReader s(*isb, "isb");
    std::string ignored;
    s.get("strategy", ignored);
    s.get("p", c.p);
    s.get("n", c.isb_n);
    s.get("k", c.kmeans_k);
    s.get("visited_capacity", c.visited_capacity);
    s.get("capacity", c.isb_capacity);
    s.get("terminal_window", c.terminal_window);
    if (const auto* f = s.child("filters")) {
      detail::ObjectReader fr(*f, "isb.filters");
      fr.get("min_episode_step", c.filters.min_episode_step);
      fr.get("require_nonneg_reward", c.filters.require_nonneg_reward);
      fr.get("require_nominal_start_trajectory", c.filters.require_nominal_start_trajectory);
      fr.finish();
    }
    s.finish();
  }
  if (const auto* ppo = r.child("ppo")) {
    detail::ObjectReader s(*ppo, "ppo");
    s.get("epochs", c.ppo.epochs);
    s.get("minibatches", c.ppo.minibatches);
    s.get("clip_ratio", c.ppo.clip_ratio);
    s.get("learning_rate", c.ppo.learning_rate);
    s.get("value_learning_rate", c.ppo.value_learning_rate);
    s.get("entropy_coef", c.ppo.entropy_coef);
    s.get("max_grad_norm", c.ppo.max_grad_norm);
    s.get("normalize_advantages", c.ppo.normalize_advantages);
    s.finish();
  }
  if (const auto* gae = r.child("gae")) {
    detail::ObjectReader s(*gae, "gae");
    s.get("gamma", c.gae.gamma);
    s.get("lambda", c.gae.lam);
    s.finish();
  }
  if (const auto* cl = r.child("contrastive")) {
    detail::ObjectReader s(*cl, "contrastive");
    s.get("top_k", c.contrastive.top_k);
    s.get("temperature", c.contrastive.temperature);
    s.get("embedding_dim", c.contrastive.embedding_dim);
    s.get("train_steps_per_update", c.contrastive.train_steps_per_update);
    s.get("tracked_count", c.contrastive.tracked_count);
    s.get("hidden", c.contrastive.hidden);
    s.get("learning_rate", c.contrastive.learning_rate);
    std::string agg = aggregation_name(c.contrastive.aggregation);
    s.get("aggregation", agg);
    c.contrastive.aggregation = parse_aggregation(agg);
    s.finish();
  }
  if (const auto* loco = r.child("locomotion")) {
    detail::ObjectReader s(*loco, "locomotion");
    auto& L = c.locomotion;
    s.get("tile_size", L.tile_size);
    s.get("horizon", L.horizon);
    s.get("dt", L.dt);
    s.get("spawn_noise", L.spawn_noise);
    s.get("cmd_speed_min", L.cmd_speed_min);
    s.get("cmd_speed_max", L.cmd_speed_max);
    s.get("slope", L.slope);
    s.get("rough_amplitude", L.rough_amplitude);
    s.get("step_height", L.step_height);
    s.get("crash_speed", L.crash_speed);
    s.get("crash_penalty", L.crash_penalty);
    s.get("heading_noise", L.heading_noise);
    s.get("max_accel", L.max_accel);
    s.get("gravity", L.gravity);
    s.get("rough_wavelength", L.rough_wavelength);
    s.get("rough_traction", L.rough_traction);
    s.get("step_width", L.step_width);
    s.get("crash_vertical_speed", L.crash_vertical_speed);
    s.get("lin_sigma", L.lin_sigma);
    s.get("action_cost", L.action_cost);
    if (s.has("layout")) {
      std::vector<std::string> names;
      s.get("layout", names);
      int grid = 0;
      while (grid * grid < static_cast<int>(names.size())) ++grid;
      if (grid * grid != static_cast<int>(names.size())) throw ConfigError("locomotion.layout must be a square grid");
      L.grid = grid;
      L.layout.clear();
      for (const auto& n : names) L.layout.push_back(parse_terrain(n));
    }
    s.finish();
  }
  if (const auto* race = r.child("racing")) {
    detail::ObjectReader s(*race, "racing");
    auto& R = c.racing;
    s.get("waypoints", R.waypoints);
    s.get("gate_half_width", R.gate_half_width);
    s.get("corridor_half_width", R.corridor_half_width);
    s.get("horizon", R.horizon);
    s.get("dt", R.dt);
    s.get("max_thrust", R.max_thrust);
    s.get("drag", R.drag);
    s.get("max_yaw_rate", R.max_yaw_rate);
    s.get("gate_bonus", R.gate_bonus);
    s.get("crash_penalty", R.crash_penalty);
    s.finish();
  }
  if (const auto* out = r.child("output")) {
    detail::ObjectReader s(*out, "output");
    s.get("dump_isb_iterations", c.output.dump_isb_iterations);
    s.get("checkpoints", c.output.checkpoints);
    s.get("diagnostics", c.output.diagnostics);
    s.get("validation_trajectories", c.output.validation_trajectories);
    s.finish();
  }
  r.finish();
  c.locomotion.prior_init = c.prior_init;
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json layout = nlohmann::json::array();
  for (Terrain t : c.locomotion.layout) layout.push_back(terrain_name(t));
  return {
      {"task", task_name(c.task)},
      {"seed", c.seed},
      {"iterations", c.iterations},
      {"num_envs", c.num_envs},
      {"rollout_steps", c.rollout_steps},
      {"validation_interval", c.validation_interval},
      {"validation_episodes", c.validation_episodes},
      {"prior_init", c.prior_init},
      {"policy_hidden", c.policy_hidden},
      {"value_hidden", c.value_hidden},
      {"initial_log_std", c.initial_log_std},
      {"isb",
       {{"strategy", strategy_name(c.strategy)},
        {"p", c.p},
        {"n", c.isb_n},
        {"k", c.kmeans_k},
        {"visited_capacity", c.visited_capacity},
        {"capacity", c.isb_capacity},
        {"terminal_window", c.terminal_window},
        {"filters",
         {{"min_episode_step", c.filters.min_episode_step},
          {"require_nonneg_reward", c.filters.require_nonneg_reward},
          {"require_nominal_start_trajectory", c.filters.require_nominal_start_trajectory}}}}},
      {"ppo",
       {{"epochs", c.ppo.epochs},
        {"minibatches", c.ppo.minibatches},
        {"clip_ratio", c.ppo.clip_ratio},
        {"learning_rate", c.ppo.learning_rate},
        {"value_learning_rate", c.ppo.value_learning_rate},
        {"entropy_coef", c.ppo.entropy_coef},
        {"max_grad_norm", c.ppo.max_grad_norm},
        {"normalize_advantages", c.ppo.normalize_advantages}}},
      {"gae", {{"gamma", c.gae.gamma}, {"lambda", c.gae.lam}}},
      {"contrastive",
       {{"top_k", c.contrastive.top_k},
        {"temperature", c.contrastive.temperature},
        {"embedding_dim", c.contrastive.embedding_dim},
        {"train_steps_per_update", c.contrastive.train_steps_per_update},
        {"tracked_count", c.contrastive.tracked_count},
        {"hidden", c.contrastive.hidden},
        {"learning_rate", c.contrastive.learning_rate},
        {"aggregation", aggregation_name(c.contrastive.aggregation)}}},
      {"locomotion",
       {{"tile_size", c.locomotion.tile_size},
        {"horizon", c.locomotion.horizon},
        {"dt", c.locomotion.dt},
        {"spawn_noise", c.locomotion.spawn_noise},
        {"cmd_speed_min", c.locomotion.cmd_speed_min},
        {"cmd_speed_max", c.locomotion.cmd_speed_max},
        {"slope", c.locomotion.slope},
        {"rough_amplitude", c.locomotion.rough_amplitude},
        {"step_height", c.locomotion.step_height},
        {"crash_speed", c.locomotion.crash_speed},
        {"crash_penalty", c.locomotion.crash_penalty},
        {"heading_noise", c.locomotion.heading_noise},
        {"max_accel", c.locomotion.max_accel},
        {"gravity", c.locomotion.gravity},
        {"rough_wavelength", c.locomotion.rough_wavelength},
        {"rough_traction", c.locomotion.rough_traction},
        {"step_width", c.locomotion.step_width},
        {"crash_vertical_speed", c.locomotion.crash_vertical_speed},
        {"lin_sigma", c.locomotion.lin_sigma},
        {"action_cost", c.locomotion.action_cost},
        {"layout", layout}}},
      {"racing",
       {{"waypoints", c.racing.waypoints},
        {"gate_half_width", c.racing.gate_half_width},
        {"corridor_half_width", c.racing.corridor_half_width},
        {"horizon", c.racing.horizon},
        {"dt", c.racing.dt},
        {"max_thrust", c.racing.max_thrust},
        {"drag", c.racing.drag},
        {"max_yaw_rate", c.racing.max_yaw_rate},
        {"gate_bonus", c.racing.gate_bonus},
        {"crash_penalty", c.racing.crash_penalty}}},
      {"output",
       {{"dump_isb_iterations", c.output.dump_isb_iterations},
        {"checkpoints", c.output.checkpoints},
        {"diagnostics", c.output.diagnostics},
        {"validation_trajectories", c.output.validation_trajectories}}},
  };
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

inline std::unique_ptr<Environment> make_environment(const ExperimentConfig& c) {
  if (c.task == Task::Locomotion) {
    LocomotionConfig lc = c.locomotion;
    lc.prior_init = c.prior_init;
    return std::make_unique<LocomotionEnv>(lc);
  }
  return std::make_unique<RacingEnv>(c.racing);
}

}  // namespace isblab
