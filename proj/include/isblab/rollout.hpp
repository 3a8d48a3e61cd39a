#pragma once

// Vectorized on-policy data collection. Lanes keep their episodes running
// across rollout phases; a finished lane is re-initialized through the reset
// sampler, which is where an initial state buffer plugs in.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "isblab/env.hpp"
#include "isblab/gae.hpp"
#include "isblab/policy.hpp"

namespace isblab {

enum class Provenance : std::uint8_t { Nominal, Isb };

inline const char* provenance_name(Provenance p) { return p == Provenance::Nominal ? "nominal-start" : "isb-start"; }

inline Provenance parse_provenance(const std::string& s) {
  if (s == "nominal-start") return Provenance::Nominal;
  if (s == "isb-start") return Provenance::Isb;
  throw SchemaError("unknown provenance '" + s + "'");
}

struct InitialState {
  EnvState state;
  Provenance provenance = Provenance::Nominal;
};

/// Chooses where a finished lane restarts.
using ResetSampler = std::function<InitialState(Environment&)>;

inline ResetSampler nominal_sampler() {
  return [](Environment& env) { return InitialState{env.draw_nominal(), Provenance::Nominal}; };
}

struct Lane {
  std::unique_ptr<Environment> env;
  Provenance provenance = Provenance::Nominal;
  double episode_return = 0.0;  // since this lane's last initialization
  Vec observation;
};

inline std::vector<Lane> make_lanes(const Environment& prototype, int count, std::uint64_t seed) {
  std::vector<Lane> lanes;
  lanes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Lane lane;
    lane.env = prototype.clone();
    lane.env->seed(seed, "env-lane-" + std::to_string(i));
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

inline void initialize_lane(Lane& lane, const ResetSampler& sampler) {
  InitialState init = sampler(*lane.env);
  lane.observation = lane.env->reset(init.state);
  lane.provenance = init.provenance;
  lane.episode_return = 0.0;
}

/// Flat storage: sample (lane, t) lives at column/index lane * steps + t.
struct RolloutBatch {
  long iteration = 0;
  int num_lanes = 0;
  int steps = 0;
  Mat observations;
  Mat actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<Termination> terminations;
  std::vector<double> values;
  std::vector<EnvState> states;  // snapshot taken before the step
  std::vector<Provenance> provenance;
  std::vector<double> bootstrap_values;  // per lane, V after the final step
  Mat final_observations;                // per lane, observation after the final step

  std::vector<double> advantages;
  std::vector<double> returns;

  // Episodes finished during this phase.
  std::vector<double> episode_returns;
  std::vector<Termination> episode_terminations;
  int nominal_initializations = 0;
  int isb_initializations = 0;

  std::size_t size() const { return rewards.size(); }
  std::size_t index(int lane, int t) const {
    return static_cast<std::size_t>(lane) * static_cast<std::size_t>(steps) + static_cast<std::size_t>(t);
  }
};

/// Runs `steps` transitions on every lane with a stochastic policy.
inline RolloutBatch collect_rollout(const GaussianPolicy& policy, const MlpParams& value_net, std::vector<Lane>& lanes,
                                    int steps, const ResetSampler& sampler, Rng& action_rng, long iteration = 0) {
  if (lanes.empty() || steps < 1) throw ShapeError("collect_rollout needs at least one lane and one step");
  const int num_lanes = static_cast<int>(lanes.size());
  const Eigen::Index obs_dim = lanes.front().env->observation_dim();
  const Eigen::Index act_dim = lanes.front().env->action_dim();
  if (policy.mean.input_dim() != obs_dim || policy.action_dim() != act_dim || value_net.input_dim() != obs_dim)
    throw ShapeError("policy/value dimensions do not match the environment");

  RolloutBatch b;
  for (Lane& lane : lanes) {
    if (lane.observation.size() == 0 || lane.env->done()) {
      initialize_lane(lane, sampler);
      (lane.provenance == Provenance::Isb ? b.isb_initializations : b.nominal_initializations) += 1;
    }
  }

  b.iteration = iteration;
  b.num_lanes = num_lanes;
  b.steps = steps;
  const std::size_t n = static_cast<std::size_t>(num_lanes) * static_cast<std::size_t>(steps);
  b.observations.resize(obs_dim, static_cast<Eigen::Index>(n));
  b.actions.resize(act_dim, static_cast<Eigen::Index>(n));
  b.log_probs.resize(n);
  b.rewards.resize(n);
  b.dones.resize(n);
  b.terminations.resize(n);
  b.values.resize(n);
  b.states.resize(n);
  b.provenance.resize(n);

  Mat obs(obs_dim, num_lanes);
  for (int t = 0; t < steps; ++t) {
    for (int l = 0; l < num_lanes; ++l) obs.col(l) = lanes[static_cast<std::size_t>(l)].observation;
    const Mat means = mlp_forward_batch(policy.mean, obs);
    const Mat vals = mlp_forward_batch(value_net, obs);
    for (int l = 0; l < num_lanes; ++l) {
      Lane& lane = lanes[static_cast<std::size_t>(l)];
      const std::size_t i = b.index(l, t);
      const Vec mean = means.col(l);
      const Vec action = sample_action(mean, policy.log_std, action_rng);
      b.observations.col(static_cast<Eigen::Index>(i)) = lane.observation;
      b.actions.col(static_cast<Eigen::Index>(i)) = action;
      b.log_probs[i] = gaussian_log_prob(mean, policy.log_std, action);
      b.values[i] = vals(0, l);
      b.states[i] = lane.env->snapshot();
      b.provenance[i] = lane.provenance;

      const StepResult r = lane.env->step(action);
      b.rewards[i] = r.reward;
      b.dones[i] = r.done ? 1 : 0;
      b.terminations[i] = r.termination;
      lane.episode_return += r.reward;
      lane.observation = r.observation;
      if (r.done) {
        b.episode_returns.push_back(lane.episode_return);
        b.episode_terminations.push_back(r.termination);
        initialize_lane(lane, sampler);
        (lane.provenance == Provenance::Isb ? b.isb_initializations : b.nominal_initializations) += 1;
      }
    }
  }

  b.final_observations.resize(obs_dim, num_lanes);
  for (int l = 0; l < num_lanes; ++l) b.final_observations.col(l) = lanes[static_cast<std::size_t>(l)].observation;
  const Mat boot = mlp_forward_batch(value_net, b.final_observations);
  b.bootstrap_values.resize(static_cast<std::size_t>(num_lanes));
  for (int l = 0; l < num_lanes; ++l) b.bootstrap_values[static_cast<std::size_t>(l)] = boot(0, l);
  return b;
}

/// Fills batch.advantages (normalized when requested) and batch.returns lane by lane.
inline void compute_batch_advantages(RolloutBatch& b, const GaeConfig& cfg, bool normalize = true) {
  b.advantages.assign(b.size(), 0.0);
  b.returns.assign(b.size(), 0.0);
  for (int l = 0; l < b.num_lanes; ++l) {
    const std::size_t off = b.index(l, 0);
    const auto len = static_cast<std::size_t>(b.steps);
    const GaeResult g = compute_gae(std::span(b.rewards).subspan(off, len), std::span(b.values).subspan(off, len),
                                    std::span(b.dones).subspan(off, len),
                                    b.bootstrap_values[static_cast<std::size_t>(l)], cfg);
    std::copy(g.advantages.begin(), g.advantages.end(), b.advantages.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(g.returns.begin(), g.returns.end(), b.returns.begin() + static_cast<std::ptrdiff_t>(off));
  }
  if (normalize) normalize_advantages(b.advantages);
}

}  // namespace isblab
