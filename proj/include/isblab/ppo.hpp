#pragma once

// Clipped PPO with separate policy and value networks, plus deterministic
// policy evaluation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "isblab/rollout.hpp"

namespace isblab {

struct PpoConfig {
  int epochs = 4;
  int minibatches = 4;
  double clip_ratio = 0.2;
  double learning_rate = 3e-4;
  double value_learning_rate = 3e-4;
  double entropy_coef = 0.0;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
  bool normalize_advantages = true;

  void validate() const {
    if (epochs < 1 || minibatches < 1) throw ConfigError("ppo epochs and minibatches must be positive");
    if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ConfigError("ppo clip ratio must lie in (0, 1)");
    if (!(learning_rate > 0.0) || !(value_learning_rate > 0.0)) throw ConfigError("ppo learning rates must be positive");
  }
};

struct PpoLearner {
  GaussianPolicy policy;
  MlpParams value;
  AdamState policy_opt;
  VecAdam log_std_opt;
  AdamState value_opt;
};

inline PpoLearner make_learner(Eigen::Index obs_dim, Eigen::Index act_dim, const std::vector<Eigen::Index>& hidden,
                               double initial_log_std, const PpoConfig& cfg, Rng& rng) {
  PpoLearner l;
  l.policy = make_policy(obs_dim, act_dim, hidden, initial_log_std, rng);
  l.value = make_mlp(obs_dim, hidden, 1, rng);
  l.policy_opt = make_adam(l.policy.mean, cfg.learning_rate);
  l.log_std_opt = VecAdam::for_size(act_dim, cfg.learning_rate);
  l.value_opt = make_adam(l.value, cfg.value_learning_rate);
  return l;
}

/// Derivative of min(r A, clip(r, 1 - eps, 1 + eps) A) with respect to log pi_new,
/// where r = pi_new / pi_old. Zero wherever the clipped branch is the active one.
inline double clipped_surrogate_grad(double ratio, double advantage, double clip) {
  if ((advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip)) return 0.0;
  return advantage * ratio;
}

inline double clipped_surrogate(double ratio, double advantage, double clip) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage);
}

struct PpoLosses {
  double policy_loss = 0.0;  // negative clipped surrogate minus entropy bonus
  double value_loss = 0.0;   // 0.5 * mean squared error
  double entropy = 0.0;
  double combined() const { return policy_loss + value_loss; }
};

/// Losses of the current learner on a subset of the batch.
inline PpoLosses evaluate_ppo_losses(const PpoLearner& l, const RolloutBatch& b, const PpoConfig& cfg,
                                     const std::vector<std::size_t>& idx) {
  PpoLosses out;
  if (idx.empty()) return out;
  Mat obs(b.observations.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) obs.col(static_cast<Eigen::Index>(k)) = b.observations.col(static_cast<Eigen::Index>(idx[k]));
  const Mat means = mlp_forward_batch(l.policy.mean, obs);
  const Mat vals = mlp_forward_batch(l.value, obs);
  const double inv = 1.0 / static_cast<double>(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    const double lp = gaussian_log_prob(means.col(c), l.policy.log_std, b.actions.col(static_cast<Eigen::Index>(idx[k])));
    const double ratio = std::exp(lp - b.log_probs[idx[k]]);
    out.policy_loss -= inv * clipped_surrogate(ratio, b.advantages[idx[k]], cfg.clip_ratio);
    const double err = vals(0, c) - b.returns[idx[k]];
    out.value_loss += inv * 0.5 * err * err;
  }
  out.entropy = gaussian_entropy(l.policy.log_std);
  out.policy_loss -= cfg.entropy_coef * out.entropy;
  return out;
}

struct UpdateLog {
  // One entry per gradient step.
  std::vector<double> policy_loss;
  std::vector<double> value_loss;
  std::vector<double> entropy;
  std::vector<double> clip_fraction;
  // Row k: value-network predictions on the tracked observations after step k.
  std::vector<Vec> value_snapshots;

  std::size_t gradient_steps() const { return policy_loss.size(); }
};

namespace detail {

inline double clip_norm(MlpGrad& g, Vec* extra, double max_norm) {
  double sq = g.squared_norm();
  if (extra) sq += extra->squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    g.scale(f);
    if (extra) *extra *= f;
  }
  return norm;
}

}  // namespace detail

/// Epochs of shuffled minibatch updates. Requires batch.advantages and
/// batch.returns. When tracked_observations is given, the value network's
/// predictions on them are logged after every gradient step.
inline UpdateLog ppo_update(PpoLearner& l, const RolloutBatch& b, const PpoConfig& cfg, Rng& rng,
                            const Mat* tracked_observations = nullptr) {
  cfg.validate();
  if (b.advantages.size() != b.size() || b.returns.size() != b.size())
    throw ShapeError("ppo_update: batch advantages/returns not computed");
  UpdateLog log;
  std::vector<std::size_t> order(b.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t mb_size = std::max<std::size_t>(1, b.size() / static_cast<std::size_t>(cfg.minibatches));
  const Eigen::Index act_dim = l.policy.action_dim();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int m = 0; m < cfg.minibatches; ++m) {
      const std::size_t begin = static_cast<std::size_t>(m) * mb_size;
      if (begin >= order.size()) break;
      const std::size_t end = m + 1 == cfg.minibatches ? order.size() : std::min(order.size(), begin + mb_size);
      const auto count = static_cast<Eigen::Index>(end - begin);
      const double inv = 1.0 / static_cast<double>(count);

      Mat obs(b.observations.rows(), count);
      for (Eigen::Index k = 0; k < count; ++k)
        obs.col(k) = b.observations.col(static_cast<Eigen::Index>(order[begin + static_cast<std::size_t>(k)]));

      // Policy.
      const ForwardCache pc = mlp_forward_cached(l.policy.mean, obs);
      const Vec inv_var = (-2.0 * l.policy.log_std).array().exp();
      Mat dmean(act_dim, count);
      Vec dlog_std = Vec::Zero(act_dim);
      double surrogate = 0.0;
      int clipped = 0;
      for (Eigen::Index k = 0; k < count; ++k) {
        const std::size_t i = order[begin + static_cast<std::size_t>(k)];
        const Vec diff = b.actions.col(static_cast<Eigen::Index>(i)) - pc.output().col(k);
        const double lp = gaussian_log_prob(pc.output().col(k), l.policy.log_std, b.actions.col(static_cast<Eigen::Index>(i)));
        const double ratio = std::exp(lp - b.log_probs[i]);
        const double adv = b.advantages[i];
        surrogate += inv * clipped_surrogate(ratio, adv, cfg.clip_ratio);
        const double g = clipped_surrogate_grad(ratio, adv, cfg.clip_ratio);
        if (g == 0.0 && adv != 0.0) ++clipped;
        // loss = -mean(surrogate): d loss / d log pi = -g / count
        dmean.col(k) = (-inv * g) * diff.cwiseProduct(inv_var);
        dlog_std.array() += (-inv * g) * (diff.array().square() * inv_var.array() - 1.0);
      }
      const double entropy = gaussian_entropy(l.policy.log_std);
      const double policy_loss = -surrogate - cfg.entropy_coef * entropy;
      dlog_std.array() -= cfg.entropy_coef;

      // Value.
      const ForwardCache vc = mlp_forward_cached(l.value, obs);
      Mat dvalue(1, count);
      double value_loss = 0.0;
      for (Eigen::Index k = 0; k < count; ++k) {
        const double err = vc.output()(0, k) - b.returns[order[begin + static_cast<std::size_t>(k)]];
        value_loss += inv * 0.5 * err * err;
        dvalue(0, k) = inv * err;
      }

      if (!std::isfinite(policy_loss) || !std::isfinite(value_loss))
        throw NumericError("ppo_update: non-finite loss at epoch " + std::to_string(epoch) + ", minibatch " +
                           std::to_string(m) + " (policy " + std::to_string(policy_loss) + ", value " +
                           std::to_string(value_loss) + ")");

      BatchBackward pg = mlp_backward_batch(l.policy.mean, pc, dmean);
      detail::clip_norm(pg.grad, &dlog_std, cfg.max_grad_norm);
      adam_step_inplace(l.policy.mean, pg.grad, l.policy_opt);
      l.log_std_opt.step(l.policy.log_std, dlog_std);

      BatchBackward vg = mlp_backward_batch(l.value, vc, dvalue);
      detail::clip_norm(vg.grad, nullptr, cfg.max_grad_norm);
      adam_step_inplace(l.value, vg.grad, l.value_opt);

      log.policy_loss.push_back(policy_loss);
      log.value_loss.push_back(value_loss);
      log.entropy.push_back(entropy);
      log.clip_fraction.push_back(static_cast<double>(clipped) * inv);
      if (tracked_observations && tracked_observations->cols() > 0)
        log.value_snapshots.push_back(mlp_forward_batch(l.value, *tracked_observations).row(0).transpose());
    }
  }
  return log;
}

inline nlohmann::json update_log_to_json(const UpdateLog& log, long iteration) {
  nlohmann::json snaps = nlohmann::json::array();
  for (const Vec& v : log.value_snapshots) snaps.push_back(vec_to_json(v));
  return {{"iteration", iteration}, {"policy_loss", log.policy_loss}, {"value_loss", log.value_loss},
          {"entropy", log.entropy}, {"clip_fraction", log.clip_fraction}, {"value_snapshots", snaps}};
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<double> per_init_return;   // mean undiscounted return per init state
  std::vector<double> per_init_success;  // fraction of episodes ending in Termination::Goal
  double mean_return = 0.0;
  double success_rate = 0.0;
};

/// Mean-action rollouts from each init state, all inits stepped as one batch.
inline EvalResult evaluate_policy(const GaussianPolicy& policy, const Environment& prototype,
                                  const std::vector<EnvState>& init_states, int episodes = 1,
                                  std::ostream* trajectory_out = nullptr) {
  EvalResult res;
  const std::size_t n_init = init_states.size();
  res.per_init_return.assign(n_init, 0.0);
  res.per_init_success.assign(n_init, 0.0);
  if (n_init == 0 || episodes < 1) return res;

  const std::size_t lanes = n_init * static_cast<std::size_t>(episodes);
  std::vector<std::unique_ptr<Environment>> envs;
  std::vector<Vec> obs(lanes);
  std::vector<double> ret(lanes, 0.0);
  std::vector<bool> success(lanes, false), active(lanes, true);
  for (std::size_t k = 0; k < lanes; ++k) {
    envs.push_back(prototype.clone());
    obs[k] = envs[k]->reset(init_states[k % n_init]);
  }
  Mat batch(prototype.observation_dim(), static_cast<Eigen::Index>(lanes));
  std::size_t remaining = lanes;
  while (remaining > 0) {
    for (std::size_t k = 0; k < lanes; ++k) batch.col(static_cast<Eigen::Index>(k)) = obs[k];
    const Mat means = mlp_forward_batch(policy.mean, batch);
    for (std::size_t k = 0; k < lanes; ++k) {
      if (!active[k]) continue;
      const Vec action = means.col(static_cast<Eigen::Index>(k));
      const EnvState before = trajectory_out ? envs[k]->snapshot() : EnvState{};
      const StepResult r = envs[k]->step(action);
      if (trajectory_out) write_transition(*trajectory_out, static_cast<int>(k), before, obs[k], action, r);
      ret[k] += r.reward;
      obs[k] = r.observation;
      if (r.done) {
        active[k] = false;
        success[k] = r.termination == Termination::Goal;
        --remaining;
      }
    }
  }
  for (std::size_t k = 0; k < lanes; ++k) {
    res.per_init_return[k % n_init] += ret[k] / episodes;
    res.per_init_success[k % n_init] += (success[k] ? 1.0 : 0.0) / episodes;
  }
  res.mean_return = std::accumulate(res.per_init_return.begin(), res.per_init_return.end(), 0.0) / static_cast<double>(n_init);
  res.success_rate = std::accumulate(res.per_init_success.begin(), res.per_init_success.end(), 0.0) / static_cast<double>(n_init);
  return res;
}

}  // namespace isblab
