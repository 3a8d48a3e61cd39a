#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "isblab/nn.hpp"

namespace isblab {

/// Diagonal Gaussian over actions with a state-independent learned log-std.
struct GaussianPolicy {
  MlpParams mean;
  Vec log_std;

  Eigen::Index action_dim() const { return log_std.size(); }
};

inline GaussianPolicy make_policy(Eigen::Index obs_dim, Eigen::Index act_dim, const std::vector<Eigen::Index>& hidden,
                                  double initial_log_std, Rng& rng) {
  GaussianPolicy p{make_mlp(obs_dim, hidden, act_dim, rng), Vec::Constant(act_dim, initial_log_std)};
  // Small output layer so the initial mean action is near zero.
  p.mean.weights.back() *= 0.01;
  return p;
}

inline double gaussian_log_prob(const Vec& mean, const Vec& log_std, const Vec& action) {
  double lp = 0.0;
  for (Eigen::Index j = 0; j < mean.size(); ++j) {
    const double z = (action(j) - mean(j)) * std::exp(-log_std(j));
    lp += -0.5 * z * z - log_std(j) - 0.5 * std::log(2.0 * std::numbers::pi);
  }
  return lp;
}

inline double gaussian_entropy(const Vec& log_std) {
  return log_std.sum() + 0.5 * static_cast<double>(log_std.size()) * std::log(2.0 * std::numbers::pi * std::numbers::e);
}

inline Vec sample_action(const Vec& mean, const Vec& log_std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec a(mean.size());
  for (Eigen::Index j = 0; j < mean.size(); ++j) a(j) = mean(j) + std::exp(log_std(j)) * normal(rng);
  return a;
}

}  // namespace isblab
