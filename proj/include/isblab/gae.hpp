#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "isblab/errors.hpp"

namespace isblab {

struct GaeConfig {
  double gamma = 0.99;
  double lam = 0.95;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gae gamma must lie in (0, 1]");
    if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("gae lambda must lie in [0, 1]");
  }
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;  // advantages + values
};

/// GAE(gamma, lambda) over one lane. dones[t] != 0 means step t ended its
/// episode, so nothing flows back across it; bootstrap_value is V of the state
/// after the last step and only matters when that step is not terminal.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const std::uint8_t> dones, double bootstrap_value, const GaeConfig& cfg) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) throw ShapeError("compute_gae: rewards, values and dones differ in length");
  if (!std::isfinite(bootstrap_value)) throw NumericError("compute_gae: non-finite bootstrap value");
  for (std::size_t t = 0; t < n; ++t)
    if (!std::isfinite(rewards[t]) || !std::isfinite(values[t]))
      throw NumericError("compute_gae: non-finite input at step " + std::to_string(t));

  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap_value;
  double carry = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double not_done = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + cfg.gamma * next_value * not_done - values[t];
    carry = delta + cfg.gamma * cfg.lam * not_done * carry;
    out.advantages[t] = carry;
    out.returns[t] = carry + values[t];
    next_value = values[t];
  }
  return out;
}

/// Shift to zero mean and scale to unit (population) standard deviation.
inline void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  double mean = 0.0;
  for (double a : adv) mean += a;
  mean /= static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  var /= static_cast<double>(adv.size());
  const double sd = std::sqrt(var);
  for (double& a : adv) a = sd > 1e-12 ? (a - mean) / sd : a - mean;
}

}  // namespace isblab
