#pragma once

// Planar point-mass racer flying a closed track of ordered gates. Gate i sits
// at the midpoint of track segment i and faces along it; leaving the corridor
// around the track centerline is a crash. A lap is all gates in order.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "isblab/env.hpp"
#include "isblab/locomotion.hpp"  // wrap_angle

namespace isblab {

struct Gate {
  double x = 0, y = 0;    // center [m]
  double nx = 1, ny = 0;  // unit normal, direction of travel
  double half_width = 1;  // [m]
};

struct RacingConfig {
  std::vector<std::array<double, 2>> waypoints = {{0, 0}, {10, 0}, {14, 6}, {8, 9}, {12, 14}, {0, 12}};
  double gate_half_width = 1.0;
  double gate_depth = 0.5;  // a gate counts once the racer is 0..depth past its plane
  double corridor_half_width = 1.5;
  double start_offset = 1.0;  // start this far along the first segment
  double dt = 0.05;
  int horizon = 1024;
  double max_thrust = 6.0, drag = 1.0, max_yaw_rate = 3.0;
  double progress_coef = 1.0, gate_bonus = 5.0, crash_penalty = 5.0;
};

class RacingEnv final : public Environment {
 public:
  static constexpr int kObsDim = 9;
  static constexpr int kActDim = 2;

  explicit RacingEnv(RacingConfig cfg = {}) : cfg_(std::move(cfg)) {
    const std::size_t n = cfg_.waypoints.size();
    if (n < 3) throw ConfigError("racing track needs at least 3 waypoints");
    if (cfg_.dt <= 0 || cfg_.horizon < 1) throw ConfigError("racing dt and horizon must be positive");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = cfg_.waypoints[i];
      const auto& b = cfg_.waypoints[(i + 1) % n];
      const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
      if (len <= 0) throw ConfigError("racing waypoints must be distinct");
      gates_.push_back({0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), (b[0] - a[0]) / len, (b[1] - a[1]) / len,
                        cfg_.gate_half_width});
    }
  }

  const RacingConfig& config() const { return cfg_; }
  const std::vector<Gate>& gates() const { return gates_; }
  int num_gates() const { return static_cast<int>(gates_.size()); }

  Task task() const override { return Task::Racing; }
  int observation_dim() const override { return kObsDim; }
  int action_dim() const override { return kActDim; }
  int horizon() const override { return cfg_.horizon; }
  double reward_bound() const override {
    return cfg_.progress_coef * (cfg_.max_thrust / cfg_.drag) * cfg_.dt * 2.0 + cfg_.gate_bonus + cfg_.crash_penalty;
  }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<RacingEnv>(*this); }

  EnvState nominal_state(Rng&) const override {
    EnvState s;
    s.task = Task::Racing;
    const Gate& g = gates_.front();
    const auto& w = cfg_.waypoints.front();
    s.position = {w[0] + cfg_.start_offset * g.nx, w[1] + cfg_.start_offset * g.ny, std::atan2(g.ny, g.nx)};
    return s;
  }

  const Gate& next_gate(const EnvState& s) const {
    return gates_[static_cast<std::size_t>(s.gates_passed % num_gates())];
  }

  double distance_to_track(double x, double y) const {
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = cfg_.waypoints.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = cfg_.waypoints[i];
      const auto& b = cfg_.waypoints[(i + 1) % n];
      const double dx = b[0] - a[0], dy = b[1] - a[1];
      const double t = std::clamp(((x - a[0]) * dx + (y - a[1]) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
      best = std::min(best, std::hypot(x - a[0] - t * dx, y - a[1] - t * dy));
    }
    return best;
  }

  /// True when (x, y) lies in the gate's passage slab: 0..depth past the plane
  /// and within the gate's half-width.
  bool in_gate(const Gate& g, double x, double y) const {
    const double along = (x - g.x) * g.nx + (y - g.y) * g.ny;
    const double lateral = -(x - g.x) * g.ny + (y - g.y) * g.nx;
    return along >= 0.0 && along <= cfg_.gate_depth && std::abs(lateral) <= g.half_width;
  }

  Vec observe(const EnvState& s) const override {
    const Gate& g = next_gate(s);
    const Gate& g2 = gates_[static_cast<std::size_t>((s.gates_passed + 1) % num_gates())];
    const double c = std::cos(s.position[2]), sn = std::sin(s.position[2]);
    auto to_body = [&](double wx, double wy) {
      const double dx = wx - s.position[0], dy = wy - s.position[1];
      return std::array<double, 2>{c * dx + sn * dy, -sn * dx + c * dy};
    };
    const double tx = -g.ny * g.half_width, ty = g.nx * g.half_width;
    const auto left = to_body(g.x + tx, g.y + ty);
    const auto right = to_body(g.x - tx, g.y - ty);
    const auto after = to_body(g2.x, g2.y);
    const double vbx = c * s.velocity[0] + sn * s.velocity[1];
    const double vby = -sn * s.velocity[0] + c * s.velocity[1];
    Vec o(kObsDim);
    o << left[0] / 5.0, left[1] / 5.0, right[0] / 5.0, right[1] / 5.0, after[0] / 10.0, after[1] / 10.0, vbx / 5.0,
        vby / 5.0, s.velocity[2] / cfg_.max_yaw_rate;
    return o;
  }

  Transition transition(const EnvState& s, const Vec& action) const override {
    Transition tr;
    EnvState n = s;
    const double thrust = cfg_.max_thrust * 0.5 * (std::clamp(action(0), -1.0, 1.0) + 1.0);
    const double yaw_rate = cfg_.max_yaw_rate * std::clamp(action(1), -1.0, 1.0);
    n.velocity[2] = yaw_rate;
    const double heading = wrap_angle(s.position[2] + cfg_.dt * yaw_rate);
    n.velocity[0] = s.velocity[0] + cfg_.dt * (thrust * std::cos(heading) - cfg_.drag * s.velocity[0]);
    n.velocity[1] = s.velocity[1] + cfg_.dt * (thrust * std::sin(heading) - cfg_.drag * s.velocity[1]);
    n.position = {s.position[0] + cfg_.dt * n.velocity[0], s.position[1] + cfg_.dt * n.velocity[1], heading};

    const Gate& g = next_gate(s);
    const double before = std::hypot(s.position[0] - g.x, s.position[1] - g.y);
    const double after = std::hypot(n.position[0] - g.x, n.position[1] - g.y);
    tr.reward = cfg_.progress_coef * (before - after);

    if (in_gate(g, n.position[0], n.position[1])) {
      tr.reward += cfg_.gate_bonus;
      n.gates_passed += 1;
      if (n.gates_passed >= num_gates()) tr.termination = Termination::Goal;
    }
    if (tr.termination == Termination::None &&
        distance_to_track(n.position[0], n.position[1]) > cfg_.corridor_half_width) {
      tr.reward -= cfg_.crash_penalty;
      tr.termination = Termination::Crash;
    }
    tr.next = n;
    return tr;
  }

 private:
  RacingConfig cfg_;
  std::vector<Gate> gates_;
};

}  // namespace isblab
