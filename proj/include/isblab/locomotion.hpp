#pragma once

// Command-following point mass on a tiled heightfield. The world is a torus of
// grid x grid square tiles; training spawns on the central tile.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "isblab/env.hpp"

namespace isblab {

enum class Terrain { Flat, Rough, UpSlope, DownSlope, Steps };

inline constexpr std::array<Terrain, 5> kTerrainTypes = {Terrain::Flat, Terrain::Rough, Terrain::UpSlope,
                                                         Terrain::DownSlope, Terrain::Steps};

inline const char* terrain_name(Terrain t) {
  switch (t) {
    case Terrain::Flat: return "flat";
    case Terrain::Rough: return "rough";
    case Terrain::UpSlope: return "up_slope";
    case Terrain::DownSlope: return "down_slope";
    case Terrain::Steps: return "steps";
  }
  return "flat";
}

inline Terrain parse_terrain(const std::string& s) {
  for (Terrain t : kTerrainTypes)
    if (s == terrain_name(t)) return t;
  throw ConfigError("unknown terrain type '" + s + "'");
}

inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::fmod(a + pi, 2.0 * pi);
  if (a < 0) a += 2.0 * pi;
  return a - pi;
}

struct LocomotionConfig {
  double tile_size = 10.0;  // [m]
  int grid = 3;
  // Row-major from the (x, y) origin; grid * grid entries.
  std::vector<Terrain> layout = {Terrain::Rough,     Terrain::UpSlope, Terrain::DownSlope,
                                 Terrain::Steps,     Terrain::Flat,    Terrain::Steps,
                                 Terrain::DownSlope, Terrain::UpSlope, Terrain::Rough};
  double dt = 0.02;  // [s]
  int horizon = 512;
  double spawn_noise = 0.5;    // [m], uniform half-width
  double heading_noise = 0.3;  // [rad]
  double cmd_speed_min = 0.2, cmd_speed_max = 0.6, cmd_lateral_max = 0.2;  // [m/s]
  double heading_gain = 1.0, max_yaw_rate_cmd = 1.0;
  double max_accel = 3.0, max_yaw_accel = 6.0;  // at |action| = 1
  double drag = 2.0, yaw_drag = 3.0;
  double gravity = 2.0;  // acceleration per unit height gradient
  double slope = 0.3;
  double rough_amplitude = 0.15, rough_wavelength = 1.5, rough_traction = 0.7;
  double step_height = 0.1, step_width = 0.6, step_edge_fraction = 0.25;
  double crash_speed = 1.2, crash_vertical_speed = 0.8, crash_penalty = 2.0;
  double lin_sigma = 0.1, yaw_sigma = 0.25, action_cost = 0.01;
  double height_scan_offset = 0.4;
  // Train from the centers of all terrain tiles instead of the central spawn.
  bool prior_init = false;
};

class LocomotionEnv final : public Environment {
 public:
  static constexpr int kObsDim = 15;
  static constexpr int kActDim = 3;

  explicit LocomotionEnv(LocomotionConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.grid < 1 || static_cast<int>(cfg_.layout.size()) != cfg_.grid * cfg_.grid)
      throw ConfigError("locomotion layout must have grid*grid entries");
    if (cfg_.tile_size <= 0 || cfg_.dt <= 0 || cfg_.horizon < 1)
      throw ConfigError("locomotion tile_size, dt and horizon must be positive");
  }

  const LocomotionConfig& config() const { return cfg_; }

  Task task() const override { return Task::Locomotion; }
  int observation_dim() const override { return kObsDim; }
  int action_dim() const override { return kActDim; }
  int horizon() const override { return cfg_.horizon; }
  double reward_bound() const override { return 1.0 + cfg_.action_cost * 3.0 + cfg_.crash_penalty + 0.5; }
  std::unique_ptr<Environment> clone() const override { return std::make_unique<LocomotionEnv>(*this); }

  double world_size() const { return cfg_.tile_size * cfg_.grid; }

  int tile_index(double x, double y) const {
    const int col = std::clamp(static_cast<int>(std::floor(wrap_coord(x) / cfg_.tile_size)), 0, cfg_.grid - 1);
    const int row = std::clamp(static_cast<int>(std::floor(wrap_coord(y) / cfg_.tile_size)), 0, cfg_.grid - 1);
    return row * cfg_.grid + col;
  }

  Terrain terrain_at(double x, double y) const { return cfg_.layout[static_cast<std::size_t>(tile_index(x, y))]; }

  std::array<double, 2> tile_center(int index) const {
    const int row = index / cfg_.grid, col = index % cfg_.grid;
    return {(col + 0.5) * cfg_.tile_size, (row + 0.5) * cfg_.tile_size};
  }

  std::array<double, 4> tile_bounds(int index) const {  // xmin, xmax, ymin, ymax
    const auto c = tile_center(index);
    const double h = 0.5 * cfg_.tile_size;
    return {c[0] - h, c[0] + h, c[1] - h, c[1] + h};
  }

  int center_tile() const { return (cfg_.grid / 2) * cfg_.grid + cfg_.grid / 2; }

  double height(double x, double y) const { return height_and_gradient(x, y)[0]; }

  /// {h, dh/dx, dh/dy}
  std::array<double, 3> height_and_gradient(double x, double y) const {
    x = wrap_coord(x);
    y = wrap_coord(y);
    const int idx = tile_index(x, y);
    const auto c = tile_center(idx);
    const double u = x - c[0], v = y - c[1];
    switch (cfg_.layout[static_cast<std::size_t>(idx)]) {
      case Terrain::Flat:
        return {0.0, 0.0, 0.0};
      case Terrain::Rough: {
        const double k = 2.0 * std::numbers::pi / cfg_.rough_wavelength;
        const double a = cfg_.rough_amplitude;
        return {a * std::sin(k * x) * std::sin(k * y), a * k * std::cos(k * x) * std::sin(k * y),
                a * k * std::sin(k * x) * std::cos(k * y)};
      }
      case Terrain::UpSlope:
      case Terrain::DownSlope: {
        const double sign = cfg_.layout[static_cast<std::size_t>(idx)] == Terrain::UpSlope ? 1.0 : -1.0;
        const auto [r, gx, gy] = chebyshev_radius(u, v);
        return {sign * cfg_.slope * r, sign * cfg_.slope * gx, sign * cfg_.slope * gy};
      }
      case Terrain::Steps: {
        const auto [r, gx, gy] = chebyshev_radius(u, v);
        const double q = r / cfg_.step_width;
        const double n = std::floor(q);
        const double f = q - n;
        const double e = cfg_.step_edge_fraction;
        double rise = 0.0, drise = 0.0;
        if (f > 1.0 - e) {
          const double t = (f - (1.0 - e)) / e;
          rise = t * t * (3.0 - 2.0 * t);
          drise = 6.0 * t * (1.0 - t) / (e * cfg_.step_width);
        }
        const double dh = cfg_.step_height * drise;
        return {cfg_.step_height * (n + rise), dh * gx, dh * gy};
      }
    }
    return {0.0, 0.0, 0.0};
  }

  /// Heading-error feedback that turns the target heading into a yaw-rate command.
  double yaw_rate_command(const EnvState& s) const {
    return std::clamp(cfg_.heading_gain * wrap_angle(s.command[2] - s.position[2]), -cfg_.max_yaw_rate_cmd,
                      cfg_.max_yaw_rate_cmd);
  }

  std::array<double, 2> body_velocity(const EnvState& s) const {
    const double c = std::cos(s.position[2]), sn = std::sin(s.position[2]);
    return {c * s.velocity[0] + sn * s.velocity[1], -sn * s.velocity[0] + c * s.velocity[1]};
  }

  /// {linear tracking term, yaw tracking term}; maxima 1 and 0.5.
  std::array<double, 2> tracking_terms(const EnvState& s) const {
    const auto vb = body_velocity(s);
    const double ex = vb[0] - s.command[0], ey = vb[1] - s.command[1];
    const double ew = s.velocity[2] - yaw_rate_command(s);
    return {std::exp(-(ex * ex + ey * ey) / cfg_.lin_sigma), 0.5 * std::exp(-(ew * ew) / cfg_.yaw_sigma)};
  }

  EnvState nominal_state(Rng& rng) const override {
    EnvState s;
    s.task = Task::Locomotion;
    int tile = center_tile();
    if (cfg_.prior_init) tile = static_cast<int>(uniform_index(rng, cfg_.layout.size()));
    const auto c = tile_center(tile);
    s.position = {c[0] + uniform(rng, -cfg_.spawn_noise, cfg_.spawn_noise),
                  c[1] + uniform(rng, -cfg_.spawn_noise, cfg_.spawn_noise),
                  uniform(rng, -cfg_.heading_noise, cfg_.heading_noise)};
    s.command = sample_command(rng);
    return s;
  }

  std::array<double, 3> sample_command(Rng& rng) const {
    return {uniform(rng, cfg_.cmd_speed_min, cfg_.cmd_speed_max),
            uniform(rng, -cfg_.cmd_lateral_max, cfg_.cmd_lateral_max),
            uniform(rng, -std::numbers::pi, std::numbers::pi)};
  }

  Vec observe(const EnvState& s) const override {
    Vec o(kObsDim);
    const auto vb = body_velocity(s);
    o << s.command[0], s.command[1], yaw_rate_command(s), vb[0], vb[1], s.velocity[2], Vec::Zero(9);
    const double h0 = height(s.position[0], s.position[1]);
    const double c = std::cos(s.position[2]), sn = std::sin(s.position[2]);
    const double d = cfg_.height_scan_offset;
    int k = 6;
    for (int i = -1; i <= 1; ++i) {
      for (int j = -1; j <= 1; ++j) {
        const double bx = i * d, by = j * d;
        const double wx = s.position[0] + c * bx - sn * by;
        const double wy = s.position[1] + sn * bx + c * by;
        o(k++) = 2.0 * (height(wx, wy) - h0);
      }
    }
    return o;
  }

  Transition transition(const EnvState& s, const Vec& action) const override {
    Transition tr;
    EnvState n = s;
    const double a0 = std::clamp(action(0), -1.0, 1.0);
    const double a1 = std::clamp(action(1), -1.0, 1.0);
    const double a2 = std::clamp(action(2), -1.0, 1.0);
    const auto g = height_and_gradient(s.position[0], s.position[1]);
    const double traction = terrain_at(s.position[0], s.position[1]) == Terrain::Rough ? cfg_.rough_traction : 1.0;
    const double c = std::cos(s.position[2]), sn = std::sin(s.position[2]);
    const double fx = cfg_.max_accel * traction * a0, fy = cfg_.max_accel * traction * a1;
    const double ax = c * fx - sn * fy - cfg_.gravity * g[1] - cfg_.drag * s.velocity[0];
    const double ay = sn * fx + c * fy - cfg_.gravity * g[2] - cfg_.drag * s.velocity[1];
    const double aw = cfg_.max_yaw_accel * a2 - cfg_.yaw_drag * s.velocity[2];
    n.velocity = {s.velocity[0] + cfg_.dt * ax, s.velocity[1] + cfg_.dt * ay, s.velocity[2] + cfg_.dt * aw};
    n.position = {wrap_coord(s.position[0] + cfg_.dt * n.velocity[0]),
                  wrap_coord(s.position[1] + cfg_.dt * n.velocity[1]),
                  wrap_angle(s.position[2] + cfg_.dt * n.velocity[2])};

    const auto tt = tracking_terms(n);
    tr.reward = tt[0] + tt[1] - 0.5 - cfg_.action_cost * (a0 * a0 + a1 * a1 + a2 * a2);

    const double speed = std::hypot(n.velocity[0], n.velocity[1]);
    const auto gn = height_and_gradient(n.position[0], n.position[1]);
    const double vertical = std::abs(n.velocity[0] * gn[1] + n.velocity[1] * gn[2]);
    if (speed > cfg_.crash_speed || vertical > cfg_.crash_vertical_speed) {
      tr.reward -= cfg_.crash_penalty;
      tr.termination = Termination::Crash;
    }
    tr.next = n;
    return tr;
  }

  /// One canonical start per terrain type, in kTerrainTypes order, at the first
  /// tile of that type in the layout. Types missing from the layout are skipped.
  std::vector<EnvState> terrain_centers() const override {
    std::vector<EnvState> out;
    for (Terrain t : kTerrainTypes) {
      for (std::size_t i = 0; i < cfg_.layout.size(); ++i) {
        if (cfg_.layout[i] != t) continue;
        EnvState s;
        s.task = Task::Locomotion;
        const auto c = tile_center(static_cast<int>(i));
        s.position = {c[0], c[1], 0.0};
        s.command = {0.0, 0.0, 0.0};
        out.push_back(s);
        break;
      }
    }
    return out;
  }

  std::vector<Terrain> terrain_center_types() const {
    std::vector<Terrain> out;
    for (Terrain t : kTerrainTypes)
      if (std::find(cfg_.layout.begin(), cfg_.layout.end(), t) != cfg_.layout.end()) out.push_back(t);
    return out;
  }

 private:
  double wrap_coord(double x) const {
    const double w = world_size();
    x = std::fmod(x, w);
    return x < 0 ? x + w : x;
  }

  static std::array<double, 3> chebyshev_radius(double u, double v) {
    auto sgn = [](double a) { return static_cast<double>((a > 0) - (a < 0)); };
    if (std::abs(u) >= std::abs(v)) return {std::abs(u), sgn(u), 0.0};
    return {std::abs(v), 0.0, sgn(v)};
  }

  LocomotionConfig cfg_;
};

/// Validation starts: each terrain center combined with commands along four
/// headings at the given speed.
inline std::vector<EnvState> locomotion_validation_starts(const LocomotionEnv& env, double speed = 0.4) {
  std::vector<EnvState> out;
  for (const EnvState& center : env.terrain_centers()) {
    for (int k = 0; k < 4; ++k) {
      EnvState s = center;
      const double heading = -std::numbers::pi + (k + 0.5) * std::numbers::pi / 2.0;
      s.position[2] = heading;
      s.command = {speed, 0.0, heading};
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace isblab
