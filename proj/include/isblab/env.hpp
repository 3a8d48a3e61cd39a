#pragma once

// Restorable environment contract shared by the locomotion and racing proxies.

#include <array>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "isblab/errors.hpp"
#include "isblab/nn.hpp"
#include "isblab/rng.hpp"

namespace isblab {

enum class Task { Locomotion, Racing };

inline const char* task_name(Task t) { return t == Task::Locomotion ? "locomotion" : "racing"; }

inline Task parse_task(const std::string& s) {
  if (s == "locomotion") return Task::Locomotion;
  if (s == "racing") return Task::Racing;
  throw ConfigError("unknown task '" + s + "'");
}

enum class Termination { None, Timeout, Crash, Goal };

inline const char* termination_name(Termination t) {
  switch (t) {
    case Termination::None: return "none";
    case Termination::Timeout: return "timeout";
    case Termination::Crash: return "crash";
    case Termination::Goal: return "goal";
  }
  return "none";
}

/// Everything needed to resume an episode. Both proxies are planar, so pose and
/// rates are three-vectors: (x [m], y [m], heading [rad]) and (vx, vy [m/s], yaw rate [rad/s]).
struct EnvState {
  Task task = Task::Locomotion;
  std::array<double, 3> position{};
  std::array<double, 3> velocity{};
  // Locomotion: body-frame forward and lateral velocity command plus target heading.
  std::array<double, 3> command{};
  // Racing: gates passed so far this lap; the next gate is gates_passed.
  int gates_passed = 0;
  int episode_step = 0;
  double accumulated_reward = 0.0;
  // Steps since the episode was (re)initialized; the timeout counts this.
  int horizon_step = 0;

  bool operator==(const EnvState&) const = default;
};

struct StepResult {
  Vec observation;
  double reward = 0.0;
  bool done = false;
  Termination termination = Termination::None;
};

/// Pure transition output; Environment adds the episode bookkeeping.
struct Transition {
  EnvState next;
  double reward = 0.0;
  Termination termination = Termination::None;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual Task task() const = 0;
  virtual int observation_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  /// Per-step |reward| never exceeds this.
  virtual double reward_bound() const = 0;
  /// One draw from the nominal start distribution p0.
  virtual EnvState nominal_state(Rng& rng) const = 0;
  /// Observation is a pure function of the state.
  virtual Vec observe(const EnvState& s) const = 0;
  /// Dynamics and reward for one step, ignoring the timeout.
  virtual Transition transition(const EnvState& s, const Vec& action) const = 0;
  virtual std::vector<EnvState> terrain_centers() const {
    throw Unsupported(std::string("terrain_centers is not defined for the ") + task_name(task()) + " task");
  }
  virtual std::unique_ptr<Environment> clone() const = 0;

  void seed(std::uint64_t seed, const std::string& label) { rng_ = seeded_rng(seed, label); }
  Rng& rng() { return rng_; }

  EnvState draw_nominal() { return nominal_state(rng_); }

  /// Starts an episode at init, or at a fresh p0 draw. A restored init keeps its
  /// episode_step and accumulated_reward; only the timeout counter restarts.
  Vec reset(const std::optional<EnvState>& init = std::nullopt) {
    if (init) {
      check_task(*init);
      state_ = *init;
      state_.horizon_step = 0;
    } else {
      state_ = draw_nominal();
    }
    done_ = false;
    started_ = true;
    return observe(state_);
  }

  StepResult step(const Vec& action) {
    if (!started_) throw ProtocolError("step before reset");
    if (done_) throw ProtocolError("step after episode end; call reset first");
    if (action.size() != action_dim())
      throw ShapeError("action has length " + std::to_string(action.size()) + ", expected " +
                       std::to_string(action_dim()));
    Transition tr = transition(state_, action);
    tr.next.episode_step = state_.episode_step + 1;
    tr.next.horizon_step = state_.horizon_step + 1;
    tr.next.accumulated_reward = state_.accumulated_reward + tr.reward;
    if (tr.termination == Termination::None && tr.next.horizon_step >= horizon())
      tr.termination = Termination::Timeout;
    state_ = tr.next;
    done_ = tr.termination != Termination::None;
    return {observe(state_), tr.reward, done_, tr.termination};
  }

  EnvState snapshot() const { return state_; }

  /// Exact resume: unlike reset(init), the timeout counter is kept too.
  void restore(const EnvState& s) {
    check_task(s);
    state_ = s;
    done_ = false;
    started_ = true;
  }

  bool done() const { return done_; }
  Vec observation() const { return observe(state_); }

 protected:
  void check_task(const EnvState& s) const {
    if (s.task != task())
      throw TaskMismatch(std::string("state belongs to the ") + task_name(s.task) + " task, env is " +
                         task_name(task()));
  }

  EnvState state_;
  bool done_ = false;
  bool started_ = false;
  Rng rng_ = seeded_rng(0, "env");
};

// ---------------------------------------------------------------------------
// JSON forms used by buffer and trajectory dumps.

inline nlohmann::json state_to_json(const EnvState& s) {
  return {{"task", task_name(s.task)},
          {"position", s.position},
          {"velocity", s.velocity},
          {"command", s.command},
          {"gates_passed", s.gates_passed},
          {"episode_step", s.episode_step},
          {"accumulated_reward", s.accumulated_reward},
          {"horizon_step", s.horizon_step}};
}

inline EnvState state_from_json(const nlohmann::json& j) {
  EnvState s;
  s.task = parse_task(j.at("task").get<std::string>());
  s.position = j.at("position").get<std::array<double, 3>>();
  s.velocity = j.at("velocity").get<std::array<double, 3>>();
  s.command = j.at("command").get<std::array<double, 3>>();
  s.gates_passed = j.at("gates_passed").get<int>();
  s.episode_step = j.at("episode_step").get<int>();
  s.accumulated_reward = j.at("accumulated_reward").get<double>();
  s.horizon_step = j.at("horizon_step").get<int>();
  return s;
}

inline nlohmann::json vec_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vec_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Trajectory dump: one JSON object per line per transition.
inline void write_transition(std::ostream& out, int lane, const EnvState& state, const Vec& observation,
                             const Vec& action, const StepResult& result) {
  nlohmann::json j = {{"lane", lane},
                      {"state", state_to_json(state)},
                      {"observation", vec_to_json(observation)},
                      {"action", vec_to_json(action)},
                      {"reward", result.reward},
                      {"done", result.done},
                      {"termination", termination_name(result.termination)}};
  out << j.dump() << '\n';
}

}  // namespace isblab
