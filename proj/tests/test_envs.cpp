#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "isblab/locomotion.hpp"
#include "isblab/racing.hpp"

using namespace isblab;

namespace {

std::vector<Vec> random_actions(int n, int dim, Rng& rng) {
  std::vector<Vec> out;
  for (int i = 0; i < n; ++i) {
    Vec a(dim);
    for (int k = 0; k < dim; ++k) a(k) = uniform(rng, -1, 1);
    out.push_back(a);
  }
  return out;
}

struct Recorded {
  std::vector<double> rewards;
  std::vector<Vec> observations;
  std::vector<EnvState> states;
};

Recorded play(Environment& env, const std::vector<Vec>& actions) {
  Recorded r;
  for (const Vec& a : actions) {
    if (env.done()) break;
    const StepResult s = env.step(a);
    r.rewards.push_back(s.reward);
    r.observations.push_back(s.observation);
    r.states.push_back(env.snapshot());
  }
  return r;
}

}  // namespace

TEST(Locomotion, SeededResetIsDeterministic) {
  LocomotionEnv a, b;
  a.seed(3, "env-lane-0");
  b.seed(3, "env-lane-0");
  EXPECT_EQ(a.reset(), b.reset());
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Locomotion, NominalSpreadWithinConfiguredNoise) {
  LocomotionEnv env;
  env.seed(5, "spread");
  const auto c = env.tile_center(env.center_tile());
  const auto& cfg = env.config();
  double minx = 1e9, maxx = -1e9, maxh = 0;
  for (int i = 0; i < 10000; ++i) {
    env.reset();
    const EnvState s = env.snapshot();
    const double dx = s.position[0] - c[0], dy = s.position[1] - c[1];
    ASSERT_LE(std::abs(dx), cfg.spawn_noise);
    ASSERT_LE(std::abs(dy), cfg.spawn_noise);
    ASSERT_LE(std::abs(s.position[2]), cfg.heading_noise);
    ASSERT_GE(s.command[0], cfg.cmd_speed_min);
    ASSERT_LE(s.command[0], cfg.cmd_speed_max);
    ASSERT_EQ(s.episode_step, 0);
    minx = std::min(minx, dx);
    maxx = std::max(maxx, dx);
    maxh = std::max(maxh, std::abs(s.position[2]));
  }
  // The draws fill the configured box, not a smaller one.
  EXPECT_LT(minx, -0.95 * cfg.spawn_noise);
  EXPECT_GT(maxx, 0.95 * cfg.spawn_noise);
  EXPECT_GT(maxh, 0.95 * cfg.heading_noise);
}

TEST(Locomotion, ZeroCommandStandingStillHasMaximalTracking) {
  LocomotionConfig cfg;
  cfg.layout.assign(9, Terrain::Flat);
  LocomotionEnv env(cfg);
  EnvState s;
  s.position = {15, 15, 0};
  env.reset(s);
  const StepResult r = env.step(Vec::Zero(3));
  const auto tt = env.tracking_terms(env.snapshot());
  EXPECT_DOUBLE_EQ(tt[0], 1.0);
  EXPECT_DOUBLE_EQ(tt[1], 0.5);
  EXPECT_DOUBLE_EQ(r.reward, 1.0);
  EXPECT_FALSE(r.done);
}

TEST(Locomotion, RestoreMidEpisodeReproducesObservationAndRewards) {
  LocomotionEnv env;
  env.seed(11, "x");
  env.reset();
  Rng rng = seeded_rng(1, "actions");
  const auto prefix = random_actions(40, 3, rng);
  play(env, prefix);
  const EnvState mid = env.snapshot();
  const Vec mid_obs = env.observation();
  const auto suffix = random_actions(60, 3, rng);
  const Recorded original = play(env, suffix);

  LocomotionEnv other;
  const Vec first = other.reset(mid);
  EXPECT_EQ(first, mid_obs);
  other.restore(mid);
  const Recorded replay = play(other, suffix);
  ASSERT_EQ(replay.rewards.size(), original.rewards.size());
  for (std::size_t i = 0; i < replay.rewards.size(); ++i) {
    EXPECT_EQ(replay.rewards[i], original.rewards[i]);
    EXPECT_EQ(replay.states[i], original.states[i]);
  }
}

TEST(Locomotion, SnapshotRestoreSnapshotIsIdentity) {
  LocomotionEnv env;
  env.seed(2, "x");
  env.reset();
  env.step(Vec::Constant(3, 0.3));
  const EnvState a = env.snapshot();
  env.restore(a);
  EXPECT_EQ(env.snapshot(), a);
}

TEST(Locomotion, ResetKeepsEpisodeBookkeepingButRestartsTimeout) {
  LocomotionEnv env;
  env.seed(2, "x");
  env.reset();
  for (int i = 0; i < 20; ++i) env.step(Vec::Zero(3));
  const EnvState s = env.snapshot();
  ASSERT_EQ(s.episode_step, 20);
  ASSERT_EQ(s.horizon_step, 20);
  env.reset(s);
  EXPECT_EQ(env.snapshot().episode_step, 20);
  EXPECT_EQ(env.snapshot().accumulated_reward, s.accumulated_reward);
  EXPECT_EQ(env.snapshot().horizon_step, 0);
}

TEST(Locomotion, AccumulatedRewardMatchesHistory) {
  LocomotionEnv env;
  env.seed(4, "x");
  env.reset();
  Rng rng = seeded_rng(4, "a");
  double sum = 0.0;
  int steps = 0;
  for (const Vec& a : random_actions(100, 3, rng)) {
    if (env.done()) break;
    sum += env.step(a).reward;
    ++steps;
  }
  EXPECT_NEAR(env.snapshot().accumulated_reward, sum, 1e-12);
  EXPECT_EQ(env.snapshot().episode_step, steps);
}

TEST(Locomotion, TimeoutAtHorizon) {
  LocomotionConfig cfg;
  cfg.horizon = 30;
  LocomotionEnv env(cfg);
  env.seed(1, "x");
  env.reset();
  StepResult r;
  for (int i = 0; i < 30; ++i) {
    ASSERT_FALSE(env.done());
    r = env.step(Vec::Zero(3));
  }
  EXPECT_TRUE(r.done);
  EXPECT_EQ(r.termination, Termination::Timeout);
  EXPECT_THROW(env.step(Vec::Zero(3)), ProtocolError);
}

TEST(Locomotion, ProtocolAndShapeErrors) {
  LocomotionEnv env;
  EXPECT_THROW(env.step(Vec::Zero(3)), ProtocolError);
  env.reset();
  EXPECT_THROW(env.step(Vec::Zero(2)), ShapeError);
  EnvState racing;
  racing.task = Task::Racing;
  EXPECT_THROW(env.reset(racing), TaskMismatch);
  EXPECT_THROW(env.restore(racing), TaskMismatch);
}

TEST(Locomotion, DoneIffTerminationSet) {
  LocomotionEnv env;
  env.seed(9, "x");
  env.reset();
  Rng rng = seeded_rng(9, "a");
  for (int ep = 0; ep < 5; ++ep) {
    for (int i = 0; i < 2000 && !env.done(); ++i) {
      Vec a(3);
      for (int k = 0; k < 3; ++k) a(k) = uniform(rng, -1, 1) * 3.0;  // oversized actions get clamped
      const StepResult r = env.step(a);
      EXPECT_EQ(r.done, r.termination != Termination::None);
      EXPECT_LE(std::abs(r.reward), env.reward_bound());
      EXPECT_TRUE(r.observation.allFinite());
    }
    env.reset();
  }
}

TEST(Locomotion, SpeedCrashTerminates) {
  LocomotionConfig cfg;
  cfg.layout.assign(9, Terrain::Flat);
  LocomotionEnv env(cfg);
  EnvState s;
  s.position = {15, 15, 0};
  env.reset(s);
  StepResult r;
  for (int i = 0; i < 500 && !env.done(); ++i) r = env.step(Vec{{1.0, 1.0, 0.0}});
  EXPECT_EQ(r.termination, Termination::Crash);
}

TEST(Locomotion, ObservationIsPureFunctionOfState) {
  LocomotionEnv env;
  env.seed(1, "x");
  env.reset();
  env.step(Vec::Constant(3, 0.5));
  const EnvState s = env.snapshot();
  EXPECT_EQ(env.observe(s), env.observe(s));
  EXPECT_EQ(env.observe(s), env.observation());
  EXPECT_EQ(env.observe(s).size(), env.observation_dim());
}

TEST(TerrainCenters, OnePerTypeInsideTile) {
  LocomotionEnv env;
  const auto centers = env.terrain_centers();
  ASSERT_EQ(centers.size(), 5u);
  const auto types = env.terrain_center_types();
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const int tile = env.tile_index(centers[i].position[0], centers[i].position[1]);
    const auto b = env.tile_bounds(tile);
    EXPECT_EQ(env.terrain_at(centers[i].position[0], centers[i].position[1]), types[i]);
    EXPECT_GE(centers[i].position[0], b[0]);
    EXPECT_LE(centers[i].position[0], b[1]);
    EXPECT_GE(centers[i].position[1], b[2]);
    EXPECT_LE(centers[i].position[1], b[3]);
  }
}

TEST(TerrainCenters, StandingStillDoesNotCrashFor15Steps) {
  for (double gravity : {2.0, 6.0}) {
    LocomotionConfig cfg;
    cfg.gravity = gravity;
    cfg.slope = 0.45;
    LocomotionEnv env(cfg);
    for (const EnvState& c : env.terrain_centers()) {
      env.reset(c);
      for (int i = 0; i < 15; ++i) {
        const StepResult r = env.step(Vec::Zero(3));
        ASSERT_NE(r.termination, Termination::Crash) << "gravity " << gravity << " step " << i;
      }
    }
  }
}

TEST(TerrainCenters, UnsupportedForRacing) {
  RacingEnv env;
  EXPECT_THROW(env.terrain_centers(), Unsupported);
}

TEST(Racing, NominalStartIsFixed) {
  RacingEnv a, b;
  a.seed(1, "x");
  b.seed(2, "y");
  EXPECT_EQ(a.reset(), b.reset());
}

TEST(Racing, GatePlaneInsideExtentGrantsBonus) {
  RacingEnv env;
  const Gate& g = env.gates()[0];
  EnvState s;
  s.task = Task::Racing;
  s.position = {g.x, g.y, std::atan2(g.ny, g.nx)};
  env.reset(s);
  // Zero thrust and zero turn keep the racer on the plane.
  const StepResult r = env.step(Vec{{-1.0, 0.0}});
  EXPECT_EQ(env.snapshot().gates_passed, 1);
  EXPECT_DOUBLE_EQ(r.reward, env.config().gate_bonus);
}

TEST(Racing, GatePlaneOutsideExtentGivesNoBonus) {
  RacingEnv env;
  const Gate& g = env.gates()[0];
  EnvState s;
  s.task = Task::Racing;
  const double off = g.half_width + 0.2;  // inside the corridor, outside the gate
  s.position = {g.x - g.ny * off, g.y + g.nx * off, std::atan2(g.ny, g.nx)};
  env.reset(s);
  env.step(Vec{{-1.0, 0.0}});
  EXPECT_EQ(env.snapshot().gates_passed, 0);
}

TEST(Racing, StraightFlightProgressEqualsDistanceClosed) {
  RacingEnv env;
  env.reset();
  const Gate& g = env.gates()[0];
  double total = 0.0;
  std::vector<double> rewards;
  EnvState prev = env.snapshot();
  for (int i = 0; i < 20; ++i) {
    const StepResult r = env.step(Vec{{0.2, 0.0}});
    const EnvState cur = env.snapshot();
    // Closed-form: distance closed toward the gate center this step.
    const double d0 = std::hypot(prev.position[0] - g.x, prev.position[1] - g.y);
    const double d1 = std::hypot(cur.position[0] - g.x, cur.position[1] - g.y);
    EXPECT_NEAR(r.reward, env.config().progress_coef * (d0 - d1), 1e-12);
    total += r.reward;
    prev = cur;
  }
  const EnvState start = [&] {
    RacingEnv e;
    e.reset();
    return e.snapshot();
  }();
  const double closed = std::hypot(start.position[0] - g.x, start.position[1] - g.y) -
                        std::hypot(prev.position[0] - g.x, prev.position[1] - g.y);
  EXPECT_NEAR(total, closed, 1e-9);
}

TEST(Racing, GoStraightPolicyMatchesClosedFormWithinFivePercent) {
  // Constant thrust along the first segment: v_{k+1} = v_k + dt (F - c v_k),
  // x_{k+1} = x_k + dt v_{k+1}; progress is the distance closed to gate 1.
  RacingEnv env;
  env.reset();
  const auto& cfg = env.config();
  const double a0 = 0.0;
  const double F = cfg.max_thrust * 0.5 * (a0 + 1.0);
  const Gate& g = env.gates()[0];
  const double d_start = std::hypot(env.snapshot().position[0] - g.x, env.snapshot().position[1] - g.y);
  double v = 0.0, x = 0.0, expected = 0.0;
  double got = 0.0;
  for (int k = 0; k < 30; ++k) {
    const StepResult r = env.step(Vec{{a0, 0.0}});
    v += cfg.dt * (F - cfg.drag * v);
    x += cfg.dt * v;
    got += r.reward;
    if (r.done) break;
  }
  expected = cfg.progress_coef * (d_start - std::abs(d_start - x));
  EXPECT_NEAR(got, expected, 0.05 * std::abs(expected));
}

TEST(Racing, LeavingCorridorCrashes) {
  RacingEnv env;
  env.reset();
  StepResult r;
  for (int i = 0; i < 200 && !env.done(); ++i) r = env.step(Vec{{1.0, 1.0}});
  EXPECT_EQ(r.termination, Termination::Crash);
  EXPECT_LT(r.reward, 0.0);
}

TEST(Racing, RestoreIntoSecondInstanceReplaysExactly) {
  RacingEnv env;
  env.reset();
  Rng rng = seeded_rng(2, "a");
  for (int i = 0; i < 10; ++i) env.step(Vec{{0.5, uniform(rng, -0.2, 0.2)}});
  const EnvState mid = env.snapshot();
  std::vector<Vec> acts;
  for (int i = 0; i < 30; ++i) acts.push_back(Vec{{uniform(rng, 0.0, 1.0), uniform(rng, -0.3, 0.3)}});
  const Recorded a = play(env, acts);
  RacingEnv other;
  other.restore(mid);
  const Recorded b = play(other, acts);
  ASSERT_EQ(a.rewards.size(), b.rewards.size());
  for (std::size_t i = 0; i < a.rewards.size(); ++i) EXPECT_EQ(a.states[i], b.states[i]);
}

TEST(Racing, ObservationsFiniteAndRewardBounded) {
  RacingEnv env;
  env.seed(3, "x");
  Rng rng = seeded_rng(3, "a");
  for (int ep = 0; ep < 20; ++ep) {
    env.reset();
    while (!env.done()) {
      const StepResult r = env.step(Vec{{uniform(rng, -1, 1), uniform(rng, -1, 1)}});
      ASSERT_TRUE(r.observation.allFinite());
      ASSERT_LE(std::abs(r.reward), env.reward_bound());
    }
  }
}

TEST(Trajectories, TransitionLineIsJson) {
  LocomotionEnv env;
  env.seed(1, "x");
  const Vec obs = env.reset();
  const EnvState before = env.snapshot();
  const Vec a = Vec::Constant(3, 0.1);
  const StepResult r = env.step(a);
  std::ostringstream out;
  write_transition(out, 3, before, obs, a, r);
  const auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j.at("lane"), 3);
  EXPECT_EQ(state_from_json(j.at("state")), before);
}
