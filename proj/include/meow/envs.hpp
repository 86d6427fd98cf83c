// Environment contract and the two built-in tasks: a 2D four-goal point
// mass and a one-step diagnostic with a bimodal reward landscape.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "meow/tensor.hpp"

namespace meow {

struct EnvSpec {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<double> action_low;
  std::vector<double> action_high;
  int horizon = 1;
};

struct StepResult {
  std::vector<double> state;
  double reward = 0.0;
  // done: the episode is over. truncated: it ended on the time limit rather
  // than a terminal state, so value bootstrapping should continue through it.
  bool done = false;
  bool truncated = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual std::vector<double> reset(Rng& rng) = 0;
  virtual StepResult step(const std::vector<double>& action) = 0;
  // Distance from a state to the nearest goal; 0 for goal-free tasks.
  virtual double goal_distance(const std::vector<double>& state) const {
    (void)state;
    return 0.0;
  }
};

struct MultiGoalConfig {
  int horizon = 30;
  // Spawn spread around the origin. The origin is equidistant from all four
  // goals, and a smooth fit of the multimodal optimal policy has a mode near
  // zero exactly there, so a deterministic rollout spawned dead-center burns
  // steps before any goal's pull dominates. A unit of spawn noise starts
  // episodes outside that tie region.
  double init_noise = 1.0;
  // Displacement per unit of clipped action. Controls two things at once:
  // how fast the optimal policy travels (roughly gain^2 / 60 units per step
  // against the quadratic action cost, before lookahead sharpens it) and how
  // much positional jitter the entropy-seeking policy keeps around a goal.
  // Below about 3.1 even the converged one-step-lookahead policy cannot
  // cover the spawn-to-goal distance within the horizon.
  double dynamics_gain = 3.5;
  // Half-width of the square the agent can occupy; positions saturate here.
  // Must exceed the goal radius of 5.
  double arena = 7.0;
};

// Point mass on the plane with four goals on the axes at radius 5. Reward is
// r1(s') + r2(a): negative distance to the nearest goal plus a -30|a|^2
// actuation penalty. Episodes run a fixed horizon; the time limit truncates
// rather than terminates.
class MultiGoalEnv : public Env {
 public:
  explicit MultiGoalEnv(const MultiGoalConfig& cfg = {});

  const EnvSpec& spec() const override { return spec_; }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(const std::vector<double>& action) override;
  double goal_distance(const std::vector<double>& state) const override;

  static const std::vector<std::vector<double>>& goals();
  // Reward pieces, exposed for direct verification. nearest_goal_reward is
  // evaluated at the post-transition state. action_cost takes the action as
  // emitted: dynamics saturate at the box, the penalty must not, or a
  // max-entropy policy could spread arbitrarily wide at bounded cost and the
  // soft value supremum would be infinite.
  static double nearest_goal_reward(const std::vector<double>& state);
  static double action_cost(const std::vector<double>& action);

 private:
  MultiGoalConfig cfg_;
  EnvSpec spec_;
  std::vector<double> state_;
  int t_ = 0;
};

// One-dimensional single-step task. Each state s has two symmetric optimal
// actions at +-c(s), c(s) = 0.5 + 0.5|s|: reward -min((a-c)^2, (a+c)^2).
class OneStepEnv : public Env {
 public:
  OneStepEnv();

  const EnvSpec& spec() const override { return spec_; }
  std::vector<double> reset(Rng& rng) override;
  StepResult step(const std::vector<double>& action) override;

  static double reward(double state, double action);

 private:
  EnvSpec spec_;
  std::vector<double> state_;
};

std::vector<double> clip_action(const std::vector<double>& a,
                                const EnvSpec& spec);

}  // namespace meow
