#include "meow/envs.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace meow {
namespace {

void check_finite_vec(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + " is not finite");
}

}  // namespace

std::vector<double> clip_action(const std::vector<double>& a,
                                const EnvSpec& spec) {
  if (static_cast<int>(a.size()) != spec.action_dim)
    throw ShapeError("action has wrong size");
  check_finite_vec(a, "action");
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i)
    out[i] = std::clamp(a[i], spec.action_low[i], spec.action_high[i]);
  return out;
}

MultiGoalEnv::MultiGoalEnv(const MultiGoalConfig& cfg) : cfg_(cfg) {
  if (cfg.horizon < 1) throw Error("MultiGoalEnv: horizon must be >= 1");
  if (cfg.dynamics_gain <= 0.0)
    throw Error("MultiGoalEnv: dynamics_gain must be positive");
  if (cfg.arena <= 5.0)
    throw Error("MultiGoalEnv: arena must enclose the goals");
  spec_.state_dim = 2;
  spec_.action_dim = 2;
  spec_.action_low = {-1.0, -1.0};
  spec_.action_high = {1.0, 1.0};
  spec_.horizon = cfg.horizon;
  state_ = {0.0, 0.0};
}

const std::vector<std::vector<double>>& MultiGoalEnv::goals() {
  static const std::vector<std::vector<double>> g = {
      {0.0, 5.0}, {0.0, -5.0}, {5.0, 0.0}, {-5.0, 0.0}};
  return g;
}

double MultiGoalEnv::nearest_goal_reward(const std::vector<double>& state) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& g : goals()) {
    double dx = state[0] - g[0];
    double dy = state[1] - g[1];
    best = std::max(best, -std::sqrt(dx * dx + dy * dy));
  }
  return best;
}

double MultiGoalEnv::action_cost(const std::vector<double>& action) {
  // Quadratic actuation cost, 30 per unit squared norm. The quadratic form
  // matters for training stability: it gives the optimal soft Q Gaussian
  // tails, which an affine-in-action flow head can match exactly, so fitting
  // an oversized sampled action narrows the policy instead of widening it.
  // A cost linear in |a| cannot be matched by those tails; chasing it drags
  // the flow scale down and the sampler diverges.
  double sq = 0.0;
  for (double x : action) sq += x * x;
  return -30.0 * sq;
}

double MultiGoalEnv::goal_distance(const std::vector<double>& state) const {
  return -nearest_goal_reward(state);
}

std::vector<double> MultiGoalEnv::reset(Rng& rng) {
  state_ = {cfg_.init_noise * rng.normal(), cfg_.init_noise * rng.normal()};
  t_ = 0;
  return state_;
}

StepResult MultiGoalEnv::step(const std::vector<double>& action) {
  std::vector<double> a = clip_action(action, spec_);
  // Walls: positions saturate at the arena boundary. Without them a random
  // or half-trained policy wanders tens of units out, and the networks then
  // have to spread their resolution over that whole range.
  state_[0] = std::clamp(state_[0] + cfg_.dynamics_gain * a[0], -cfg_.arena,
                         cfg_.arena);
  state_[1] = std::clamp(state_[1] + cfg_.dynamics_gain * a[1], -cfg_.arena,
                         cfg_.arena);
  check_finite_vec(state_, "state");
  ++t_;

  // The penalty applies to the action as emitted, not as saturated. If it
  // capped at the box, a max-entropy policy could spread its mass arbitrarily
  // wide at bounded cost, the soft value supremum would be infinite, and
  // training would chase it by collapsing the flow's scale (which is exactly
  // what happens in practice).
  StepResult r;
  r.state = state_;
  r.reward = nearest_goal_reward(state_) + action_cost(action);
  r.truncated = t_ >= cfg_.horizon;
  r.done = r.truncated;
  return r;
}

OneStepEnv::OneStepEnv() {
  spec_.state_dim = 1;
  spec_.action_dim = 1;
  spec_.action_low = {-2.0};
  spec_.action_high = {2.0};
  spec_.horizon = 1;
  state_ = {0.0};
}

double OneStepEnv::reward(double state, double action) {
  double c = 0.5 + 0.5 * std::fabs(state);
  double lo = action - c;
  double hi = action + c;
  return -std::min(lo * lo, hi * hi);
}

std::vector<double> OneStepEnv::reset(Rng& rng) {
  state_ = {rng.uniform(-1.0, 1.0)};
  return state_;
}

StepResult OneStepEnv::step(const std::vector<double>& action) {
  clip_action(action, spec_);  // shape and finiteness validation
  StepResult r;
  r.state = state_;
  // Raw action for the same reason as the multi-goal env: the quadratic
  // tail keeps the soft value integral finite.
  r.reward = reward(state_[0], action[0]);
  r.done = true;  // genuine terminal: no bootstrapping past it
  r.truncated = false;
  return r;
}

}  // namespace meow
