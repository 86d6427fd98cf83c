// Action selection and policy evaluation.
//
// Sampling pushes a unit-Gaussian draw through the inverse flow, so action
// density is exp((Q - V)/alpha) by construction. The greedy action is the
// inverse image of z = 0: with constant-Jacobian couplings the composed
// density is monotone in the prior density, so the prior's mode maps to the
// exact argmax of Q.

#pragma once

#include <vector>

#include "meow/envs.hpp"
#include "meow/flow.hpp"
#include "meow/model.hpp"

namespace meow {

std::vector<double> sample_action(const PreparedFlow& flow, Rng& rng);
std::vector<double> sample_action(const FlowModel& model,
                                  const std::vector<double>& s, Rng& rng);

// argmax_a Q(s, a). Requires every coupling Jacobian to be constant in the
// action (additive blocks); throws Error when affine blocks are present,
// where the argmax has no closed form.
std::vector<double> deterministic_action(const PreparedFlow& flow);
std::vector<double> deterministic_action(const FlowModel& model,
                                         const std::vector<double>& s);

double action_log_prob(const FlowModel& model, const std::vector<double>& a,
                       const std::vector<double>& s);

struct EvalSummary {
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_final_goal_distance = 0.0;
  int episodes = 0;
};

// Runs full episodes (dropout off). Undiscounted return per episode; final
// goal distance comes from Env::goal_distance at the terminal state.
EvalSummary evaluate_policy(const FlowModel& model, Env& env, int episodes,
                            bool deterministic, Rng& rng);

}  // namespace meow
