#include "meow/policy.hpp"

#include <cmath>

namespace meow {

std::vector<double> sample_action(const PreparedFlow& flow, Rng& rng) {
  std::vector<double> z(flow.action_dim());
  for (double& v : z) v = rng.normal();
  return flow.inverse(z);
}

std::vector<double> sample_action(const FlowModel& model,
                                  const std::vector<double>& s, Rng& rng) {
  return sample_action(model.prepare(s), rng);
}

std::vector<double> deterministic_action(const PreparedFlow& flow) {
  if (flow.has_affine_blocks())
    throw Error(
        "deterministic_action: affine couplings make the action-dependent "
        "Jacobian non-constant; the prior mode no longer maps to the argmax");
  return flow.inverse(std::vector<double>(flow.action_dim(), 0.0));
}

std::vector<double> deterministic_action(const FlowModel& model,
                                         const std::vector<double>& s) {
  return deterministic_action(model.prepare(s));
}

double action_log_prob(const FlowModel& model, const std::vector<double>& a,
                       const std::vector<double>& s) {
  return model.prepare(s).log_prob(a.data());
}

EvalSummary evaluate_policy(const FlowModel& model, Env& env, int episodes,
                            bool deterministic, Rng& rng) {
  if (episodes < 1) throw Error("evaluate_policy: episodes must be >= 1");
  EvalSummary out;
  out.episodes = episodes;
  std::vector<double> returns(episodes);
  double dist_sum = 0.0;
  for (int e = 0; e < episodes; ++e) {
    std::vector<double> s = env.reset(rng);
    double ret = 0.0;
    while (true) {
      PreparedFlow p = model.prepare(s);
      std::vector<double> a =
          deterministic ? deterministic_action(p) : sample_action(p, rng);
      // Evaluate the same policy that is deployed during training: the flow
      // output projected onto the feasible box.
      StepResult r = env.step(clip_action(a, env.spec()));
      ret += r.reward;
      s = r.state;
      if (r.done) break;
    }
    returns[e] = ret;
    dist_sum += env.goal_distance(s);
  }
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= episodes;
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  out.mean_return = mean;
  out.std_return = episodes > 1 ? std::sqrt(var / (episodes - 1)) : 0.0;
  out.mean_final_goal_distance = dist_sum / episodes;
  return out;
}

}  // namespace meow
