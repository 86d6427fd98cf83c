// Single-objective training loop: one environment interaction and one
// gradient step per call, soft Bellman targets from a Polyak-averaged shadow
// copy of the parameters, global-norm gradient clipping, Adam.

#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "meow/envs.hpp"
#include "meow/model.hpp"
#include "meow/replay.hpp"

namespace meow {

// theta' <- (1 - tau) theta' + tau theta, elementwise. Lists must align in
// names and shapes (both come from MeowModel::parameters()).
void polyak_update(ParamList& shadow, const ParamList& online, double tau);

double global_grad_norm(const std::vector<std::vector<double>>& grads);
// Scales all gradients by max_norm/norm when norm exceeds max_norm.
void clip_global_norm(std::vector<std::vector<double>>& grads,
                      double max_norm);

class Adam {
 public:
  Adam(double lr, size_t n_params, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  // grads[i] aligns with params[i]; both must match the construction count.
  void step(ParamList& params, const std::vector<std::vector<double>>& grads);
  int steps_taken() const { return t_; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
  bool shaped_ = false;
};

struct TrainerConfig {
  ModelConfig model;
  double gamma = 0.9;
  double tau = 0.0005;      // shadow smoothing
  double lr = 0.001;        // Adam step size
  double grad_clip = 30.0;  // global norm ceiling
  int batch_size = 256;
  size_t buffer_capacity = 1000000;
  // Uniform-random actions and no gradient updates for this many steps.
  int warmup_steps = 1000;
  uint64_t seed = 0;
};

// Per-step record. Batch statistics are NaN until updates begin.
struct StepMetrics {
  int step = 0;
  bool updated = false;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double v_clip_mean = std::numeric_limits<double>::quiet_NaN();
  double logdet_n_mean = std::numeric_limits<double>::quiet_NaN();
  double logdet_l_mean = std::numeric_limits<double>::quiet_NaN();
  double b1_mean = std::numeric_limits<double>::quiet_NaN();
  double b2_mean = std::numeric_limits<double>::quiet_NaN();
};

// Raised when the loss or a gradient stops being finite; carries the step.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(int step, const std::string& what)
      : NumericError("step " + std::to_string(step) + ": " + what),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

class Trainer {
 public:
  // The environment is borrowed and must outlive the trainer.
  Trainer(const TrainerConfig& cfg, Env& env);

  // One env interaction, then (once past warmup and the buffer can fill a
  // batch) one gradient step on the soft Bellman loss and a shadow update.
  StepMetrics train_step();

  // Mean of 0.5 (Q1 - y)^2 + 0.5 (Q2 - y)^2 over the given buffer rows,
  // recording on the caller's active tape. Targets y = r + gamma (1 - done)
  // V_clip from the shadow model never touch the tape. Fills *metrics with
  // the batch means when non-null. training=false turns dropout off, which
  // finite-difference checks need: the loss must be a fixed function of the
  // parameters across repeated evaluations.
  Tensor compute_loss(const std::vector<size_t>& rows,
                      StepMetrics* metrics = nullptr, bool training = true);

  int steps_done() const { return step_; }
  MeowModel& model() { return model_; }
  const MeowModel& model() const { return model_; }
  const MeowModel& shadow() const { return shadow_; }
  ReplayBuffer& buffer() { return buffer_; }
  const TrainerConfig& config() const { return cfg_; }
  Adam& optimizer() { return opt_; }
  const std::vector<double>& current_state() const { return state_; }

 private:
  std::vector<double> behavior_action();
  void interact();
  void update(StepMetrics& metrics);
  void center_shift_heads();

  TrainerConfig cfg_;
  Env& env_;
  Rng init_rng_;
  MeowModel model_;
  MeowModel shadow_;
  ParamList params_;
  ParamList shadow_params_;
  ReplayBuffer buffer_;
  Adam opt_;
  Tape tape_;
  Rng env_rng_, action_rng_, batch_rng_, dropout_rng_;
  std::vector<double> state_;
  int step_ = 0;
  bool shift_centered_ = false;
};

}  // namespace meow
