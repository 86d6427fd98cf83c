// Flow plus twin learned shift heads.
//
// Each head adds a state-only scalar b(s) to both Q and V. The addition
// cancels in (Q - V)/alpha, so the sampling density never changes; what it
// buys is a free offset for the Bellman targets, and with two independent
// heads the target can take the pessimistic min over shifted values while
// the expensive flow is shared rather than duplicated.

#pragma once

#include <string>
#include <vector>

#include "meow/flow.hpp"

namespace meow {

// state -> hidden -> swish -> scalar
struct ShiftHead {
  Linear l1;
  Linear l2;

  ShiftHead() = default;
  ShiftHead(int state_dim, int hidden, Rng& rng);

  Tensor operator()(const Tensor& s) const;       // rank-0
  double value(const std::vector<double>& s) const;  // eager, never taped
  void collect(const std::string& prefix, ParamList& out) const;
};

struct ModelConfig {
  FlowConfig flow;
  int shift_hidden = 256;
};

class MeowModel {
 public:
  MeowModel(const ModelConfig& cfg, Rng& rng);

  FlowModel& flow() { return flow_; }
  const FlowModel& flow() const { return flow_; }
  double alpha() const { return cfg_.flow.alpha; }
  const ModelConfig& config() const { return cfg_; }

  // Both shifted Qs from a single flow pass (and a single dropout draw),
  // plus the determinant terms the training loop logs.
  struct QPair {
    Tensor q1, q2;
    Tensor b1, b2;
    Tensor logdet_n, logdet_l;
  };
  QPair q_pair(const Tensor& s, const Tensor& a, const EvalCtx& ctx) const;

  // head is 1 or 2.
  Tensor q_shifted(const Tensor& s, const Tensor& a, int head,
                   const EvalCtx& ctx) const;
  Tensor v_shifted(const Tensor& s, int head, const EvalCtx& ctx) const;
  // soft_v(s) + min(b1(s), b2(s)); gradient reaches only the selected head.
  Tensor v_clip(const Tensor& s, const EvalCtx& ctx) const;

  // Plain-double pessimistic value for Bellman targets; records nothing.
  double v_clip_value(const std::vector<double>& s) const;

  // Overwrites both shift heads' output bias so each head starts near v.
  // Centering the heads on the data's return scale before the first update
  // lets them absorb the reward level instead of racing the flow for it.
  void set_shift_bias(double v);

  ParamList parameters() const;
  MeowModel clone() const;

 private:
  Tensor scaled(const Tensor& s) const;

  ModelConfig cfg_;
  FlowModel flow_;
  ShiftHead b1_;
  ShiftHead b2_;

  const ShiftHead& head(int which) const;
};

}  // namespace meow
