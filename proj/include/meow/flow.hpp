// State-conditioned invertible action model.
//
// The action-to-latent map g(a|s) is a stack of additive (optionally affine)
// coupling blocks followed by an elementwise linear layer, with every weight
// in the stack emitted by per-layer generator networks that read the state.
// The log-Jacobian splits into a part that depends on the action (coupling
// scales; identically zero for additive blocks) and a part that depends on
// the state alone (the linear layer). That split is what makes the soft
// value exact: V(s) = -alpha * logdet_linear(s), no integration, while
// Q(s,a) = alpha * (log p_z(g(a|s)) + logdet_coupling).

#pragma once

#include <string>
#include <vector>

#include "meow/nn.hpp"
#include "meow/tensor.hpp"

namespace meow {

struct FlowConfig {
  int state_dim = 2;
  int action_dim = 2;
  int couplings = 4;
  // Affine blocks add a learned scale in each coupling: more expressive, but
  // the action-dependent Jacobian breaks closed-form argmax inference.
  bool affine_couplings = false;
  int hyper_hidden = 64;  // generator nets, both kinds
  int cond_hidden = 16;   // conditioner MLP inside each coupling
  double dropout_rate = 0.1;
  double alpha = 2.5;  // temperature; scales Q, V, and the sampling density
  // Input normalization: every network reads state * state_scale. Freshly
  // initialized layers resolve structure at an input length scale of about
  // one, and a few thousand updates are not enough to relearn that scale, so
  // tasks whose states span tens of units need it brought down here. Only
  // network inputs are affected; none of the density algebra sees it.
  double state_scale = 1.0;
};

// Generator for coupling-block weights: state -> hidden -> layer norm ->
// swish -> dropout -> flat weight vector. The final layer starts at an
// exact-identity configuration (see CouplingBlock).
struct CouplingWeightNet {
  Linear l1;
  Tensor ln_gain;
  Tensor ln_bias;
  Linear l2;
  double dropout_rate = 0.0;

  Tensor operator()(const Tensor& s, const EvalCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// Generator for the elementwise linear layer: state -> hidden -> swish ->
// (raw_scale, shift). Zero-initialized final layer, so scale starts at
// exp(0) = 1 and shift at 0.
struct ScaleShiftNet {
  Linear l1;
  Linear l2;

  Tensor operator()(const Tensor& s, const EvalCtx& ctx) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

// One coupling block. The pass half goes through unchanged and feeds a small
// conditioner MLP (weights emitted by `net`) that shifts, and for affine
// blocks also rescales, the other half. Masks are contiguous and alternate
// between blocks so every dimension gets mixed.
struct CouplingBlock {
  int pass_off = 0;
  int pass_len = 0;
  int shift_off = 0;
  int shift_len = 0;
  int hidden = 0;
  bool affine = false;
  CouplingWeightNet net;

  int generated_count() const;

  struct Result {
    Tensor y;
    Tensor logdet;  // undefined for additive blocks (identically zero)
  };
  // x through the block, conditioner weights taken from `gen` (the flat
  // vector produced by net).
  Result forward(const Tensor& x, const Tensor& gen) const;
};

struct FlowForward {
  Tensor z;
  Tensor logdet_n;  // action-dependent part (couplings); scalar
  Tensor logdet_l;  // state-only part (linear layer); scalar
};

// Plain-double snapshot of the flow at one fixed state: every generated
// weight is materialized once, after which Q / log-density / inverse calls
// are tight loops with no tape and no allocation. This is the path for
// sampling, rollouts, quadrature, and Monte Carlo estimates.
//
// Uses internal scratch buffers: share one instance per thread only.
class PreparedFlow {
 public:
  int action_dim() const { return dim_; }
  double alpha() const { return alpha_; }
  bool has_affine_blocks() const { return affine_; }

  double logdet_l() const { return logdet_l_; }
  double soft_v() const { return -alpha_ * logdet_l_; }

  // z = g(a|s); returns the action-dependent log-Jacobian part.
  double forward(const double* a, double* z) const;
  double soft_q(const double* a) const;
  double log_prob(const double* a) const;
  std::vector<double> inverse(const std::vector<double>& z) const;

 private:
  friend class FlowModel;

  struct Block {
    int pass_off, pass_len, shift_off, shift_len, hidden, rows;
    bool affine;
    std::vector<double> w1, b1, w2, b2;
  };

  std::vector<Block> blocks_;
  std::vector<double> scale_;
  std::vector<double> shift_;
  double logdet_l_ = 0.0;
  double alpha_ = 1.0;
  int dim_ = 0;
  bool affine_ = false;

  mutable std::vector<double> xbuf_, hbuf_, obuf_, zbuf_;
};

class FlowModel {
 public:
  FlowModel(const FlowConfig& cfg, Rng& rng);

  // Scalar-output ops record onto the active tape, so gradients w.r.t. every
  // generator weight are available. Argument order mirrors usage: Q takes
  // (state, action), the density takes (action, state).
  FlowForward forward(const Tensor& a, const Tensor& s,
                      const EvalCtx& ctx) const;
  Tensor soft_q(const Tensor& s, const Tensor& a, const EvalCtx& ctx) const;
  // Q from an already-computed forward pass (shared across the twin heads).
  Tensor soft_q_from(const FlowForward& f) const;
  Tensor soft_v(const Tensor& s, const EvalCtx& ctx) const;
  Tensor log_prob(const Tensor& a, const Tensor& s, const EvalCtx& ctx) const;

  // Eager inverse at a fixed state (evaluation mode, never taped).
  std::vector<double> inverse(const std::vector<double>& z,
                              const std::vector<double>& s) const;

  PreparedFlow prepare(const std::vector<double>& s) const;

  ParamList parameters(const std::string& prefix = "flow") const;
  const FlowConfig& config() const { return cfg_; }

  // Deep copy with fresh parameter storage (shadow/target models).
  FlowModel clone() const;

 private:
  Tensor scaled_state(const Tensor& s) const;

  FlowConfig cfg_;
  std::vector<CouplingBlock> blocks_;
  ScaleShiftNet linear_net_;
};

}  // namespace meow
