#include "meow/model.hpp"

#include <algorithm>

namespace meow {

ShiftHead::ShiftHead(int state_dim, int hidden, Rng& rng)
    : l1(state_dim, hidden, rng), l2(hidden, 1, rng) {}

Tensor ShiftHead::operator()(const Tensor& s) const {
  // sum() collapses the length-1 output to rank 0 so head values combine
  // with the scalar Q/V terms directly.
  return sum(l2(swish(l1(s))));
}

double ShiftHead::value(const std::vector<double>& s) const {
  Tape::Scope no_tape(nullptr);
  return (*this)(Tensor::vec(s)).item();
}

void ShiftHead::collect(const std::string& prefix, ParamList& out) const {
  l1.collect(prefix + ".l1", out);
  l2.collect(prefix + ".l2", out);
}

void MeowModel::set_shift_bias(double v) {
  b1_.l2.b.mutable_data()[0] = v;
  b2_.l2.b.mutable_data()[0] = v;
}

MeowModel::MeowModel(const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg),
      flow_(cfg.flow, rng),
      b1_(cfg.flow.state_dim, cfg.shift_hidden, rng),
      b2_(cfg.flow.state_dim, cfg.shift_hidden, rng) {
  if (cfg.shift_hidden <= 0) throw Error("MeowModel: shift_hidden must be positive");
}

const ShiftHead& MeowModel::head(int which) const {
  if (which == 1) return b1_;
  if (which == 2) return b2_;
  throw Error("head index must be 1 or 2");
}

// The flow normalizes its own network inputs; the shift heads share the same
// convention so every net sees states on the same footing.
Tensor MeowModel::scaled(const Tensor& s) const {
  if (cfg_.flow.state_scale == 1.0) return s;
  return mul(s, cfg_.flow.state_scale);
}

Tensor MeowModel::q_shifted(const Tensor& s, const Tensor& a, int which,
                            const EvalCtx& ctx) const {
  return add(flow_.soft_q(s, a, ctx), head(which)(scaled(s)));
}

MeowModel::QPair MeowModel::q_pair(const Tensor& s, const Tensor& a,
                                   const EvalCtx& ctx) const {
  FlowForward f = flow_.forward(a, s, ctx);
  Tensor q = flow_.soft_q_from(f);
  Tensor sn = scaled(s);
  QPair out;
  out.b1 = b1_(sn);
  out.b2 = b2_(sn);
  out.q1 = add(q, out.b1);
  out.q2 = add(q, out.b2);
  out.logdet_n = f.logdet_n;
  out.logdet_l = f.logdet_l;
  return out;
}

Tensor MeowModel::v_shifted(const Tensor& s, int which,
                            const EvalCtx& ctx) const {
  return add(flow_.soft_v(s, ctx), head(which)(scaled(s)));
}

Tensor MeowModel::v_clip(const Tensor& s, const EvalCtx& ctx) const {
  Tensor sn = scaled(s);
  return add(flow_.soft_v(s, ctx), minimum(b1_(sn), b2_(sn)));
}

double MeowModel::v_clip_value(const std::vector<double>& s) const {
  Tape::Scope no_tape(nullptr);
  EvalCtx ctx;
  double v = flow_.soft_v(Tensor::vec(s), ctx).item();
  std::vector<double> sn(s);
  for (double& x : sn) x *= cfg_.flow.state_scale;
  return v + std::min(b1_.value(sn), b2_.value(sn));
}

ParamList MeowModel::parameters() const {
  ParamList out = flow_.parameters("flow");
  b1_.collect("shift1", out);
  b2_.collect("shift2", out);
  return out;
}

MeowModel MeowModel::clone() const {
  Rng scratch(0);
  MeowModel copy(cfg_, scratch);
  ParamList src = parameters();
  ParamList dst = copy.parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    std::vector<double> v = src[i].second.values();
    std::copy(v.begin(), v.end(), dst[i].second.mutable_data());
  }
  return copy;
}

}  // namespace meow
