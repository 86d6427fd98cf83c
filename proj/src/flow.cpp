#include "meow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace meow {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Mirrors the tape kernels exactly so a PreparedFlow reproduces the taped
// forward bit-for-bit at the same state.
double eager_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double eager_swish(double x) { return x * eager_sigmoid(x); }

void check_finite(const double* p, int n, const char* what) {
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) throw NumericError(std::string(what) + " is not finite");
}

}  // namespace

Tensor CouplingWeightNet::operator()(const Tensor& s, const EvalCtx& ctx) const {
  Tensor h = swish(layer_norm(l1(s), ln_gain, ln_bias));
  h = dropout(h, dropout_rate, ctx.training, ctx.rng);
  return l2(h);
}

void CouplingWeightNet::collect(const std::string& prefix, ParamList& out) const {
  l1.collect(prefix + ".l1", out);
  out.emplace_back(prefix + ".ln.gain", ln_gain);
  out.emplace_back(prefix + ".ln.bias", ln_bias);
  l2.collect(prefix + ".l2", out);
}

Tensor ScaleShiftNet::operator()(const Tensor& s, const EvalCtx&) const {
  return l2(swish(l1(s)));
}

void ScaleShiftNet::collect(const std::string& prefix, ParamList& out) const {
  l1.collect(prefix + ".l1", out);
  l2.collect(prefix + ".l2", out);
}

int CouplingBlock::generated_count() const {
  int rows = shift_len * (affine ? 2 : 1);
  return hidden * pass_len + hidden + rows * hidden + rows;
}

CouplingBlock::Result CouplingBlock::forward(const Tensor& x,
                                             const Tensor& gen) const {
  int rows = shift_len * (affine ? 2 : 1);
  int off = 0;
  Tensor w1 =
      slice(gen, off, hidden * pass_len).reshaped(Shape::mat(hidden, pass_len));
  off += hidden * pass_len;
  Tensor b1 = slice(gen, off, hidden);
  off += hidden;
  Tensor w2 = slice(gen, off, rows * hidden).reshaped(Shape::mat(rows, hidden));
  off += rows * hidden;
  Tensor b2 = slice(gen, off, rows);

  Tensor xp = slice(x, pass_off, pass_len);
  Tensor xs = slice(x, shift_off, shift_len);
  Tensor out = meow::affine(w2, swish(meow::affine(w1, xp, b1)), b2);

  Result res;
  Tensor ys;
  if (affine) {
    Tensor t = slice(out, 0, shift_len);
    Tensor r = slice(out, shift_len, shift_len);
    ys = add(mul(xs, exp(r)), t);
    res.logdet = sum(r);
  } else {
    ys = add(xs, out);
  }
  res.y = pass_off == 0 ? concat(xp, ys) : concat(ys, xp);
  return res;
}

namespace {

CouplingWeightNet make_coupling_net(const FlowConfig& cfg,
                                    const CouplingBlock& block, Rng& rng) {
  CouplingWeightNet net;
  net.dropout_rate = cfg.dropout_rate;
  net.l1 = Linear(cfg.state_dim, cfg.hyper_hidden, rng);
  net.ln_gain = Tensor::parameter(
      Shape::vec(cfg.hyper_hidden), std::vector<double>(cfg.hyper_hidden, 1.0));
  net.ln_bias = Tensor::parameter(
      Shape::vec(cfg.hyper_hidden), std::vector<double>(cfg.hyper_hidden, 0.0));
  int n_gen = block.generated_count();
  net.l2 = Linear(cfg.hyper_hidden, n_gen, rng);

  // Identity start with live gradients. The emitted vector at init equals
  // this bias: the conditioner's first layer gets a standard random init so
  // its activations are non-degenerate, while its output layer is zero, so
  // the block's shift (and scale exponent) is exactly 0. Zeroing the first
  // layer too would pin the output-layer gradient at swish(0) = 0 forever.
  std::vector<double> w2(static_cast<size_t>(n_gen) * cfg.hyper_hidden, 0.0);
  std::vector<double> bias(n_gen, 0.0);
  double bound = 1.0 / std::sqrt(static_cast<double>(block.pass_len));
  for (int i = 0; i < block.hidden * block.pass_len + block.hidden; ++i)
    bias[i] = rng.uniform(-bound, bound);
  fill_linear(net.l2, w2, bias);
  return net;
}

}  // namespace

FlowModel::FlowModel(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.state_dim <= 0 || cfg.action_dim <= 0)
    throw Error("FlowModel: state_dim and action_dim must be positive");
  if (cfg.couplings < 0) throw Error("FlowModel: couplings must be >= 0");
  if (cfg.alpha <= 0.0) throw Error("FlowModel: alpha must be positive");
  if (cfg.cond_hidden <= 0 || cfg.hyper_hidden <= 0)
    throw Error("FlowModel: hidden sizes must be positive");

  int d = cfg.action_dim;
  int k = (d + 1) / 2;
  // With one action dimension there is nothing to couple; the linear layer
  // alone carries the density.
  if (d >= 2) {
    for (int i = 0; i < cfg.couplings; ++i) {
      CouplingBlock b;
      b.hidden = cfg.cond_hidden;
      b.affine = cfg.affine_couplings;
      // Roles swap each block: [0,k) and [k,d) take turns passing through,
      // so every dimension is shifted by half the blocks.
      if (i % 2 == 0) {
        b.pass_off = 0;
        b.pass_len = k;
        b.shift_off = k;
        b.shift_len = d - k;
      } else {
        b.pass_off = k;
        b.pass_len = d - k;
        b.shift_off = 0;
        b.shift_len = k;
      }
      b.net = make_coupling_net(cfg, b, rng);
      blocks_.push_back(std::move(b));
    }
  }

  linear_net_.l1 = Linear(cfg.state_dim, cfg.hyper_hidden, rng);
  linear_net_.l2 = Linear(cfg.hyper_hidden, 2 * d, rng);
  // Zero final layer: scale = exp(0) = 1 and shift = 0, identity at init.
  fill_linear(linear_net_.l2,
              std::vector<double>(static_cast<size_t>(2 * d) * cfg.hyper_hidden, 0.0),
              std::vector<double>(2 * d, 0.0));
}

Tensor FlowModel::scaled_state(const Tensor& s) const {
  if (cfg_.state_scale == 1.0) return s;
  return mul(s, cfg_.state_scale);
}

FlowForward FlowModel::forward(const Tensor& a, const Tensor& s,
                               const EvalCtx& ctx) const {
  if (a.size() != cfg_.action_dim)
    throw ShapeError("flow forward: action has wrong size");
  if (s.size() != cfg_.state_dim)
    throw ShapeError("flow forward: state has wrong size");

  Tensor x = a;
  Tensor ldn;
  Tensor sn = scaled_state(s);
  for (const CouplingBlock& b : blocks_) {
    Tensor gen = b.net(sn, ctx);
    CouplingBlock::Result res = b.forward(x, gen);
    x = res.y;
    if (res.logdet.defined())
      ldn = ldn.defined() ? add(ldn, res.logdet) : res.logdet;
  }

  int d = cfg_.action_dim;
  Tensor raw = linear_net_(sn, ctx);
  Tensor raw_scale = slice(raw, 0, d);
  Tensor offset = slice(raw, d, d);

  FlowForward out;
  out.z = add(mul(exp(raw_scale), x), offset);
  out.logdet_n = ldn.defined() ? ldn : Tensor::scalar(0.0);
  out.logdet_l = sum(raw_scale);
  return out;
}

Tensor FlowModel::soft_q(const Tensor& s, const Tensor& a,
                         const EvalCtx& ctx) const {
  return soft_q_from(forward(a, s, ctx));
}

Tensor FlowModel::soft_q_from(const FlowForward& f) const {
  return mul(add(gaussian_log_prob(f.z), f.logdet_n), cfg_.alpha);
}

Tensor FlowModel::soft_v(const Tensor& s, const EvalCtx& ctx) const {
  if (s.size() != cfg_.state_dim)
    throw ShapeError("soft_v: state has wrong size");
  Tensor raw = linear_net_(scaled_state(s), ctx);
  return mul(sum(slice(raw, 0, cfg_.action_dim)), -cfg_.alpha);
}

Tensor FlowModel::log_prob(const Tensor& a, const Tensor& s,
                           const EvalCtx& ctx) const {
  FlowForward f = forward(a, s, ctx);
  return add(add(gaussian_log_prob(f.z), f.logdet_n), f.logdet_l);
}

std::vector<double> FlowModel::inverse(const std::vector<double>& z,
                                       const std::vector<double>& s) const {
  return prepare(s).inverse(z);
}

PreparedFlow FlowModel::prepare(const std::vector<double>& s_raw) const {
  if (static_cast<int>(s_raw.size()) != cfg_.state_dim)
    throw ShapeError("prepare: state has wrong size");

  Tape::Scope no_tape(nullptr);
  EvalCtx ctx;
  std::vector<double> s_in(s_raw);
  for (double& v : s_in) v *= cfg_.state_scale;
  Tensor s = Tensor::vec(s_in);

  PreparedFlow p;
  p.alpha_ = cfg_.alpha;
  p.dim_ = cfg_.action_dim;
  p.affine_ = cfg_.affine_couplings && !blocks_.empty();

  int max_hidden = 0;
  int max_rows = 0;
  for (const CouplingBlock& b : blocks_) {
    std::vector<double> g = b.net(s, ctx).values();
    PreparedFlow::Block pb;
    pb.pass_off = b.pass_off;
    pb.pass_len = b.pass_len;
    pb.shift_off = b.shift_off;
    pb.shift_len = b.shift_len;
    pb.hidden = b.hidden;
    pb.affine = b.affine;
    pb.rows = b.shift_len * (b.affine ? 2 : 1);
    auto it = g.begin();
    pb.w1.assign(it, it + b.hidden * b.pass_len);
    it += b.hidden * b.pass_len;
    pb.b1.assign(it, it + b.hidden);
    it += b.hidden;
    pb.w2.assign(it, it + pb.rows * b.hidden);
    it += pb.rows * b.hidden;
    pb.b2.assign(it, it + pb.rows);
    max_hidden = std::max(max_hidden, b.hidden);
    max_rows = std::max(max_rows, pb.rows);
    p.blocks_.push_back(std::move(pb));
  }

  int d = cfg_.action_dim;
  std::vector<double> raw = linear_net_(s, ctx).values();
  p.scale_.resize(d);
  p.shift_.resize(d);
  p.logdet_l_ = 0.0;
  for (int i = 0; i < d; ++i) {
    p.scale_[i] = std::exp(raw[i]);
    p.shift_[i] = raw[d + i];
    p.logdet_l_ += raw[i];
  }
  check_finite(p.scale_.data(), d, "prepared scale");
  check_finite(p.shift_.data(), d, "prepared shift");

  p.xbuf_.resize(d);
  p.hbuf_.resize(std::max(max_hidden, 1));
  p.obuf_.resize(std::max(max_rows, 1));
  p.zbuf_.resize(d);
  return p;
}

double PreparedFlow::forward(const double* a, double* z) const {
  std::copy(a, a + dim_, xbuf_.begin());
  double ldn = 0.0;
  for (const Block& b : blocks_) {
    const double* xp = xbuf_.data() + b.pass_off;
    for (int j = 0; j < b.hidden; ++j) {
      const double* row = b.w1.data() + static_cast<size_t>(j) * b.pass_len;
      double acc = 0.0;
      for (int i = 0; i < b.pass_len; ++i) acc += row[i] * xp[i];
      hbuf_[j] = eager_swish(acc + b.b1[j]);
    }
    for (int r = 0; r < b.rows; ++r) {
      const double* row = b.w2.data() + static_cast<size_t>(r) * b.hidden;
      double acc = 0.0;
      for (int j = 0; j < b.hidden; ++j) acc += row[j] * hbuf_[j];
      obuf_[r] = acc + b.b2[r];
    }
    double* xs = xbuf_.data() + b.shift_off;
    if (b.affine) {
      for (int i = 0; i < b.shift_len; ++i) {
        double r = obuf_[b.shift_len + i];
        xs[i] = xs[i] * std::exp(r) + obuf_[i];
        ldn += r;
      }
    } else {
      for (int i = 0; i < b.shift_len; ++i) xs[i] = xs[i] + obuf_[i];
    }
  }
  for (int i = 0; i < dim_; ++i) z[i] = scale_[i] * xbuf_[i] + shift_[i];
  check_finite(z, dim_, "flow output");
  if (!std::isfinite(ldn)) throw NumericError("coupling log-det is not finite");
  return ldn;
}

double PreparedFlow::soft_q(const double* a) const {
  double ldn = forward(a, zbuf_.data());
  double sq = 0.0;
  for (int i = 0; i < dim_; ++i) sq += zbuf_[i] * zbuf_[i];
  double lpz = -0.5 * sq - 0.5 * dim_ * kLog2Pi;
  return alpha_ * (lpz + ldn);
}

double PreparedFlow::log_prob(const double* a) const {
  double ldn = forward(a, zbuf_.data());
  double sq = 0.0;
  for (int i = 0; i < dim_; ++i) sq += zbuf_[i] * zbuf_[i];
  double lpz = -0.5 * sq - 0.5 * dim_ * kLog2Pi;
  return lpz + ldn + logdet_l_;
}

std::vector<double> PreparedFlow::inverse(const std::vector<double>& z) const {
  if (static_cast<int>(z.size()) != dim_)
    throw ShapeError("inverse: latent has wrong size");
  std::vector<double> x(dim_);
  for (int i = 0; i < dim_; ++i) x[i] = (z[i] - shift_[i]) / scale_[i];
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    const Block& b = *it;
    const double* xp = x.data() + b.pass_off;
    for (int j = 0; j < b.hidden; ++j) {
      const double* row = b.w1.data() + static_cast<size_t>(j) * b.pass_len;
      double acc = 0.0;
      for (int i = 0; i < b.pass_len; ++i) acc += row[i] * xp[i];
      hbuf_[j] = eager_swish(acc + b.b1[j]);
    }
    for (int r = 0; r < b.rows; ++r) {
      const double* row = b.w2.data() + static_cast<size_t>(r) * b.hidden;
      double acc = 0.0;
      for (int j = 0; j < b.hidden; ++j) acc += row[j] * hbuf_[j];
      obuf_[r] = acc + b.b2[r];
    }
    double* xs = x.data() + b.shift_off;
    if (b.affine) {
      for (int i = 0; i < b.shift_len; ++i)
        xs[i] = (xs[i] - obuf_[i]) * std::exp(-obuf_[b.shift_len + i]);
    } else {
      for (int i = 0; i < b.shift_len; ++i) xs[i] = xs[i] - obuf_[i];
    }
  }
  check_finite(x.data(), dim_, "inverse output");
  return x;
}

ParamList FlowModel::parameters(const std::string& prefix) const {
  ParamList out;
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].net.collect(prefix + ".c" + std::to_string(i) + ".net", out);
  linear_net_.collect(prefix + ".lin.net", out);
  return out;
}

FlowModel FlowModel::clone() const {
  Rng scratch(0);
  FlowModel copy(cfg_, scratch);
  ParamList src = parameters();
  ParamList dst = copy.parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    std::vector<double> v = src[i].second.values();
    std::copy(v.begin(), v.end(), dst[i].second.mutable_data());
  }
  return copy;
}

}  // namespace meow
