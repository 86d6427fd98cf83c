#include "meow/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "meow/policy.hpp"

namespace meow {

void polyak_update(ParamList& shadow, const ParamList& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw Error("polyak_update: tau must be in [0, 1]");
  if (shadow.size() != online.size())
    throw ShapeError("polyak_update: parameter count mismatch");
  for (size_t i = 0; i < shadow.size(); ++i) {
    if (shadow[i].first != online[i].first)
      throw ShapeError("polyak_update: name mismatch at " + shadow[i].first);
    Tensor& dst = shadow[i].second;
    const Tensor& src = online[i].second;
    if (dst.size() != src.size())
      throw ShapeError("polyak_update: shape mismatch at " + shadow[i].first);
    double* d = dst.mutable_data();
    const double* s = src.owned_data();
    for (int j = 0; j < dst.size(); ++j) d[j] = (1.0 - tau) * d[j] + tau * s[j];
  }
}

double global_grad_norm(const std::vector<std::vector<double>>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  return std::sqrt(sq);
}

void clip_global_norm(std::vector<std::vector<double>>& grads,
                      double max_norm) {
  if (max_norm <= 0.0) throw Error("clip_global_norm: max_norm must be > 0");
  double norm = global_grad_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm <= max_norm) return;
  double scale = max_norm / norm;
  for (auto& g : grads)
    for (double& x : g) x *= scale;
}

Adam::Adam(double lr, size_t n_params, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr < 0.0) throw Error("adam: negative learning rate");
  m_.resize(n_params);
  v_.resize(n_params);
}

void Adam::step(ParamList& params,
                const std::vector<std::vector<double>>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeError("adam step: parameter count mismatch");
  if (!shaped_) {
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].second.size(), 0.0);
      v_[i].assign(params[i].second.size(), 0.0);
    }
    shaped_ = true;
  }
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    const std::vector<double>& g = grads[i];
    if (g.size() != m_[i].size())
      throw ShapeError("adam step: gradient shape mismatch at " +
                       params[i].first);
    double* w = params[i].second.mutable_data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

Trainer::Trainer(const TrainerConfig& cfg, Env& env)
    : cfg_(cfg),
      env_(env),
      init_rng_(Rng(cfg.seed).fork(0)),
      model_(cfg.model, init_rng_),
      shadow_(model_.clone()),
      params_(model_.parameters()),
      shadow_params_(shadow_.parameters()),
      buffer_(cfg.buffer_capacity, env.spec().state_dim,
              env.spec().action_dim),
      opt_(cfg.lr, params_.size()),
      env_rng_(Rng(cfg.seed).fork(1)),
      action_rng_(Rng(cfg.seed).fork(2)),
      batch_rng_(Rng(cfg.seed).fork(3)),
      dropout_rng_(Rng(cfg.seed).fork(4)) {
  const EnvSpec& sp = env.spec();
  if (cfg.model.flow.state_dim != sp.state_dim ||
      cfg.model.flow.action_dim != sp.action_dim)
    throw Error("trainer: model dims do not match the environment");
  if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0))
    throw Error("trainer: gamma must be in [0, 1]");
  if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0))
    throw Error("trainer: tau must be in [0, 1]");
  if (cfg.batch_size < 1) throw Error("trainer: batch_size must be >= 1");
  if (cfg.grad_clip <= 0.0) throw Error("trainer: grad_clip must be > 0");
  if (cfg.warmup_steps < 0) throw Error("trainer: warmup_steps must be >= 0");
  state_ = env_.reset(env_rng_);
}

std::vector<double> Trainer::behavior_action() {
  const EnvSpec& sp = env_.spec();
  if (step_ < cfg_.warmup_steps) {
    std::vector<double> a(sp.action_dim);
    for (int i = 0; i < sp.action_dim; ++i)
      a[i] = action_rng_.uniform(sp.action_low[i], sp.action_high[i]);
    return a;
  }
  // The deployed behavior is the flow sample projected onto the action box.
  // An untrained sampler can emit actions orders of magnitude outside it, and
  // one such transition carries a reward so large that its squared Bellman
  // error dominates every later batch it lands in. Projecting here keeps all
  // stored experience inside the box the soft value integral is taken over.
  return clip_action(sample_action(model_.flow(), state_, action_rng_),
                     sp);
}

void Trainer::interact() {
  std::vector<double> a = behavior_action();
  StepResult res = env_.step(a);
  // The stored action is exactly the one stepped (already box-projected), so
  // the density model trains on what the deployed policy does. A time-limit
  // cut keeps bootstrapping (done stays false).
  bool terminal = res.done && !res.truncated;
  buffer_.push(state_, a, res.reward, res.state, terminal);
  state_ = (res.done || res.truncated) ? env_.reset(env_rng_) : res.state;
}

Tensor Trainer::compute_loss(const std::vector<size_t>& rows,
                             StepMetrics* metrics, bool training) {
  if (rows.empty()) throw Error("compute_loss: empty batch");
  EvalCtx ctx;
  ctx.training = training;
  ctx.rng = &dropout_rng_;

  double alpha = model_.alpha();
  double vclip = 0, ldn = 0, ldl = 0, b1 = 0, b2 = 0;
  Tensor total;
  std::vector<double> s(buffer_.state_dim()), s2(buffer_.state_dim());
  std::vector<double> a(buffer_.action_dim());
  for (size_t row : rows) {
    TransitionView t = buffer_.at(row);
    s.assign(t.s, t.s + buffer_.state_dim());
    a.assign(t.a, t.a + buffer_.action_dim());

    double y = t.r;
    if (!t.done) {
      s2.assign(t.s_next, t.s_next + buffer_.state_dim());
      y += cfg_.gamma * shadow_.v_clip_value(s2);
    }

    MeowModel::QPair qp = model_.q_pair(Tensor::vec(s), Tensor::vec(a), ctx);
    Tensor d1 = sub(qp.q1, Tensor::scalar(y));
    Tensor d2 = sub(qp.q2, Tensor::scalar(y));
    Tensor li = mul(add(square(d1), square(d2)), 0.5);
    total = total.defined() ? add(total, li) : li;

    if (metrics) {
      double b1v = qp.b1.item();
      double b2v = qp.b2.item();
      double ldlv = qp.logdet_l.item();
      ldn += qp.logdet_n.item();
      ldl += ldlv;
      b1 += b1v;
      b2 += b2v;
      vclip += -alpha * ldlv + std::min(b1v, b2v);
    }
  }
  Tensor loss = mul(total, 1.0 / static_cast<double>(rows.size()));
  if (metrics) {
    double n = static_cast<double>(rows.size());
    metrics->loss = loss.item();
    metrics->v_clip_mean = vclip / n;
    metrics->logdet_n_mean = ldn / n;
    metrics->logdet_l_mean = ldl / n;
    metrics->b1_mean = b1 / n;
    metrics->b2_mean = b2 / n;
  }
  return loss;
}

void Trainer::center_shift_heads() {
  // Bellman targets start at the data's reward level while the model's Q
  // starts near zero. That systematic gap makes every early residual push
  // probability mass away from every observed action, and the flow absorbs
  // the offset faster than the shift heads by throwing its mode far outside
  // the action box, after which behavior saturates and never recovers. The
  // shift heads exist to carry the value level, so start them there: the
  // empirical per-step reward times the discounted episode length.
  double sum = 0.0;
  for (size_t i = 0; i < buffer_.size(); ++i) sum += buffer_.at(i).r;
  double r_bar = sum / static_cast<double>(buffer_.size());
  int h = env_.spec().horizon;
  double length = cfg_.gamma < 1.0
                      ? (1.0 - std::pow(cfg_.gamma, h)) / (1.0 - cfg_.gamma)
                      : static_cast<double>(h);
  model_.set_shift_bias(r_bar * length);
  shadow_.set_shift_bias(r_bar * length);
}

void Trainer::update(StepMetrics& metrics) {
  if (!shift_centered_) {
    center_shift_heads();
    shift_centered_ = true;
  }
  std::vector<size_t> rows = buffer_.sample_indices(cfg_.batch_size, batch_rng_);
  tape_.clear();
  try {
    Tape::Scope scope(&tape_);
    Tensor loss = compute_loss(rows, &metrics);
    if (!std::isfinite(metrics.loss))
      throw NumericError("non-finite loss");
    GradientMap grads = tape_.backward(loss);

    std::vector<std::vector<double>> g(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      const std::vector<double>* gp = grads.find(params_[i].second);
      if (gp)
        g[i] = *gp;
      else
        g[i].assign(params_[i].second.size(), 0.0);
    }
    clip_global_norm(g, cfg_.grad_clip);
    opt_.step(params_, g);
  } catch (const NumericError& e) {
    // Any numeric failure in the update (loss, backward pass, gradient norm)
    // means training has left the representable regime.
    throw TrainingDiverged(step_, e.what());
  }
  polyak_update(shadow_params_, params_, cfg_.tau);
  metrics.updated = true;
}

StepMetrics Trainer::train_step() {
  interact();
  ++step_;
  StepMetrics metrics;
  metrics.step = step_;
  if (step_ > cfg_.warmup_steps &&
      buffer_.size() >= static_cast<size_t>(cfg_.batch_size))
    update(metrics);
  return metrics;
}

}  // namespace meow
