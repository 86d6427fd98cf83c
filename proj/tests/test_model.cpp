#include <cmath>
#include <vector>

#include "doctest.h"
#include "meow/gradcheck.hpp"
#include "meow/model.hpp"
#include "test_util.hpp"

using namespace meow;
using namespace meow::testutil;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.flow.state_dim = 2;
  cfg.flow.action_dim = 2;
  cfg.flow.couplings = 2;
  cfg.flow.hyper_hidden = 8;
  cfg.flow.cond_hidden = 4;
  cfg.flow.alpha = 1.7;
  cfg.shift_hidden = 16;
  return cfg;
}

// Pins head `which` to the constant c for every state.
void force_head(ParamList& params, int which, double c) {
  std::string prefix = which == 1 ? "shift1" : "shift2";
  fill_param(params, prefix + ".l2.W", 0.0);
  set_param(params, prefix + ".l2.b", {c});
}

}  // namespace

TEST_CASE("zero shift heads leave Q and V untouched") {
  Rng rng(7);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  force_head(params, 1, 0.0);
  force_head(params, 2, 0.0);

  EvalCtx ctx;
  Rng data(8);
  for (int t = 0; t < 10; ++t) {
    Tensor s = Tensor::vec(random_vec(data, 2, -2, 2));
    Tensor a = Tensor::vec(random_vec(data, 2, -2, 2));
    double q = model.flow().soft_q(s, a, ctx).item();
    double v = model.flow().soft_v(s, ctx).item();
    CHECK(model.q_shifted(s, a, 1, ctx).item() == q);
    CHECK(model.q_shifted(s, a, 2, ctx).item() == q);
    CHECK(model.v_shifted(s, 1, ctx).item() == v);
    CHECK(model.v_shifted(s, 2, ctx).item() == v);
    CHECK(model.v_clip(s, ctx).item() == v);
  }
}

TEST_CASE("shifted quantities are plain additions of the head output") {
  Rng rng(17);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(18);
  randomize_params(params, noise, -0.2, 0.2);
  force_head(params, 1, 0.5);
  force_head(params, 2, 5.0);

  EvalCtx ctx;
  Tensor s = Tensor::vec({0.4, -1.2});
  Tensor a = Tensor::vec({0.9, 0.1});
  double q = model.flow().soft_q(s, a, ctx).item();
  double v = model.flow().soft_v(s, ctx).item();

  CHECK(model.q_shifted(s, a, 1, ctx).item() ==
        doctest::Approx(q + 0.5).epsilon(1e-15));
  CHECK(model.v_shifted(s, 2, ctx).item() ==
        doctest::Approx(v + 5.0).epsilon(1e-15));

  // min(b1, b2) = 0.5 selects head 1.
  CHECK(model.v_clip(s, ctx).item() ==
        doctest::Approx(v + 0.5).epsilon(1e-15));
}

TEST_CASE("pessimistic value equals the min over shifted values, both factorizations") {
  Rng rng(27);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(28);
  randomize_params(params, noise, -0.3, 0.3);

  EvalCtx ctx;
  Rng data(29);
  for (int t = 0; t < 50; ++t) {
    Tensor s = Tensor::vec(random_vec(data, 2, -3, 3));
    double vc = model.v_clip(s, ctx).item();
    double v1 = model.v_shifted(s, 1, ctx).item();
    double v2 = model.v_shifted(s, 2, ctx).item();
    CHECK(vc == std::min(v1, v2));  // exactly, both ways of computing it
    CHECK(vc <= v1);
    CHECK(vc <= v2);
  }
}

TEST_CASE("equal heads collapse the min") {
  Rng rng(37);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  force_head(params, 1, 1.25);
  force_head(params, 2, 1.25);

  EvalCtx ctx;
  Tensor s = Tensor::vec({0.7, 0.7});
  CHECK(model.v_clip(s, ctx).item() == model.v_shifted(s, 1, ctx).item());
  CHECK(model.v_clip(s, ctx).item() == model.v_shifted(s, 2, ctx).item());
}

TEST_CASE("shifts cancel exactly in the log-density") {
  Rng rng(47);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(48);
  randomize_params(params, noise, -0.3, 0.3);

  double alpha = model.alpha();
  EvalCtx ctx;
  Rng data(49);
  for (int t = 0; t < 100; ++t) {
    Tensor s = Tensor::vec(random_vec(data, 2, -3, 3));
    Tensor a = Tensor::vec(random_vec(data, 2, -3, 3));
    double lp = model.flow().log_prob(a, s, ctx).item();
    for (int head : {1, 2}) {
      double q = model.q_shifted(s, a, head, ctx).item();
      double v = model.v_shifted(s, head, ctx).item();
      CHECK((q - v) / alpha == doctest::Approx(lp).epsilon(1e-12));
    }
  }
}

TEST_CASE("gradient of the pessimistic value skips the losing head") {
  Rng rng(57);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(58);
  randomize_params(params, noise, -0.2, 0.2);
  force_head(params, 1, -1.0);  // winner (min)
  force_head(params, 2, 4.0);

  EvalCtx ctx;
  Tensor s = Tensor::vec({1.0, -1.0});
  Tape tape;
  Tape::Scope scope(&tape);
  GradientMap grads = tape.backward(model.v_clip(s, ctx));

  double losing = 0.0, winning = 0.0;
  for (auto& [name, t] : params) {
    const std::vector<double>* g = grads.find(t);
    double mag = 0.0;
    if (g != nullptr)
      for (double x : *g) mag += std::fabs(x);
    if (name.rfind("shift2", 0) == 0) losing += mag;
    if (name.rfind("shift1", 0) == 0) winning += mag;
  }
  CHECK(losing == 0.0);
  CHECK(winning > 0.0);
}

TEST_CASE("pessimistic value gradients match finite differences") {
  Rng rng(67);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(68);
  randomize_params(params, noise, -0.2, 0.2);

  EvalCtx ctx;
  Tensor s = Tensor::vec({0.3, -0.8});
  GradCheckReport r =
      finite_diff_check([&] { return model.v_clip(s, ctx); }, params, 1e-5);
  CAPTURE(r.worst_param);
  CHECK(r.max_rel_error < 1e-4);

  Tensor a = Tensor::vec({0.6, 0.2});
  GradCheckReport rq = finite_diff_check(
      [&] { return model.q_shifted(s, a, 2, ctx); }, params, 1e-5);
  CAPTURE(rq.worst_param);
  CHECK(rq.max_rel_error < 1e-4);
}

TEST_CASE("eager pessimistic value agrees with the taped one") {
  Rng rng(77);
  MeowModel model(small_cfg(), rng);
  ParamList params = model.parameters();
  Rng noise(78);
  randomize_params(params, noise, -0.3, 0.3);

  EvalCtx ctx;
  Rng data(79);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> s = random_vec(data, 2, -3, 3);
    CHECK(model.v_clip_value(s) ==
          doctest::Approx(model.v_clip(Tensor::vec(s), ctx).item())
              .epsilon(1e-13));
  }
}

TEST_CASE("model clone is a deep copy") {
  Rng rng(87);
  MeowModel model(small_cfg(), rng);
  MeowModel copy = model.clone();

  std::vector<double> s{0.5, 0.1};
  double before = copy.v_clip_value(s);
  CHECK(before == model.v_clip_value(s));

  ParamList params = model.parameters();
  Rng noise(88);
  randomize_params(params, noise, -0.5, 0.5);
  CHECK(copy.v_clip_value(s) == before);
  CHECK(model.v_clip_value(s) != before);

  // Same ordered names so shadow parameters align index-by-index.
  ParamList a = model.parameters(), b = copy.parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
  }
}

TEST_CASE("invalid head index is rejected") {
  Rng rng(97);
  MeowModel model(small_cfg(), rng);
  EvalCtx ctx;
  Tensor s = Tensor::vec({0.0, 0.0});
  CHECK_THROWS_AS((void)model.v_shifted(s, 0, ctx), Error);
  CHECK_THROWS_AS((void)model.v_shifted(s, 3, ctx), Error);
}
