#include <cmath>
#include <vector>

#include "doctest.h"
#include "meow/envs.hpp"
#include "meow/policy.hpp"
#include "meow/value_oracle.hpp"
#include "test_util.hpp"

using namespace meow;
using namespace meow::testutil;

namespace {

const double kLog2Pi = 1.8378770664093454835606594728112;

FlowModel random_additive(uint64_t seed, double mag = 0.15) {
  Rng rng(seed);
  FlowModel model(FlowConfig{}, rng);
  ParamList params = model.parameters();
  Rng noise(seed + 1);
  randomize_params(params, noise, -mag, mag);
  return model;
}

}  // namespace

TEST_CASE("identity flow samples a standard normal") {
  Rng rng(3);
  FlowModel model(FlowConfig{}, rng);
  PreparedFlow p = model.prepare({0.2, -0.7});

  const int N = 100000;
  double m0 = 0, m1 = 0, v0 = 0, v1 = 0, cov = 0;
  Rng draws(4);
  for (int i = 0; i < N; ++i) {
    std::vector<double> a = sample_action(p, draws);
    REQUIRE(a.size() == 2);
    m0 += a[0];
    m1 += a[1];
    v0 += a[0] * a[0];
    v1 += a[1] * a[1];
    cov += a[0] * a[1];
  }
  m0 /= N;
  m1 /= N;
  CHECK(std::fabs(m0) < 0.02);
  CHECK(std::fabs(m1) < 0.02);
  CHECK(std::fabs(v0 / N - m0 * m0 - 1.0) < 0.05);
  CHECK(std::fabs(v1 / N - m1 * m1 - 1.0) < 0.05);
  CHECK(std::fabs(cov / N - m0 * m1) < 0.02);
}

TEST_CASE("greedy action of the identity flow is the origin") {
  Rng rng(5);
  FlowModel model(FlowConfig{}, rng);
  std::vector<double> a = deterministic_action(model, {1.0, 2.0});
  CHECK(a[0] == 0.0);
  CHECK(a[1] == 0.0);
}

TEST_CASE("greedy action inverts a forced linear map") {
  FlowConfig cfg;
  cfg.couplings = 0;
  Rng rng(7);
  FlowModel model(cfg, rng);
  ParamList params = model.parameters();
  // z = 2a + 1 per dimension, so Q peaks at a = -1/2.
  set_param(params, "flow.lin.net.l2.b", {std::log(2.0), std::log(2.0), 1, 1});

  std::vector<double> a = deterministic_action(model, {0.0, 0.0});
  CHECK(a[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("greedy action is never beaten by random probing") {
  Rng data(11);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    FlowModel model = random_additive(100 + 7 * seed);
    std::vector<double> s = random_vec(data, 2, -2, 2);
    PreparedFlow p = model.prepare(s);

    std::vector<double> best = deterministic_action(p);
    double q_star = p.soft_q(best.data());

    // The greedy action maps exactly to the latent origin.
    std::vector<double> z(2);
    p.forward(best.data(), z.data());
    CHECK(std::fabs(z[0]) < 1e-9);
    CHECK(std::fabs(z[1]) < 1e-9);

    int beaten = 0;
    std::vector<double> probe(2);
    for (int t = 0; t < 2000; ++t) {
      probe[0] = data.uniform(-8, 8);
      probe[1] = data.uniform(-8, 8);
      if (p.soft_q(probe.data()) > q_star + 1e-12) ++beaten;
    }
    CHECK(beaten == 0);
  }
}

TEST_CASE("greedy action is refused when the Jacobian depends on the action") {
  FlowConfig cfg;
  cfg.affine_couplings = true;
  Rng rng(13);
  FlowModel model(cfg, rng);
  PreparedFlow p = model.prepare({0.0, 0.0});
  CHECK_THROWS_AS((void)deterministic_action(p), Error);
  // Sampling still works; only the closed-form argmax is gone.
  Rng draws(14);
  CHECK(sample_action(p, draws).size() == 2);
}

TEST_CASE("policy density agrees with the flow density") {
  FlowModel model = random_additive(17);
  std::vector<double> s = {0.3, -0.9};
  std::vector<double> a = {0.4, 1.2};
  double lp = action_log_prob(model, a, s);
  PreparedFlow p = model.prepare(s);
  CHECK(lp == doctest::Approx(p.log_prob(a.data())).epsilon(1e-14));

  Rng rng(18);
  FlowModel ident(FlowConfig{}, rng);
  CHECK(action_log_prob(ident, {0.0, 0.0}, s) ==
        doctest::Approx(-kLog2Pi).epsilon(1e-14));
}

TEST_CASE("sample histogram matches the quadrature marginal") {
  FlowModel model = random_additive(23);
  PreparedFlow p = model.prepare({0.6, 0.1});

  const int kBins = 20;
  const double lo = -4.0, hi = 4.0;
  const double width = (hi - lo) / kBins;
  const int N = 100000;

  std::vector<int> counts(kBins, 0);
  Rng draws(24);
  for (int i = 0; i < N; ++i) {
    std::vector<double> a = sample_action(p, draws);
    int b = static_cast<int>(std::floor((a[0] - lo) / width));
    if (b >= 0 && b < kBins) ++counts[b];
  }

  // Expected mass per bin: integrate the density over bin x [-8, 8].
  std::vector<double> xs, ws, xl, wl;
  gauss_legendre(20, xs, ws);
  gauss_legendre(100, xl, wl);
  std::vector<double> a(2);
  for (int b = 0; b < kBins; ++b) {
    double c = lo + (b + 0.5) * width;
    double mass = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
      a[0] = c + 0.5 * width * xs[i];
      for (size_t j = 0; j < xl.size(); ++j) {
        a[1] = 8.0 * xl[j];
        mass += ws[i] * wl[j] * (0.5 * width) * 8.0 *
                std::exp(p.log_prob(a.data()));
      }
    }
    double sigma = std::sqrt(N * mass * (1.0 - mass));
    CHECK(std::fabs(counts[b] - N * mass) < 4.0 * sigma + 1.0);
  }
}

TEST_CASE("policy evaluation matches hand-computed returns") {
  MultiGoalConfig cfg;
  cfg.init_noise = 0.0;  // every episode starts exactly at the origin
  MultiGoalEnv env(cfg);

  Rng rng(31);
  FlowModel model(FlowConfig{}, rng);  // identity: greedy action is zero

  EvalSummary s = evaluate_policy(model, env, 3, /*deterministic=*/true, rng);
  // Stationary at the origin: nearest goal 5 away, zero action cost, 30 steps.
  CHECK(s.mean_return == -150.0);
  CHECK(s.std_return == 0.0);
  CHECK(s.mean_final_goal_distance == 5.0);
  CHECK(s.episodes == 3);

  EvalSummary one = evaluate_policy(model, env, 1, true, rng);
  CHECK(one.mean_return == -150.0);
  CHECK(one.std_return == 0.0);

  CHECK_THROWS_AS((void)evaluate_policy(model, env, 0, true, rng), Error);
}

TEST_CASE("stochastic evaluation varies across episodes") {
  MultiGoalConfig cfg;
  MultiGoalEnv env(cfg);
  FlowModel model = random_additive(37);
  Rng rng(38);
  EvalSummary s = evaluate_policy(model, env, 4, /*deterministic=*/false, rng);
  CHECK(s.episodes == 4);
  CHECK(s.std_return > 0.0);
  CHECK(std::isfinite(s.mean_return));
}
