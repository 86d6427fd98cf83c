#include "meow/value_oracle.hpp"

#include <cmath>
#include <limits>

namespace meow {
namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// Online log-sum-exp: max-shifted running sum, O(1) memory for any grid.
struct LogSumExp {
  double m = -std::numeric_limits<double>::infinity();
  double s = 0.0;

  void add(double t) {
    if (t > m) {
      s = s * std::exp(m - t) + 1.0;
      m = t;
    } else {
      s += std::exp(t - m);
    }
  }
  double value() const { return m + std::log(s); }
};

}  // namespace

void gauss_legendre(int n, std::vector<double>& nodes,
                    std::vector<double>& weights) {
  if (n < 1) throw Error("gauss_legendre: need at least one node");
  nodes.assign(n, 0.0);
  weights.assign(n, 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    // Tricomi-style initial guess for the i-th root (descending), then
    // Newton on the three-term recurrence.
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double p1 = 0.0, p0 = 0.0;
    for (int it = 0; it < 100; ++it) {
      p0 = 1.0;
      p1 = x;
      for (int k = 2; k <= n; ++k) {
        double pk = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      double dp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / dp;
      x -= dx;
      if (std::fabs(dx) < 1e-15) break;
    }
    p0 = 1.0;
    p1 = x;
    for (int k = 2; k <= n; ++k) {
      double pk = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    double dp = n * (x * p1 - p0) / (x * x - 1.0);
    double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
}

double quadrature_v(const PreparedFlow& flow, const GridSpec& grid) {
  int d = flow.action_dim();
  if (d < 1 || d > 3)
    throw Error("quadrature_v: supported for 1 to 3 action dimensions");
  if (grid.nodes < 2) throw Error("quadrature_v: need at least 2 nodes");
  if (grid.half_width <= 0.0)
    throw Error("quadrature_v: half_width must be positive");

  std::vector<double> x, w;
  gauss_legendre(grid.nodes, x, w);
  double L = grid.half_width;
  std::vector<double> logw(grid.nodes);
  for (int i = 0; i < grid.nodes; ++i) logw[i] = std::log(w[i] * L);

  double alpha = flow.alpha();
  LogSumExp lse;
  std::vector<double> a(d);
  std::vector<int> idx(d, 0);
  while (true) {
    double t = 0.0;
    for (int k = 0; k < d; ++k) {
      a[k] = L * x[idx[k]];
      t += logw[idx[k]];
    }
    t += flow.soft_q(a.data()) / alpha;
    lse.add(t);

    int k = 0;
    while (k < d && ++idx[k] == grid.nodes) {
      idx[k] = 0;
      ++k;
    }
    if (k == d) break;
  }
  return alpha * lse.value();
}

double quadrature_v(const FlowModel& model, const std::vector<double>& s,
                    const GridSpec& grid) {
  return quadrature_v(model.prepare(s), grid);
}

PairedEstimates mc_v_paired(const PreparedFlow& q_flow,
                            const PreparedFlow& proposal, int M, Rng& rng) {
  if (M < 1) throw Error("mc_v_paired: M must be >= 1");
  if (q_flow.action_dim() != proposal.action_dim())
    throw ShapeError("mc_v_paired: action dimensions differ");

  double alpha = q_flow.alpha();
  LogSumExp lse;
  double t_sum = 0.0;
  std::vector<double> z(proposal.action_dim());
  for (int i = 0; i < M; ++i) {
    for (double& v : z) v = rng.normal();
    std::vector<double> a = proposal.inverse(z);
    double t = q_flow.soft_q(a.data()) / alpha - proposal.log_prob(a.data());
    t_sum += t;
    lse.add(t);
  }
  PairedEstimates out;
  out.sql = alpha * (lse.value() - std::log(static_cast<double>(M)));
  out.sac = alpha * (t_sum / M);
  return out;
}

double mc_v_sql(const PreparedFlow& q_flow, const PreparedFlow& proposal,
                int M, Rng& rng) {
  return mc_v_paired(q_flow, proposal, M, rng).sql;
}

double mc_v_sac(const PreparedFlow& q_flow, const PreparedFlow& proposal,
                int M, Rng& rng) {
  return mc_v_paired(q_flow, proposal, M, rng).sac;
}

std::vector<EstimatorRow> estimator_report(const PreparedFlow& q_flow,
                                           const PreparedFlow& proposal,
                                           const std::vector<int>& m_list,
                                           int trials, Rng& rng) {
  if (trials < 1) throw Error("estimator_report: trials must be >= 1");
  double truth = quadrature_v(q_flow);

  std::vector<EstimatorRow> rows;
  for (int M : m_list) {
    EstimatorRow row;
    row.M = M;
    std::vector<double> sql_err(trials), sac_err(trials);
    for (int t = 0; t < trials; ++t) {
      PairedEstimates e = mc_v_paired(q_flow, proposal, M, rng);
      sql_err[t] = std::fabs(e.sql - truth);
      sac_err[t] = std::fabs(e.sac - truth);
    }
    auto mean_std = [&](const std::vector<double>& v, double& mean,
                        double& sd) {
      mean = 0.0;
      for (double x : v) mean += x;
      mean /= v.size();
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(var / (v.size() - 1)) : 0.0;
    };
    mean_std(sql_err, row.sql_abs_err_mean, row.sql_abs_err_std);
    mean_std(sac_err, row.sac_abs_err_mean, row.sac_abs_err_std);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace meow
