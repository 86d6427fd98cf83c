// Independent soft-value computations used to verify the closed form.
//
// The model claims V(s) = alpha * log integral exp(Q(s,a)/alpha) da without
// doing the integral. Everything here does the work the model skips:
// Gauss-Legendre quadrature as ground truth, plus the two Monte Carlo
// estimators that other maximum-entropy methods rely on (importance-weighted
// log-mean-exp, and mean of Q - alpha*log pi), so their bias and variance
// can be measured against the exact value.

#pragma once

#include <vector>

#include "meow/flow.hpp"

namespace meow {

// Nodes and weights for n-point Gauss-Legendre on [-1, 1].
void gauss_legendre(int n, std::vector<double>& nodes,
                    std::vector<double>& weights);

struct GridSpec {
  double half_width = 8.0;  // integrate over [-L, L]^D
  int nodes = 200;          // per dimension
};

// alpha * log of the quadrature approximation of integral exp(Q/alpha) da.
// Supports action_dim 1..3; accumulates in log space, so large Q is fine.
double quadrature_v(const PreparedFlow& flow, const GridSpec& grid = {});
double quadrature_v(const FlowModel& model, const std::vector<double>& s,
                    const GridSpec& grid = {});

// Monte Carlo estimates with M draws from `proposal`. SQL-style importance
// sampling: alpha * log( (1/M) sum exp(Q/alpha)/pi ). SAC-style plug-in:
// (1/M) sum (Q - alpha log pi). With the model's own policy as proposal the
// integrand is constant and both are exact for any M.
double mc_v_sql(const PreparedFlow& q_flow, const PreparedFlow& proposal,
                int M, Rng& rng);
double mc_v_sac(const PreparedFlow& q_flow, const PreparedFlow& proposal,
                int M, Rng& rng);

// Both estimators on one shared sample set. On shared samples SQL >= SAC
// pointwise (Jensen), not just in expectation.
struct PairedEstimates {
  double sql = 0.0;
  double sac = 0.0;
};
PairedEstimates mc_v_paired(const PreparedFlow& q_flow,
                            const PreparedFlow& proposal, int M, Rng& rng);

struct EstimatorRow {
  int M = 0;
  double sql_abs_err_mean = 0.0;
  double sql_abs_err_std = 0.0;
  double sac_abs_err_mean = 0.0;
  double sac_abs_err_std = 0.0;
};

// Error study against the quadrature ground truth: `trials` paired estimates
// per M. CSV columns match the row fields.
std::vector<EstimatorRow> estimator_report(const PreparedFlow& q_flow,
                                           const PreparedFlow& proposal,
                                           const std::vector<int>& m_list,
                                           int trials, Rng& rng);

}  // namespace meow
