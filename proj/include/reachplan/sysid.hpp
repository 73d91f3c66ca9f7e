#pragma once

// Local affine identification from short constant-input excitations.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "reachplan/dynamics.hpp"

namespace reachplan {

struct ExcitationPlan {
  std::vector<Vec> inputs;  // applied in order, each held for `period`
  double period = 1e-3;
  double amplitude = 0.0;   // max |u_i^(k) - base_i|
  int substeps = 10;        // RK4 steps per period when advancing the plant
  /// Regressor directions whose singular value is below rcond times the
  /// largest are left out of the fit (coefficient zero). A nonholonomic
  /// plant never moves sideways during the excitation, and without the
  /// cutoff that direction soaks up integration error. The unicycle's
  /// sideways direction sits near 6e-5; weakly actuated but genuinely
  /// excited directions (three states, two inputs) sit around 1e-3.
  double rcond = 2e-4;
};

/// Default plan: the base input followed by n + m + 3 doublets
/// (base + a r_j, base - a r_j), r_j drawn uniformly from [-1, 1]^m by a
/// seeded generator so plans are reproducible. a = scale * (smallest
/// half-width of Pu); the base is clamped so every excitation stays in Pu.
///
/// Why doublets: the state moved by the inputs is their running sum. With
/// coordinate steps that sum is an exact combination of the inputs
/// (integrators lose rank), and with a drifting state a state-dependent
/// input gain g(x) u leaks into A. Each doublet returns the input-driven
/// part of the state to where it started, which keeps both effects small.
inline ExcitationPlan default_excitation(const Box& Pu, int n, double period = 1e-3,
                                         double scale = 0.1,
                                         const std::optional<Vec>& base = std::nullopt,
                                         std::uint32_t seed = 0x5eed) {
  detail::require(Pu.valid(), "default_excitation: invalid input box");
  detail::require(period > 0.0 && scale > 0.0, "default_excitation: period and scale must be positive");
  const int m = Pu.dim();
  const Vec half = 0.5 * (Pu.hi - Pu.lo);
  const double a = scale * half.minCoeff();
  Vec b = base ? *base : Pu.center();
  detail::require(b.size() == m, "default_excitation: base input dimension mismatch");
  b = (b.array().max(Pu.lo.array() + a).min(Pu.hi.array() - a)).matrix();

  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> R(-1.0, 1.0);
  std::vector<Vec> inputs{b};
  for (int j = 0; j < n + m + 3; ++j) {
    Vec r(m);
    for (int i = 0; i < m; ++i) r(i) = a * R(rng);
    inputs.push_back(b + r);
    inputs.push_back(b - r);
  }
  ExcitationPlan plan;
  plan.period = period;
  plan.amplitude = a;
  plan.inputs = std::move(inputs);
  return plan;
}

struct IdentificationResult {
  bool ok = false;
  std::string message;
  AffineModel model;
  Vec final_state;
  double duration = 0.0;
  std::vector<TrajectorySample> samples;  // plant states visited, relative time
};

/// Applies the plan to the plant starting at x0 and fits [A B c] to the
/// difference quotients (y - x)/T, paired with the interval midpoints, by
/// truncated-SVD least squares. Regressors are centered and scaled before
/// the solve and mapped back afterwards. When
/// `cell` is given, leaving it aborts with ok = false.
inline IdentificationResult identify_affine(const TrueSystem& s, const Vec& x0,
                                            const ExcitationPlan& plan,
                                            const std::optional<Box>& cell = std::nullopt) {
  detail::require(x0.size() == s.n, "identify_affine: state dimension mismatch");
  detail::require(plan.period > 0.0 && plan.substeps > 0, "identify_affine: bad plan timing");
  const int n = s.n, m = s.m;
  const int K = static_cast<int>(plan.inputs.size());
  detail::require(K >= n + m + 1, "identify_affine: need at least n + m + 1 samples");

  IdentificationResult res;
  Mat X(n, K), U(m, K), D(n, K);
  Vec x = x0;
  const double h = plan.period / plan.substeps;
  double t = 0.0;
  res.samples.push_back({0.0, x, plan.inputs.front()});
  for (int k = 0; k < K; ++k) {
    const Vec& u = plan.inputs[static_cast<std::size_t>(k)];
    detail::require(u.size() == m, "identify_affine: input dimension mismatch");
    Vec y = x;
    for (int q = 0; q < plan.substeps; ++q) {
      const Vec k1 = s(y, u);
      const Vec k2 = s(y + 0.5 * h * k1, u);
      const Vec k3 = s(y + 0.5 * h * k2, u);
      const Vec k4 = s(y + h * k3, u);
      y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!y.allFinite()) throw NumericalError("identify_affine: non-finite state");
    X.col(k) = 0.5 * (x + y);  // the difference quotient is second-order accurate here
    U.col(k) = u;
    D.col(k) = (y - x) / plan.period;
    x = y;
    t += plan.period;
    res.samples.push_back({t, x, u});
    if (cell && !cell->contains(x)) {
      res.message = "state left the cell during excitation";
      res.final_state = x;
      res.duration = t;
      return res;
    }
  }
  res.final_state = x;
  res.duration = t;

  // Scaled regression: z = [(x - xm)/sx; (u - um)/su; 1]. All state
  // coordinates share one scale so that a direction the excitation barely
  // moves stays small and falls under the rcond cutoff.
  const Vec xm = X.rowwise().mean(), um = U.rowwise().mean();
  const double xr = (X.colwise() - xm).cwiseAbs().maxCoeff();
  const Vec sx = Vec::Constant(n, xr > 0.0 ? xr : 1.0);
  Vec su(m);
  for (int i = 0; i < m; ++i) {
    const double r = (U.row(i).array() - um(i)).abs().maxCoeff();
    su(i) = r > 0.0 ? r : 1.0;
  }
  Mat Z(n + m + 1, K);
  for (int k = 0; k < K; ++k) {
    Z.block(0, k, n, 1) = (X.col(k) - xm).cwiseQuotient(sx);
    Z.block(n, k, m, 1) = (U.col(k) - um).cwiseQuotient(su);
    Z(n + m, k) = 1.0;
  }
  Eigen::JacobiSVD<Mat> svd(Z.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(plan.rcond);
  const Mat Theta = svd.solve(D.transpose()).transpose();  // n x (n+m+1)
  if (!Theta.allFinite()) throw NumericalError("identify_affine: non-finite estimate");

  AffineModel& model = res.model;
  model.A = Theta.leftCols(n) * sx.cwiseInverse().asDiagonal();
  model.B = Theta.middleCols(n, m) * su.cwiseInverse().asDiagonal();
  model.c = Theta.col(n + m) - model.A * xm - model.B * um;
  model.linearization_point = x0;
  res.ok = true;
  return res;
}

}  // namespace reachplan
