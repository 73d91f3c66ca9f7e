#pragma once

// CLF-CBF quadratic program used inside the target cell.
//
//   min  |u - u_ref|^2 + w delta^2
//   s.t. dV/dt <= -alpha V + delta          (CLF, V = 0.5 e'Pe, e = x - x_t)
//        dh_i/dt >= -kappa h_i              (CBF, h_i = b_i - n_i'x per cell facet)
//        u in Pu, delta >= 0
//
// with dx/dt given by the identified affine model. u_ref = 0 and w = 1 give
// the plain |u|^2 + delta^2 cost.

#include <algorithm>
#include <limits>
#include <vector>

#include "reachplan/optim.hpp"

namespace reachplan {

struct TerminalParams {
  Mat P;                  // empty: identity
  double alpha = 1.0;
  double kappa = 1.0;
  double r_stop = 0.1;
  /// Weight on the CLF slack. With w = 1 the slack is as cheap as the
  /// control near the target and convergence slows to |e|^3.
  double slack_weight = 1e4;
  /// Penalize deviation from the model's equilibrium input at x_target
  /// rather than |u|: under a drift, |u|^2 alone pulls the resting point
  /// away from the target.
  bool equilibrium_reference = true;
};

struct TerminalStep {
  bool ok = false;
  std::string message;
  Vec u;
  double delta = 0.0;
  double V = 0.0;
  Vec barriers;            // h_i(x)
  double min_cbf_slack = 0.0;  // min_i (dh_i/dt + kappa h_i) under the model at u
  QPResult qp;
};

/// Input that best holds the model at x_t: argmin |A x_t + B u + c|, clamped to Pu.
inline Vec equilibrium_input(const AffineModel& model, const Vec& x_t, const Box& Pu) {
  const Vec r = -(model.A * x_t + model.c);
  Vec u = model.B.completeOrthogonalDecomposition().solve(r);
  return u.cwiseMax(Pu.lo).cwiseMin(Pu.hi);
}

inline TerminalStep clf_cbf_control(const AffineModel& model, const Vec& x, const Vec& x_target, const Box& cell,
                                    const Box& Pu, const TerminalParams& params = {}) {
  const int n = model.state_dim(), m = model.input_dim();
  detail::require(x.size() == n && x_target.size() == n && cell.dim() == n && Pu.dim() == m,
                  "clf_cbf_control: dimension mismatch");
  detail::require(cell.contains(x, 1e-6), "clf_cbf_control: state outside the cell");
  detail::require(params.alpha > 0.0 && params.kappa > 0.0 && params.slack_weight > 0.0,
                  "clf_cbf_control: alpha, kappa and slack weight must be positive");
  const Mat P = params.P.size() ? params.P : Mat(Mat::Identity(n, n));
  detail::require(P.rows() == n && P.cols() == n && (P - P.transpose()).norm() <= 1e-12 * (1.0 + P.norm()),
                  "clf_cbf_control: P must be symmetric");
  detail::require(Eigen::LLT<Mat>(P).info() == Eigen::Success, "clf_cbf_control: P must be positive definite");

  TerminalStep out;
  const Vec e = x - x_target;
  const Vec grad = P * e;
  out.V = 0.5 * e.dot(grad);
  const Vec drift = model.A * x + model.c;
  const Vec u_ref = params.equilibrium_reference ? equilibrium_input(model, x_target, Pu) : Vec(Vec::Zero(m));

  // z = (u, delta)
  QuadraticProgram q;
  q.H = Mat::Zero(m + 1, m + 1);
  q.H.topLeftCorner(m, m) = 2.0 * Mat::Identity(m, m);
  q.H(m, m) = 2.0 * params.slack_weight;
  q.f = Vec::Zero(m + 1);
  q.f.head(m) = -2.0 * u_ref;
  const int rows = 1 + 2 * n + 2 * m + 1;
  q.G = Mat::Zero(rows, m + 1);
  q.h = Vec::Zero(rows);
  int r = 0;
  q.G.row(r).head(m) = (model.B.transpose() * grad).transpose();
  q.G(r, m) = -1.0;
  q.h(r++) = -params.alpha * out.V - grad.dot(drift);
  out.barriers = Vec(2 * n);
  for (int i = 0; i < n; ++i)
    for (int upper = 0; upper < 2; ++upper) {
      // h = b - n'x with outward normal n: n = +e_i, b = hi_i or n = -e_i, b = -lo_i.
      const double s = upper ? 1.0 : -1.0;
      const double h = upper ? cell.hi(i) - x(i) : x(i) - cell.lo(i);
      out.barriers(2 * i + upper) = h;
      // dh/dt = -s xdot_i >= -kappa h  <=>  s (B u)_i <= kappa h - s drift_i
      q.G.row(r).head(m) = s * model.B.row(i);
      q.h(r++) = params.kappa * h - s * drift(i);
    }
  for (int i = 0; i < m; ++i) {
    q.G(r, i) = 1.0;
    q.h(r++) = Pu.hi(i);
    q.G(r, i) = -1.0;
    q.h(r++) = -Pu.lo(i);
  }
  q.G(r, m) = -1.0;  // delta >= 0
  q.h(r++) = 0.0;

  // Phase-1 box: |u| <= umax, and delta never needs to exceed the CLF
  // violation at the worst admissible u.
  const double umax = std::max(Pu.hi.cwiseAbs().maxCoeff(), Pu.lo.cwiseAbs().maxCoeff());
  const double dmax = q.G.row(0).head(m).cwiseAbs().sum() * umax + std::abs(q.h(0));
  out.qp = solve_qp(q, 2.0 * std::max(umax, dmax) + 1.0);
  if (!out.qp.ok) {
    out.message = "terminal QP failed: " + out.qp.message;
    return out;
  }
  out.u = out.qp.z.head(m);
  out.delta = out.qp.z(m);
  out.min_cbf_slack = std::numeric_limits<double>::infinity();
  const Vec xdot = drift + model.B * out.u;
  for (int i = 0; i < n; ++i)
    for (int upper = 0; upper < 2; ++upper) {
      const double s = upper ? 1.0 : -1.0;
      out.min_cbf_slack = std::min(out.min_cbf_slack, -s * xdot(i) + params.kappa * out.barriers(2 * i + upper));
    }
  out.ok = true;
  return out;
}

}  // namespace reachplan
