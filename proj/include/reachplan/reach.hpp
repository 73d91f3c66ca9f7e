#pragma once

// Facet reachability on polytopes: vertex-wise feasibility (identified
// dynamics), its robust counterparts under bounded model deviation, the
// piecewise-affine controller built from vertex controls, exit-time bounds,
// and the relaxed conditions for the unicycle.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "reachplan/optim.hpp"

namespace reachplan {

enum class CertKind { Exact, Predictive, Relaxed };

inline const char* to_string(CertKind k) {
  switch (k) {
    case CertKind::Exact: return "exact";
    case CertKind::Predictive: return "predictive";
    case CertKind::Relaxed: return "relaxed";
  }
  return "unknown";
}

struct ReachCertificate {
  int exit_facet = -1;
  CertKind kind = CertKind::Exact;
  std::vector<Vec> controls;                  // one per region vertex
  std::vector<LinearFeasibilityProblem> rows;  // the vertex problems that were solved
  std::vector<std::vector<double>> margins;   // row slacks at the returned controls
  std::vector<int> patterns;                  // sign pattern per vertex (predictive)
  std::vector<bool> relaxed_vertex;           // vertices accepted by the angle rule
  Polytope region;                            // states for which the certificate speaks

  double min_strict_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (!relaxed_vertex.empty() && relaxed_vertex[j]) continue;
      for (std::size_t k = 0; k < rows[j].rows.size(); ++k)
        if (rows[j].rows[k].kind == LinearFeasibilityProblem::Row::STRICT_GE) m = std::min(m, margins[j][k]);
    }
    return m;
  }
};

struct ReachOptions {
  double delta_strict = kStrictMargin;
  /// Upper bound of the margin variable in the controls LP (0: plain feasibility).
  double margin_cap = 1e3;
};

namespace detail {

/// Rows of the vertex condition at vertex j for exit facet e, written for
/// the model xdot = A x + B u + c:
///   j on F_e:   n_e' xdot > 0,  n_i' xdot <= 0 for i in W_j \ {e}
///   otherwise:  n_i' xdot <= 0 for all i in W_j,  n_e' xdot > 0
/// With nonzero bounds and a sign pattern, the rows are tightened (robust,
/// `expand` false) or loosened (`expand` true) by the deviation terms.
inline LinearFeasibilityProblem vertex_problem(const AffineModel& model, const Polytope& p, int exit_facet,
                                               int j, const Box& Pu, const DeviationBounds& bounds,
                                               const std::vector<int>& sigma, bool expand,
                                               double delta) {
  const int m = model.input_dim();
  const Vec& v = p.vertices[static_cast<std::size_t>(j)];
  LinearFeasibilityProblem prob(Pu);
  prob.delta_strict = delta;
  Vec sg = Vec::Zero(m);
  for (int i = 0; i < m && !sigma.empty(); ++i) {
    sg(i) = sigma[static_cast<std::size_t>(i)];
    prob.restrict_sign(i, sigma[static_cast<std::size_t>(i)]);
  }
  const Vec drift = model.A * v + model.c;
  auto add = [&](int facet, bool strict) {
    const Vec& n = p.facets[static_cast<std::size_t>(facet)].normal;
    const double nn = n.norm();
    const double margin = nn * (bounds.eps_A * v.norm() + bounds.eps_c);
    const Vec nb = model.B.transpose() * n;
    const double s = expand ? -1.0 : 1.0;
    if (strict) {
      // (B'n -/+ eps_B ||n|| sigma)' u >= -n'(Av + c) +/- margin
      if (expand)
        prob.add_ge(nb + bounds.eps_B * nn * sg, -n.dot(drift) - margin);
      else
        prob.add_strict_ge(nb - bounds.eps_B * nn * sg, -n.dot(drift) + margin);
    } else {
      prob.add_le(nb + s * bounds.eps_B * nn * sg, -n.dot(drift) - s * margin);
    }
  };
  const auto& W = p.vertex_facets[static_cast<std::size_t>(j)];
  for (int i : W)
    if (i != exit_facet) add(i, false);
  add(exit_facet, true);
  return prob;
}

inline std::vector<std::vector<int>> sign_patterns(int m) {
  std::vector<std::vector<int>> out;
  for (unsigned mask = 0; mask < (1u << m); ++mask) {
    std::vector<int> s(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) s[static_cast<std::size_t>(i)] = (mask >> i) & 1u ? -1 : 1;
    out.push_back(std::move(s));
  }
  return out;
}

inline FeasibilityResult solve_vertex(const LinearFeasibilityProblem& prob, const ReachOptions& opt) {
  return opt.margin_cap > 0.0 ? max_margin_feasible(prob, opt.margin_cap) : linear_feasible(prob);
}

inline std::vector<double> row_slacks(const LinearFeasibilityProblem& prob, const Vec& u) {
  std::vector<double> s;
  for (std::size_t k = 0; k < prob.rows.size(); ++k) s.push_back(prob.slack(k, u));
  return s;
}

inline void check_args(const AffineModel& model, const Polytope& p, int exit_facet, const Box& Pu) {
  require(exit_facet >= 0 && exit_facet < p.num_facets(), "reach: exit facet index out of range");
  require(static_cast<int>(p.vertex_facets.size()) == p.num_vertices(), "reach: incidence sets missing");
  require(model.state_dim() == p.dim() && model.input_dim() == Pu.dim(), "reach: dimension mismatch");
}

}  // namespace detail

/// Vertex-wise reachability for identified dynamics. Each vertex control
/// maximizes the row margins (Chebyshev radius in u) so the certificate
/// tolerates small model error.
inline std::optional<ReachCertificate> facet_reachable(const AffineModel& model, const Polytope& p,
                                                       int exit_facet, const Box& Pu,
                                                       const ReachOptions& opt = {}) {
  detail::check_args(model, p, exit_facet, Pu);
  ReachCertificate cert;
  cert.exit_facet = exit_facet;
  cert.kind = CertKind::Exact;
  cert.region = p;
  for (int j = 0; j < p.num_vertices(); ++j) {
    auto prob = detail::vertex_problem(model, p, exit_facet, j, Pu, {}, {}, false, opt.delta_strict);
    const auto r = detail::solve_vertex(prob, opt);
    if (!r.feasible()) return std::nullopt;
    cert.margins.push_back(detail::row_slacks(prob, r.u));
    cert.controls.push_back(r.u);
    cert.rows.push_back(std::move(prob));
  }
  return cert;
}

/// Robust reachability of a cell with unidentified dynamics: every model
/// within `bounds` of `source` satisfies the vertex conditions with the
/// returned controls. Each vertex tries all 2^m sign patterns and keeps the
/// first one with the largest margin.
inline std::optional<ReachCertificate> predict_reachable(const AffineModel& source,
                                                         const DeviationBounds& bounds, const Polytope& p,
                                                         int exit_facet, const Box& Pu,
                                                         const ReachOptions& opt = {}) {
  detail::check_args(source, p, exit_facet, Pu);
  ReachCertificate cert;
  cert.exit_facet = exit_facet;
  cert.kind = CertKind::Predictive;
  cert.region = p;
  const auto patterns = detail::sign_patterns(source.input_dim());
  for (int j = 0; j < p.num_vertices(); ++j) {
    int best = -1;
    FeasibilityResult best_r;
    LinearFeasibilityProblem best_prob;
    for (std::size_t s = 0; s < patterns.size(); ++s) {
      auto prob = detail::vertex_problem(source, p, exit_facet, j, Pu, bounds, patterns[s], false,
                                         opt.delta_strict);
      const auto r = detail::solve_vertex(prob, opt);
      if (!r.feasible()) continue;
      if (best < 0 || r.margin > best_r.margin + 1e-12) {
        best = static_cast<int>(s);
        best_r = r;
        best_prob = std::move(prob);
      }
    }
    if (best < 0) return std::nullopt;
    cert.margins.push_back(detail::row_slacks(best_prob, best_r.u));
    cert.controls.push_back(best_r.u);
    cert.patterns.push_back(best);
    cert.rows.push_back(std::move(best_prob));
  }
  return cert;
}

/// True when some vertex admits no control even for the most favourable
/// model within `bounds`: then no model in the bounds can reach the facet.
inline bool predict_unreachable(const AffineModel& source, const DeviationBounds& bounds, const Polytope& p,
                                int exit_facet, const Box& Pu, const ReachOptions& opt = {}) {
  detail::check_args(source, p, exit_facet, Pu);
  const auto patterns = detail::sign_patterns(source.input_dim());
  for (int j = 0; j < p.num_vertices(); ++j) {
    bool any = false;
    for (const auto& sigma : patterns) {
      const auto prob = detail::vertex_problem(source, p, exit_facet, j, Pu, bounds, sigma, true,
                                               opt.delta_strict);
      const auto r = linear_feasible(prob);
      if (r.status == LPStatus::NumericalFailure || r.status == LPStatus::IterationLimit)
        return false;  // no proof of infeasibility
      if (r.feasible()) {
        any = true;
        break;
      }
    }
    if (!any) return true;
  }
  return false;
}

/// Piecewise-affine feedback interpolating vertex controls over the Kuhn
/// triangulation: u(x) = F_s x + g_s on simplex s.
class PWAController {
 public:
  struct Piece {
    Simplex simplex;
    Mat F;
    Vec g;
  };

  PWAController() = default;

  PWAController(const Polytope& p, const std::vector<Vec>& vertex_controls) {
    detail::require(static_cast<int>(vertex_controls.size()) == p.num_vertices(),
                    "PWAController: one control per vertex required");
    const int n = p.dim();
    const int m = static_cast<int>(vertex_controls.front().size());
    for (auto& s : triangulate(p)) {
      Mat V(n + 1, n + 1), U(m, n + 1);
      V.topRows(n) = s.vertices;
      V.row(n).setOnes();
      for (int k = 0; k <= n; ++k) U.col(k) = vertex_controls[static_cast<std::size_t>(s.vertex_ids[k])];
      Eigen::FullPivLU<Mat> lu(V);
      if (!lu.isInvertible()) throw NumericalError("PWAController: degenerate simplex");
      const Mat Fg = U * lu.inverse();
      pieces_.push_back({std::move(s), Fg.leftCols(n), Fg.col(n)});
    }
    for (const auto& pc : pieces_) tri_.push_back(pc.simplex);
  }

  const std::vector<Piece>& pieces() const { return pieces_; }

  /// Simplex used at x: lowest-index containing simplex; outside the
  /// polytope, the least-violated one.
  int piece_at(const Vec& x) const { return nearest_simplex(tri_, x).index; }

  Vec operator()(const Vec& x) const {
    const auto& pc = pieces_[static_cast<std::size_t>(piece_at(x))];
    return pc.F * x + pc.g;
  }

 private:
  std::vector<Piece> pieces_;
  std::vector<Simplex> tri_;
};

inline PWAController synthesize_controller(const Polytope& p, const std::vector<Vec>& vertex_controls) {
  return PWAController(p, vertex_controls);
}

struct ExitTimeBound {
  double T0 = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double c1 = 0.0;
};

namespace detail {

inline std::pair<double, double> facet_extent(const Polytope& p, const Vec& n1) {
  double a = std::numeric_limits<double>::infinity(), b = -a;
  for (const auto& v : p.vertices) {
    a = std::min(a, n1.dot(v));
    b = std::max(b, n1.dot(v));
  }
  return {a, b};
}

}  // namespace detail

/// T0 = (beta - alpha) / c1 with alpha, beta the extent of the polytope
/// along the exit normal and c1 the smallest vertex exit flow.
inline ExitTimeBound exit_time_bound(const AffineModel& model, const Polytope& p,
                                     const std::vector<Vec>& controls, int exit_facet,
                                     double delta = kStrictMargin) {
  detail::require(exit_facet >= 0 && exit_facet < p.num_facets(), "exit_time_bound: bad facet");
  detail::require(static_cast<int>(controls.size()) == p.num_vertices(), "exit_time_bound: controls missing");
  const Vec& n1 = p.facets[static_cast<std::size_t>(exit_facet)].normal;
  ExitTimeBound out;
  std::tie(out.alpha, out.beta) = detail::facet_extent(p, n1);
  out.c1 = std::numeric_limits<double>::infinity();
  for (int j = 0; j < p.num_vertices(); ++j)
    out.c1 = std::min(out.c1, n1.dot(model.eval(p.vertices[static_cast<std::size_t>(j)],
                                                controls[static_cast<std::size_t>(j)])));
  if (out.c1 < delta * (1.0 - 1e-9))
    throw InvalidArgument("exit_time_bound: exit flow not positive at every vertex");
  out.T0 = (out.beta - out.alpha) / out.c1;
  return out;
}

struct RobustExitTimeBound {
  ExitTimeBound bound;
  std::vector<Vec> controls;
};

/// Conservative exit-time bound for a cell whose dynamics are only known to
/// lie within `bounds` of `source`. `vertex_sets` (one per vertex, e.g. the
/// certified robust rows) restrict the controls; empty means Pu.
inline std::optional<RobustExitTimeBound> robust_exit_time_bound(
    const AffineModel& source, const DeviationBounds& bounds, const Polytope& p, int exit_facet,
    const Box& Pu, const std::vector<LinearFeasibilityProblem>& vertex_sets = {}) {
  const auto r = maximin_c1_rob(source, bounds, p, exit_facet, Pu, vertex_sets);
  if (!r.ok()) return std::nullopt;
  RobustExitTimeBound out;
  const Vec& n1 = p.facets[static_cast<std::size_t>(exit_facet)].normal;
  std::tie(out.bound.alpha, out.bound.beta) = detail::facet_extent(p, n1);
  out.bound.c1 = r.c1_rob;
  out.bound.T0 = (out.bound.beta - out.bound.alpha) / r.c1_rob;
  out.controls = r.controls;
  return out;
}

/// Axis of the heading coordinate in the unicycle state (x, y, theta).
inline constexpr int kHeadingAxis = 2;

/// Planar (non-heading) model velocities at vertex v for the two input-box
/// corners that drive hardest through the facet with the given normal (the
/// remaining inputs at their lower and upper limits).
inline std::pair<Vec, Vec> limiting_velocities(const AffineModel& model, const Vec& v, const Vec& normal,
                                               const Box& Pu) {
  const int m = model.input_dim();
  const Vec nb = model.B.transpose() * normal;
  int drive = 0;
  for (int i = 1; i < m; ++i)
    if (std::abs(nb(i)) > std::abs(nb(drive))) drive = i;
  auto velocity = [&](bool upper) {
    Vec u(m);
    for (int i = 0; i < m; ++i) u(i) = upper ? Pu.hi(i) : Pu.lo(i);
    u(drive) = nb(drive) >= 0.0 ? Pu.hi(drive) : Pu.lo(drive);
    Vec w = model.eval(v, u);
    w(kHeadingAxis) = 0.0;
    return w;
  };
  return {velocity(false), velocity(true)};
}

/// Angles between the limiting planar velocities and the planar part of
/// the exit normal.
inline std::pair<double, double> limiting_angles(const AffineModel& model, const Vec& v, const Vec& normal,
                                                 const Box& Pu) {
  Vec nrm = normal;
  nrm(kHeadingAxis) = 0.0;
  auto angle = [&](const Vec& w) {
    if (w.norm() == 0.0 || nrm.norm() == 0.0) return std::numbers::pi;
    return std::acos(std::clamp(w.dot(nrm) / (w.norm() * nrm.norm()), -1.0, 1.0));
  };
  const auto [lo, hi] = limiting_velocities(model, v, normal, Pu);
  return {angle(lo), angle(hi)};
}

/// Relaxed reachability for the unicycle cube (x, y, theta).
///  - heading facets: exact conditions on the truncated pyramid whose face
///    opposite the exit is scaled by `shrink`; valid only inside it.
///  - side facets: vertices failing the exact rows are accepted with u = 0
///    when both limiting angles are within theta_thre and, at u = 0, every
///    non-exit row of that vertex is violated by at most w sin(theta_thre),
///    w the larger limiting planar speed (the sideways drift the angle rule
///    already tolerates).
inline std::optional<ReachCertificate> relaxed_facet_reachable(const AffineModel& model, const Box& cube,
                                                               int exit_facet, const Box& Pu,
                                                               double theta_thre, double shrink = 0.5,
                                                               const ReachOptions& opt = {}) {
  detail::require(cube.dim() == 3 && Pu.dim() == 2, "relaxed_facet_reachable: expects (x, y, theta) and 2 inputs");
  detail::require(theta_thre >= 0.0, "relaxed_facet_reachable: negative threshold");
  if (facet_axis(exit_facet) == kHeadingAxis) {
    const Polytope sub = truncated_pyramid(cube, exit_facet, shrink);
    auto cert = facet_reachable(model, sub, exit_facet, Pu, opt);
    if (cert) cert->kind = shrink < 1.0 ? CertKind::Relaxed : CertKind::Exact;
    return cert;
  }

  const Polytope p = box_to_polytope(cube);
  detail::check_args(model, p, exit_facet, Pu);
  const Vec& n1 = p.facets[static_cast<std::size_t>(exit_facet)].normal;
  ReachCertificate cert;
  cert.exit_facet = exit_facet;
  cert.kind = CertKind::Exact;
  cert.region = p;
  for (int j = 0; j < p.num_vertices(); ++j) {
    auto prob = detail::vertex_problem(model, p, exit_facet, j, Pu, {}, {}, false, opt.delta_strict);
    const auto r = detail::solve_vertex(prob, opt);
    if (r.feasible()) {
      cert.margins.push_back(detail::row_slacks(prob, r.u));
      cert.controls.push_back(r.u);
      cert.relaxed_vertex.push_back(false);
      cert.rows.push_back(std::move(prob));
      continue;
    }
    if (theta_thre <= 0.0) return std::nullopt;
    const Vec& v = p.vertices[static_cast<std::size_t>(j)];
    const auto [a_lo, a_hi] = limiting_angles(model, v, n1, Pu);
    if (std::max(a_lo, a_hi) > theta_thre) return std::nullopt;
    const auto [w_lo, w_hi] = limiting_velocities(model, v, n1, Pu);
    const Vec u0 = Vec::Zero(Pu.dim());
    const double tol = std::max(w_lo.norm(), w_hi.norm()) * std::sin(theta_thre);
    for (std::size_t k = 0; k < prob.rows.size(); ++k)
      if (prob.rows[k].kind == LinearFeasibilityProblem::Row::LE && prob.slack(k, u0) < -tol)
        return std::nullopt;
    cert.margins.push_back(detail::row_slacks(prob, u0));
    cert.controls.push_back(u0);
    cert.relaxed_vertex.push_back(true);
    cert.rows.push_back(std::move(prob));
    cert.kind = CertKind::Relaxed;
  }
  return cert;
}

}  // namespace reachplan
