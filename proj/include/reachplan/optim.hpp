#pragma once

// Dense two-phase simplex (Bland's rule) for small box-bounded LPs, the
// epigraph max-min used by the robust exit-time bound, and a primal
// active-set QP solver.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "reachplan/deviation.hpp"

namespace reachplan {

enum class LPStatus { Optimal, Infeasible, NumericalFailure, IterationLimit };

inline const char* to_string(LPStatus s) {
  switch (s) {
    case LPStatus::Optimal: return "optimal";
    case LPStatus::Infeasible: return "infeasible";
    case LPStatus::NumericalFailure: return "numerical_failure";
    case LPStatus::IterationLimit: return "iteration_limit";
  }
  return "unknown";
}

/// maximize objective . x  s.t.  A x <= b,  lo <= x <= hi.
/// An empty objective means pure feasibility.
struct LinearProgram {
  Vec lo;
  Vec hi;
  Mat A;
  Vec b;
  Vec objective;
};

struct LPResult {
  LPStatus status = LPStatus::NumericalFailure;
  Vec x;
  double value = 0.0;
  int pivots = 0;

  bool ok() const { return status == LPStatus::Optimal; }
};

/// Per-thread solver call counters (reset by the caller as needed).
struct SolverStats {
  long lp_solves = 0;
  long qp_solves = 0;
};

inline SolverStats& solver_stats() {
  thread_local SolverStats stats;
  return stats;
}

namespace detail {

class Tableau {
 public:
  // rows: constraints, then the objective row last. Column `rhs_col` holds b.
  Mat T;
  std::vector<int> basis;
  int pivots = 0;

  void pivot(int r, int c) {
    T.row(r) /= T(r, c);
    for (int i = 0; i < T.rows(); ++i) {
      if (i == r) continue;
      const double f = T(i, c);
      if (f != 0.0) T.row(i) -= f * T.row(r);
    }
    basis[static_cast<std::size_t>(r)] = c;
    ++pivots;
  }

  /// Minimizes the objective row (reduced costs in the last row, value in
  /// the corner) over columns allowed by `usable`. Bland's rule.
  LPStatus run(const std::vector<bool>& usable, int max_pivots, double tol = 1e-10) {
    const int rows = static_cast<int>(T.rows()) - 1;
    const int rhs = static_cast<int>(T.cols()) - 1;
    while (true) {
      if (pivots > max_pivots) return LPStatus::IterationLimit;
      int enter = -1;
      for (int c = 0; c < rhs; ++c)
        if (usable[static_cast<std::size_t>(c)] && T(rows, c) < -tol) {
          enter = c;
          break;
        }
      if (enter < 0) return LPStatus::Optimal;
      int leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int r = 0; r < rows; ++r) {
        if (T(r, enter) <= tol) continue;
        const double ratio = T(r, rhs) / T(r, enter);
        if (ratio < best - 1e-12 ||
            (std::abs(ratio - best) <= 1e-12 && leave >= 0 &&
             basis[static_cast<std::size_t>(r)] < basis[static_cast<std::size_t>(leave)])) {
          best = ratio;
          leave = r;
        }
      }
      // Box bounds make every LP here bounded.
      if (leave < 0) return LPStatus::NumericalFailure;
      pivot(leave, enter);
    }
  }
};

}  // namespace detail

/// Two-phase dense simplex. The returned point is re-checked against every
/// row; a violation beyond tolerance is reported as NumericalFailure.
inline LPResult solve_lp(const LinearProgram& lp, int max_pivots = 5000) {
  const int N = static_cast<int>(lp.lo.size());
  detail::require(lp.hi.size() == N, "solve_lp: bound dimension mismatch");
  detail::require(lp.A.cols() == N || lp.A.rows() == 0, "solve_lp: row dimension mismatch");
  detail::require(lp.A.rows() == lp.b.size(), "solve_lp: rhs dimension mismatch");
  detail::require(lp.objective.size() == 0 || lp.objective.size() == N, "solve_lp: objective dimension mismatch");
  detail::require(lp.lo.allFinite() && lp.hi.allFinite() && lp.A.allFinite() && lp.b.allFinite(),
                  "solve_lp: non-finite coefficients");
  ++solver_stats().lp_solves;
  LPResult res;
  if ((lp.hi - lp.lo).minCoeff() < 0.0) {
    res.status = LPStatus::Infeasible;
    return res;
  }

  // Shift y = x - lo; rows A y <= b - A lo, plus y <= hi - lo. Each row is
  // scaled by its largest coefficient.
  const int R0 = static_cast<int>(lp.A.rows());
  const int R = R0 + N;
  Mat Ar(R, N);
  Vec br(R);
  Ar.topRows(R0) = lp.A;
  br.head(R0) = lp.b - lp.A * lp.lo;
  Ar.bottomRows(N).setIdentity();
  br.tail(N) = lp.hi - lp.lo;
  for (int r = 0; r < R; ++r) {
    const double s = Ar.row(r).cwiseAbs().maxCoeff();
    if (s > 0.0) {
      Ar.row(r) /= s;
      br(r) /= s;
    } else if (br(r) < -1e-12) {
      res.status = LPStatus::Infeasible;
      return res;
    }
  }

  std::vector<int> art_rows;
  for (int r = 0; r < R; ++r)
    if (br(r) < 0.0) art_rows.push_back(r);
  const int nart = static_cast<int>(art_rows.size());
  const int cols = N + R + nart;
  detail::Tableau tab;
  tab.T = Mat::Zero(R + 1, cols + 1);
  tab.basis.assign(static_cast<std::size_t>(R), -1);
  for (int r = 0; r < R; ++r) {
    const double sgn = br(r) < 0.0 ? -1.0 : 1.0;
    tab.T.block(r, 0, 1, N) = sgn * Ar.row(r);
    tab.T(r, N + r) = sgn;
    tab.T(r, cols) = sgn * br(r);
    tab.basis[static_cast<std::size_t>(r)] = N + r;
  }
  for (int k = 0; k < nart; ++k) {
    const int r = art_rows[static_cast<std::size_t>(k)];
    tab.T(r, N + R + k) = 1.0;
    tab.basis[static_cast<std::size_t>(r)] = N + R + k;
  }

  std::vector<bool> usable(static_cast<std::size_t>(cols), true);
  if (nart > 0) {
    // Phase 1: minimize the sum of artificials.
    for (int r : art_rows) tab.T.row(R) -= tab.T.row(r);
    for (int k = 0; k < nart; ++k) tab.T(R, N + R + k) = 0.0;
    const LPStatus st = tab.run(usable, max_pivots);
    if (st != LPStatus::Optimal) {
      res.status = st;
      res.pivots = tab.pivots;
      return res;
    }
    if (-tab.T(R, cols) > 1e-9) {
      res.status = LPStatus::Infeasible;
      res.pivots = tab.pivots;
      return res;
    }
    // Drive zero-level artificials out of the basis.
    for (int r = 0; r < R; ++r) {
      if (tab.basis[static_cast<std::size_t>(r)] < N + R) continue;
      int c_best = -1;
      for (int c = 0; c < N + R; ++c)
        if (std::abs(tab.T(r, c)) > 1e-9) {
          c_best = c;
          break;
        }
      if (c_best >= 0) tab.pivot(r, c_best);
    }
    for (int k = 0; k < nart; ++k) usable[static_cast<std::size_t>(N + R + k)] = false;
  }

  // Phase 2 objective: minimize -objective . y (constant dropped).
  tab.T.row(R).setZero();
  if (lp.objective.size() == N) {
    tab.T.block(R, 0, 1, N) = -lp.objective.transpose();
    for (int r = 0; r < R; ++r) {
      const int bcol = tab.basis[static_cast<std::size_t>(r)];
      const double f = tab.T(R, bcol);
      if (f != 0.0) tab.T.row(R) -= f * tab.T.row(r);
    }
    const LPStatus st = tab.run(usable, max_pivots);
    if (st != LPStatus::Optimal) {
      res.status = st;
      res.pivots = tab.pivots;
      return res;
    }
  }

  Vec y = Vec::Zero(N);
  for (int r = 0; r < R; ++r) {
    const int bcol = tab.basis[static_cast<std::size_t>(r)];
    if (bcol < N) y(bcol) = tab.T(r, cols);
  }
  res.x = (lp.lo + y).cwiseMax(lp.lo).cwiseMin(lp.hi);
  res.pivots = tab.pivots;
  res.value = lp.objective.size() == N ? lp.objective.dot(res.x) : 0.0;

  for (int r = 0; r < R0; ++r) {
    const double scale = 1.0 + std::abs(lp.b(r)) + lp.A.row(r).cwiseAbs().dot(res.x.cwiseAbs());
    if (lp.A.row(r).dot(res.x) - lp.b(r) > 1e-9 * scale) {
      res.status = LPStatus::NumericalFailure;
      return res;
    }
  }
  res.status = LPStatus::Optimal;
  return res;
}

/// Rows a.u <= b, a.u >= b, and strict a.u > b (realized as >= b + delta)
/// over a box of admissible u.
struct LinearFeasibilityProblem {
  struct Row {
    Vec a;
    double b;
    enum Kind { LE, GE, STRICT_GE } kind;
  };

  Box bounds;
  std::vector<Row> rows;
  double delta_strict = kStrictMargin;

  LinearFeasibilityProblem() = default;
  explicit LinearFeasibilityProblem(Box b) : bounds(std::move(b)) {}

  void add_le(const Vec& a, double b) { rows.push_back({a, b, Row::LE}); }
  void add_ge(const Vec& a, double b) { rows.push_back({a, b, Row::GE}); }
  void add_strict_ge(const Vec& a, double b) { rows.push_back({a, b, Row::STRICT_GE}); }

  /// Restricts component i to the sign `s` (+1: >= 0, -1: <= 0, 0: free).
  void restrict_sign(int i, int s) {
    if (s > 0) bounds.lo(i) = std::max(bounds.lo(i), 0.0);
    if (s < 0) bounds.hi(i) = std::min(bounds.hi(i), 0.0);
  }

  int dim() const { return bounds.dim(); }

  /// Signed slack of row k at u: >= 0 means satisfied (strict rows measured
  /// against b, not b + delta).
  double slack(std::size_t k, const Vec& u) const {
    const Row& r = rows[k];
    const double v = r.a.dot(u) - r.b;
    return r.kind == Row::LE ? -v : v;
  }

  bool satisfied_by(const Vec& u, double tol = 1e-9) const {
    if (!bounds.contains(u, tol)) return false;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const double need = rows[k].kind == Row::STRICT_GE ? delta_strict : 0.0;
      if (slack(k, u) < need - tol) return false;
    }
    return true;
  }

  /// As a canonical LP; `margin_var` appends a margin variable t and asks
  /// every row for extra slack t * ||a_k|| (a Chebyshev-ball radius in u).
  LinearProgram to_lp(bool margin_var = false, double margin_cap = 0.0) const {
    const int m = dim();
    const int N = m + (margin_var ? 1 : 0);
    LinearProgram lp;
    lp.lo.resize(N);
    lp.hi.resize(N);
    lp.lo.head(m) = bounds.lo;
    lp.hi.head(m) = bounds.hi;
    if (margin_var) {
      lp.lo(m) = 0.0;
      lp.hi(m) = margin_cap;
    }
    lp.A = Mat::Zero(static_cast<int>(rows.size()), N);
    lp.b.resize(static_cast<int>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const Row& r = rows[k];
      const int i = static_cast<int>(k);
      // Tiny extra push so re-verified strict margins are never below delta.
      const double need = r.kind == Row::STRICT_GE ? delta_strict * (1.0 + 1e-6) + 1e-12 : 0.0;
      if (r.kind == Row::LE) {
        lp.A.block(i, 0, 1, m) = r.a.transpose();
        lp.b(i) = r.b;
      } else {
        lp.A.block(i, 0, 1, m) = -r.a.transpose();
        lp.b(i) = -r.b - need;
      }
      if (margin_var) lp.A(i, m) = r.a.norm();
    }
    if (margin_var) {
      lp.objective = Vec::Zero(N);
      lp.objective(m) = 1.0;
    }
    return lp;
  }
};

struct FeasibilityResult {
  LPStatus status = LPStatus::Infeasible;
  Vec u;
  double margin = 0.0;  // extra slack beyond the required one (margin mode)
  int pivots = 0;

  bool feasible() const { return status == LPStatus::Optimal; }
};

/// Any point satisfying all rows, or a non-optimal status.
inline FeasibilityResult linear_feasible(const LinearFeasibilityProblem& p) {
  FeasibilityResult out;
  if ((p.bounds.hi - p.bounds.lo).minCoeff() < 0.0) return out;
  const LPResult r = solve_lp(p.to_lp());
  out.status = r.status;
  out.pivots = r.pivots;
  if (r.ok()) {
    out.u = r.x;
    if (!p.satisfied_by(out.u)) out.status = LPStatus::NumericalFailure;
  }
  return out;
}

/// Feasible point whose rows all hold with extra slack t ||a_k||, t in [0, cap] maximal.
inline FeasibilityResult max_margin_feasible(const LinearFeasibilityProblem& p, double cap) {
  FeasibilityResult out;
  if ((p.bounds.hi - p.bounds.lo).minCoeff() < 0.0) return out;
  const LPResult r = solve_lp(p.to_lp(true, cap));
  out.status = r.status;
  out.pivots = r.pivots;
  if (r.ok()) {
    out.u = r.x.head(p.dim());
    out.margin = r.x(p.dim());
    if (!p.satisfied_by(out.u)) out.status = LPStatus::NumericalFailure;
  }
  return out;
}

/// Largest vertex norm of the input box.
inline double max_vertex_norm(const Box& Pu) {
  double best = 0.0;
  const unsigned count = 1u << Pu.dim();
  for (unsigned mask = 0; mask < count; ++mask) best = std::max(best, Pu.corner(mask).norm());
  return best;
}

struct MaximinResult {
  LPStatus status = LPStatus::Infeasible;
  double c1_rob = 0.0;
  std::vector<Vec> controls;  // per polytope vertex
  int pivots = 0;

  bool ok() const { return status == LPStatus::Optimal && c1_rob > 0.0; }
};

/// Per-vertex robust exit flow along the exit normal n1 for controls u_j.
inline double robust_flow(const AffineModel& model, const DeviationBounds& bounds, const Vec& n1,
                          const Vec& v, const Vec& u, double U_max) {
  return n1.dot(model.A * v + model.B * u + model.c) -
         n1.norm() * (bounds.eps_A * v.norm() + bounds.eps_B * U_max + bounds.eps_c);
}

/// max over u_j in the vertex sets of min_j robust_flow(v_j, u_j), as an
/// epigraph LP. `vertex_sets[j]` constrains u_j (bounds and rows); when
/// empty, each u_j ranges over Pu.
inline MaximinResult maximin_c1_rob(const AffineModel& model, const DeviationBounds& bounds,
                                    const Polytope& poly, int exit_facet, const Box& Pu,
                                    const std::vector<LinearFeasibilityProblem>& vertex_sets = {}) {
  const int M = poly.num_vertices();
  const int m = model.input_dim();
  detail::require(exit_facet >= 0 && exit_facet < poly.num_facets(), "maximin_c1_rob: bad facet");
  detail::require(vertex_sets.empty() || static_cast<int>(vertex_sets.size()) == M,
                  "maximin_c1_rob: need one constraint set per vertex");
  const Vec& n1 = poly.facets[static_cast<std::size_t>(exit_facet)].normal;
  const double U_max = max_vertex_norm(Pu);

  int extra_rows = 0;
  for (const auto& s : vertex_sets) extra_rows += static_cast<int>(s.rows.size());
  const int N = M * m + 1;
  LinearProgram lp;
  lp.lo.resize(N);
  lp.hi.resize(N);
  lp.A = Mat::Zero(M + extra_rows, N);
  lp.b = Vec::Zero(M + extra_rows);
  double t_span = 1.0;
  int row = M;
  for (int j = 0; j < M; ++j) {
    const Vec& v = poly.vertices[static_cast<std::size_t>(j)];
    const Box& box = vertex_sets.empty() ? Pu : vertex_sets[static_cast<std::size_t>(j)].bounds;
    lp.lo.segment(j * m, m) = box.lo;
    lp.hi.segment(j * m, m) = box.hi;
    // t - n1' B u_j <= n1'(A v + c) - margin
    const double margin = n1.norm() * (bounds.eps_A * v.norm() + bounds.eps_B * U_max + bounds.eps_c);
    const Vec nb = model.B.transpose() * n1;
    lp.A(j, N - 1) = 1.0;
    lp.A.block(j, j * m, 1, m) = -nb.transpose();
    lp.b(j) = n1.dot(model.A * v + model.c) - margin;
    t_span = std::max(t_span, std::abs(lp.b(j)) + nb.cwiseAbs().dot(Pu.lo.cwiseAbs().cwiseMax(Pu.hi.cwiseAbs())));
    if (!vertex_sets.empty()) {
      const auto set_lp = vertex_sets[static_cast<std::size_t>(j)].to_lp();
      for (int k = 0; k < set_lp.A.rows(); ++k, ++row) {
        lp.A.block(row, j * m, 1, m) = set_lp.A.row(k);
        lp.b(row) = set_lp.b(k);
      }
    }
  }
  lp.lo(N - 1) = -2.0 * t_span;
  lp.hi(N - 1) = 2.0 * t_span;
  lp.objective = Vec::Zero(N);
  lp.objective(N - 1) = 1.0;

  MaximinResult out;
  const LPResult r = solve_lp(lp);
  out.status = r.status;
  out.pivots = r.pivots;
  if (!r.ok()) return out;
  double inner = std::numeric_limits<double>::infinity();
  for (int j = 0; j < M; ++j) {
    out.controls.push_back(r.x.segment(j * m, m));
    inner = std::min(inner, robust_flow(model, bounds, n1, poly.vertices[static_cast<std::size_t>(j)],
                                        out.controls.back(), U_max));
  }
  // Report the inner minimum at the returned controls (>= the LP's t).
  out.c1_rob = inner;
  return out;
}

/// minimize 0.5 z'Hz + f'z  s.t.  G z <= h.
struct QuadraticProgram {
  Mat H;
  Vec f;
  Mat G;
  Vec h;
};

struct QPResult {
  bool ok = false;
  std::string message;
  Vec z;
  Vec lambda;  // multipliers, one per row of G
  double objective = 0.0;
  int iterations = 0;
  double stationarity = 0.0;     // ||H z + f + G' lambda||_inf
  double complementarity = 0.0;  // max |lambda_i (G_i z - h_i)|
  double primal_violation = 0.0; // max (G z - h)_+
};

inline void qp_residuals(const QuadraticProgram& q, QPResult& r) {
  r.stationarity = (q.H * r.z + q.f + q.G.transpose() * r.lambda).cwiseAbs().maxCoeff();
  const Vec s = q.G * r.z - q.h;
  r.complementarity = q.G.rows() ? (r.lambda.array() * s.array()).abs().maxCoeff() : 0.0;
  r.primal_violation = q.G.rows() ? std::max(0.0, s.maxCoeff()) : 0.0;
  r.objective = 0.5 * r.z.dot(q.H * r.z) + q.f.dot(r.z);
}

/// Primal active-set method for strictly convex QPs. The start point comes
/// from an LP phase 1 inside [-box, box]^k (`box` must enclose the optimum).
inline QPResult solve_qp(const QuadraticProgram& q, double box = 1e6, int max_iter = 200) {
  const int k = static_cast<int>(q.H.rows());
  const int p = static_cast<int>(q.G.rows());
  detail::require(q.H.cols() == k && q.f.size() == k, "solve_qp: objective dimension mismatch");
  detail::require(q.G.cols() == k || p == 0, "solve_qp: constraint dimension mismatch");
  detail::require(q.h.size() == p, "solve_qp: rhs dimension mismatch");
  ++solver_stats().qp_solves;
  QPResult res;
  res.lambda = Vec::Zero(p);

  LinearProgram lp;
  lp.lo = Vec::Constant(k, -box);
  lp.hi = Vec::Constant(k, box);
  lp.A = q.G;
  lp.b = q.h;
  const LPResult start = solve_lp(lp);
  if (!start.ok()) {
    res.message = std::string("no feasible start: ") + to_string(start.status);
    return res;
  }
  Vec z = start.x;

  const double tol = 1e-11;
  std::vector<int> work;
  for (int i = 0; i < p; ++i) {
    const double sc = 1.0 + std::abs(q.h(i));
    if (std::abs(q.G.row(i).dot(z) - q.h(i)) <= 1e-10 * sc && static_cast<int>(work.size()) < k) {
      // Keep the starting working set linearly independent.
      Mat Gw(static_cast<int>(work.size()) + 1, k);
      for (std::size_t a = 0; a < work.size(); ++a) Gw.row(static_cast<int>(a)) = q.G.row(work[a]);
      Gw.row(static_cast<int>(work.size())) = q.G.row(i);
      Eigen::FullPivLU<Mat> lu(Gw);
      lu.setThreshold(1e-10);
      if (lu.rank() == Gw.rows()) work.push_back(i);
    }
  }

  for (int it = 0; it < max_iter; ++it) {
    res.iterations = it + 1;
    const int w = static_cast<int>(work.size());
    Mat Gw(w, k);
    for (int a = 0; a < w; ++a) Gw.row(a) = q.G.row(work[static_cast<std::size_t>(a)]);
    const Vec grad = q.H * z + q.f;
    // Null-space step: with Gw' = Q R, Z spans the last k - w columns of Q.
    Vec step = Vec::Zero(k);
    Mat Q = Mat::Identity(k, k);
    if (w > 0) Q = Eigen::HouseholderQR<Mat>(Gw.transpose()).householderQ() * Mat::Identity(k, k);
    if (w < k) {
      const Mat Z = Q.rightCols(k - w);
      const Mat reduced = Z.transpose() * q.H * Z;
      step = -Z * reduced.ldlt().solve(Z.transpose() * grad);
    }
    // Multipliers from Gw' lambda = -(grad + H step).
    Vec mult(w);
    if (w > 0) mult = Gw.transpose().colPivHouseholderQr().solve(-(grad + q.H * step));
    if (!step.allFinite() || !mult.allFinite()) {
      res.message = "singular KKT system";
      return res;
    }
    if (w == k || step.cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + z.cwiseAbs().maxCoeff())) {
      int worst = -1;
      double most_neg = -1e-12;
      for (int a = 0; a < w; ++a)
        if (mult(a) < most_neg) {
          most_neg = mult(a);
          worst = a;
        }
      if (worst < 0) {
        res.ok = true;
        res.z = z;
        res.lambda.setZero();
        for (int a = 0; a < w; ++a) res.lambda(work[static_cast<std::size_t>(a)]) = std::max(0.0, mult(a));
        qp_residuals(q, res);
        return res;
      }
      work.erase(work.begin() + worst);
      continue;
    }
    double alpha = 1.0;
    int blocking = -1;
    for (int i = 0; i < p; ++i) {
      if (std::find(work.begin(), work.end(), i) != work.end()) continue;
      const double gp = q.G.row(i).dot(step);
      if (gp <= tol) continue;
      const double a = std::max(0.0, (q.h(i) - q.G.row(i).dot(z)) / gp);
      if (a < alpha) {
        alpha = a;
        blocking = i;
      }
    }
    z += alpha * step;
    if (blocking >= 0) work.push_back(blocking);
  }
  res.message = "iteration limit exceeded";
  res.z = z;
  qp_residuals(q, res);
  return res;
}

}  // namespace reachplan
