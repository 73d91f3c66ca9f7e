#pragma once

// Random instance generators and independent checks shared by the unit and
// acceptance tests.

#include <algorithm>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "reachplan/graph.hpp"
#include "reachplan/reach.hpp"

namespace testsupport {

using reachplan::AffineModel;
using reachplan::Box;
using reachplan::CellId;
using reachplan::DeviationBounds;
using reachplan::Edge;
using reachplan::EdgeStatus;
using reachplan::Mat;
using reachplan::Path;
using reachplan::Polytope;
using reachplan::Vec;

inline Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

inline Mat gaussian(std::mt19937& rng, int r, int c) {
  std::normal_distribution<double> N(0.0, 1.0);
  Mat M(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) M(i, j) = N(rng);
  return M;
}

inline double spectral_norm(const Mat& M) {
  if (M.size() == 0) return 0.0;
  return Eigen::JacobiSVD<Mat>(M).singularValues()(0);
}

/// Random matrix with spectral norm exactly `r`.
inline Mat with_norm(std::mt19937& rng, int rows, int cols, double r) {
  Mat E = gaussian(rng, rows, cols);
  const double s = spectral_norm(E);
  return s > 0 ? Mat(E * (r / s)) : E;
}

inline Box random_box(std::mt19937& rng, int n, double span = 4.0) {
  std::uniform_real_distribution<double> C(-span, span), S(0.3, 1.5);
  Vec lo(n), hi(n);
  for (int i = 0; i < n; ++i) {
    lo(i) = C(rng);
    hi(i) = lo(i) + S(rng);
  }
  return Box(lo, hi);
}

inline AffineModel random_model(std::mt19937& rng, int n, int m, const Vec& x_lin) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  AffineModel mdl;
  mdl.A = 0.3 * gaussian(rng, n, n);
  mdl.B = Mat::Identity(n, m) + 0.3 * gaussian(rng, n, m);
  mdl.c = 1.5 * gaussian(rng, n, 1);
  mdl.linearization_point = x_lin;
  return mdl;
}

/// A model within `b` of `m`: each deviation has spectral norm drawn in
/// [0, eps], with a quarter of the draws pinned to the boundary.
inline AffineModel perturbed(std::mt19937& rng, const AffineModel& m, const DeviationBounds& b) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto scale = [&](double eps) { return U(rng) < 0.25 ? eps : eps * U(rng); };
  AffineModel p = m;
  p.A += with_norm(rng, m.state_dim(), m.state_dim(), scale(b.eps_A));
  p.B += with_norm(rng, m.state_dim(), m.input_dim(), scale(b.eps_B));
  p.c += with_norm(rng, m.state_dim(), 1, scale(b.eps_c));
  return p;
}

/// Vertex conditions checked directly from the polytope data: strict exit
/// flow and non-positive flow through the other incident facets.
inline bool vertex_condition_holds(const AffineModel& m, const Polytope& p, int exit_facet, int j, const Vec& u,
                                   double tol = 1e-12) {
  const Vec xd = m.eval(p.vertices[j], u);
  if (!(p.facets[exit_facet].normal.dot(xd) > 0.0)) return false;
  for (int i : p.vertex_facets[j])
    if (i != exit_facet && p.facets[i].normal.dot(xd) > tol) return false;
  return true;
}


// Exhaustive simple-path enumeration: minimum cost, then smallest sequence.
inline std::optional<Path> brute_force(const std::vector<CellId>& nodes, const std::vector<Edge>& edges, CellId s,
                                       CellId t) {
  std::optional<Path> best;
  std::vector<CellId> cur{s};
  std::function<void(CellId, double)> go = [&](CellId u, double c) {
    if (u == t) {
      if (!best || c < best->cost - 1e-12 ||
          (std::abs(c - best->cost) <= 1e-12 && cur < best->nodes))
        best = Path{cur, c};
      return;
    }
    for (const auto& e : edges) {
      if (e.from != u || e.status == EdgeStatus::Impossible) continue;
      if (std::find(cur.begin(), cur.end(), e.to) != cur.end()) continue;
      cur.push_back(e.to);
      go(e.to, c + e.weight);
      cur.pop_back();
    }
  };
  (void)nodes;
  go(s, 0.0);
  return best;
}

}  // namespace testsupport
