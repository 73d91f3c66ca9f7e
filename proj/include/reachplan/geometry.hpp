#pragma once

// Polytopes in vertex + halfspace form, axis-aligned boxes, and the Kuhn
// triangulation used for piecewise-affine controller interpolation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "reachplan/types.hpp"

namespace reachplan {

/// Axis-aligned box [lo, hi]. Partition cells are boxes.
struct Box {
  Vec lo;
  Vec hi;
  CellId id = kNoCell;
  int depth = 0;

  Box() = default;
  Box(Vec lo_, Vec hi_, CellId id_ = kNoCell, int depth_ = 0)
      : lo(std::move(lo_)), hi(std::move(hi_)), id(id_), depth(depth_) {}

  int dim() const { return static_cast<int>(lo.size()); }
  double side(int axis) const { return hi(axis) - lo(axis); }
  Vec center() const { return 0.5 * (lo + hi); }
  double volume() const { return (hi - lo).prod(); }

  bool valid() const {
    return lo.size() > 0 && lo.size() == hi.size() && lo.allFinite() &&
           hi.allFinite() && (hi - lo).minCoeff() > 0.0;
  }

  bool contains(const Vec& x, double tol = kContainTol) const {
    return ((x - lo).array() >= -tol).all() && ((hi - x).array() >= -tol).all();
  }

  /// Largest signed distance outside any face (<= 0 when inside).
  double max_violation(const Vec& x) const {
    return std::max((lo - x).maxCoeff(), (x - hi).maxCoeff());
  }

  /// Vertex with bit i of `mask` selecting hi along axis i.
  Vec corner(unsigned mask) const {
    Vec v = lo;
    for (int i = 0; i < dim(); ++i)
      if (mask & (1u << i)) v(i) = hi(i);
    return v;
  }
};

/// Facet index convention for boxes and box-like polytopes:
/// facet 2*axis is the lower face (normal -e_axis), 2*axis+1 the upper face.
inline int box_facet(int axis, bool upper) { return 2 * axis + (upper ? 1 : 0); }
inline int facet_axis(int facet) { return facet / 2; }
inline bool facet_is_upper(int facet) { return (facet % 2) == 1; }

struct Facet {
  Vec normal;     // unit outward normal
  double offset;  // normal . x <= offset on the polytope
};

/// Bounded convex polytope with both representations and incidence sets.
struct Polytope {
  std::vector<Vec> vertices;
  std::vector<Facet> facets;
  std::vector<std::vector<int>> facet_vertices;  // V_i
  std::vector<std::vector<int>> vertex_facets;   // W_j
  /// True when vertices are ordered by corner mask and facets follow
  /// box_facet(); required by triangulate().
  bool cube_combinatorial = false;
  std::optional<Box> source_box;

  int dim() const { return vertices.empty() ? 0 : static_cast<int>(vertices.front().size()); }
  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_facets() const { return static_cast<int>(facets.size()); }

  double max_violation(const Vec& x) const {
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& f : facets) worst = std::max(worst, f.normal.dot(x) - f.offset);
    return worst;
  }

  bool contains(const Vec& x, double tol = kContainTol) const {
    return max_violation(x) <= tol;
  }

  Vec centroid() const {
    Vec c = Vec::Zero(dim());
    for (const auto& v : vertices) c += v;
    return c / static_cast<double>(vertices.size());
  }

  bool vertex_on_facet(int vertex, int facet) const {
    const auto& w = vertex_facets[vertex];
    return std::find(w.begin(), w.end(), facet) != w.end();
  }
};

namespace detail {

inline void fill_incidence(Polytope& p, double tol = 1e-9) {
  p.facet_vertices.assign(p.facets.size(), {});
  p.vertex_facets.assign(p.vertices.size(), {});
  for (int i = 0; i < p.num_facets(); ++i) {
    const double scale = 1.0 + std::abs(p.facets[i].offset);
    for (int j = 0; j < p.num_vertices(); ++j) {
      if (std::abs(p.facets[i].normal.dot(p.vertices[j]) - p.facets[i].offset) <= tol * scale) {
        p.facet_vertices[i].push_back(j);
        p.vertex_facets[j].push_back(i);
      }
    }
  }
}

}  // namespace detail

/// Converts a box into a polytope with 2^n vertices (mask order) and 2n facets.
inline Polytope box_to_polytope(const Box& b) {
  detail::require(b.valid(), "box_to_polytope: degenerate box (lo must be < hi componentwise)");
  const int n = b.dim();
  Polytope p;
  const unsigned count = 1u << n;
  p.vertices.reserve(count);
  for (unsigned mask = 0; mask < count; ++mask) p.vertices.push_back(b.corner(mask));
  for (int axis = 0; axis < n; ++axis) {
    Vec nlo = Vec::Zero(n), nhi = Vec::Zero(n);
    nlo(axis) = -1.0;
    nhi(axis) = 1.0;
    p.facets.push_back({nlo, -b.lo(axis)});
    p.facets.push_back({nhi, b.hi(axis)});
  }
  // Exact combinatorics instead of tolerance matching.
  p.facet_vertices.assign(2 * n, {});
  p.vertex_facets.assign(count, {});
  for (unsigned mask = 0; mask < count; ++mask) {
    for (int axis = 0; axis < n; ++axis) {
      const int f = box_facet(axis, (mask >> axis) & 1u);
      p.facet_vertices[f].push_back(static_cast<int>(mask));
      p.vertex_facets[mask].push_back(f);
    }
  }
  for (auto& w : p.vertex_facets) std::sort(w.begin(), w.end());
  p.cube_combinatorial = true;
  p.source_box = b;
  return p;
}

/// Box-like polytope whose facet opposite to `exit_facet` is scaled by
/// `shrink` about its own center (a truncated pyramid). Vertex and facet
/// ordering match box_to_polytope so the Kuhn triangulation still applies.
inline Polytope truncated_pyramid(const Box& b, int exit_facet, double shrink) {
  detail::require(b.valid(), "truncated_pyramid: degenerate box");
  detail::require(shrink > 0.0 && shrink <= 1.0, "truncated_pyramid: shrink must be in (0, 1]");
  const int n = b.dim();
  detail::require(exit_facet >= 0 && exit_facet < 2 * n, "truncated_pyramid: bad facet index");
  if (shrink == 1.0) return box_to_polytope(b);

  const int axis = facet_axis(exit_facet);
  const bool exit_upper = facet_is_upper(exit_facet);
  const Vec center = b.center();

  Polytope p;
  const unsigned count = 1u << n;
  for (unsigned mask = 0; mask < count; ++mask) {
    Vec v = b.corner(mask);
    const bool on_upper = (mask >> axis) & 1u;
    if (on_upper != exit_upper) {
      for (int k = 0; k < n; ++k)
        if (k != axis) v(k) = center(k) + shrink * (v(k) - center(k));
    }
    p.vertices.push_back(v);
  }
  const Vec centroid = std::accumulate(p.vertices.begin(), p.vertices.end(), Vec(Vec::Zero(n))) /
                       static_cast<double>(count);
  for (int a = 0; a < n; ++a) {
    for (int upper = 0; upper < 2; ++upper) {
      // Fit the hyperplane through this face's vertices.
      std::vector<int> ids;
      for (unsigned mask = 0; mask < count; ++mask)
        if (((mask >> a) & 1u) == static_cast<unsigned>(upper)) ids.push_back(static_cast<int>(mask));
      Vec mean = Vec::Zero(n);
      for (int id : ids) mean += p.vertices[id];
      mean /= static_cast<double>(ids.size());
      Mat d(n, static_cast<int>(ids.size()));
      for (int c = 0; c < static_cast<int>(ids.size()); ++c) d.col(c) = p.vertices[ids[c]] - mean;
      Eigen::JacobiSVD<Mat> svd(d, Eigen::ComputeFullU);
      Vec normal = svd.matrixU().col(n - 1).normalized();
      if (normal.dot(mean - centroid) < 0) normal = -normal;
      p.facets.push_back({normal, normal.dot(mean)});
    }
  }
  detail::fill_incidence(p);
  for (int j = 0; j < p.num_vertices(); ++j)
    if (static_cast<int>(p.vertex_facets[j].size()) != n)
      throw NumericalError("truncated_pyramid: vertex incidence is not simple");
  p.cube_combinatorial = true;
  return p;
}

/// n-simplex given by n+1 affinely independent columns.
struct Simplex {
  Mat vertices;                 // n x (n+1)
  std::vector<int> vertex_ids;  // indices into the parent polytope's vertex list

  int dim() const { return static_cast<int>(vertices.rows()); }

  double volume() const {
    const int n = dim();
    Mat e(n, n);
    for (int k = 0; k < n; ++k) e.col(k) = vertices.col(k + 1) - vertices.col(0);
    double fact = 1.0;
    for (int k = 2; k <= n; ++k) fact *= k;
    return std::abs(e.determinant()) / fact;
  }

  /// Barycentric coordinates of x (sum to one).
  Vec barycentric(const Vec& x) const {
    const int n = dim();
    Mat m(n + 1, n + 1);
    m.topRows(n) = vertices;
    m.row(n).setOnes();
    Vec rhs(n + 1);
    rhs << x, 1.0;
    return m.partialPivLu().solve(rhs);
  }
};

/// Kuhn triangulation of a box-like polytope into n! simplices.
inline std::vector<Simplex> triangulate(const Polytope& p) {
  detail::require(p.cube_combinatorial,
                  "triangulate: only box-derived (cube-combinatorial) polytopes are supported");
  const int n = p.dim();
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<Simplex> out;
  do {
    Simplex s;
    s.vertices.resize(n, n + 1);
    unsigned mask = 0;
    s.vertices.col(0) = p.vertices[0];
    s.vertex_ids.push_back(0);
    for (int k = 0; k < n; ++k) {
      mask |= 1u << perm[k];
      s.vertices.col(k + 1) = p.vertices[mask];
      s.vertex_ids.push_back(static_cast<int>(mask));
    }
    out.push_back(std::move(s));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

struct SimplexLocation {
  int index = -1;
  Vec lambda;
};

/// Finds the lowest-index simplex containing x (within tolerance).
inline SimplexLocation locate_simplex(const std::vector<Simplex>& tri, const Vec& x,
                                      double tol = kContainTol) {
  for (int s = 0; s < static_cast<int>(tri.size()); ++s) {
    Vec lambda = tri[s].barycentric(x);
    if (lambda.minCoeff() >= -tol) return {s, std::move(lambda)};
  }
  throw InvalidArgument("locate_simplex: point lies outside the triangulated polytope");
}

/// Simplex whose barycentric coordinates are least negative at x; used to
/// extend piecewise-affine laws slightly past the polytope boundary.
inline SimplexLocation nearest_simplex(const std::vector<Simplex>& tri, const Vec& x) {
  SimplexLocation best;
  double best_min = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < static_cast<int>(tri.size()); ++s) {
    Vec lambda = tri[s].barycentric(x);
    const double m = lambda.minCoeff();
    if (m >= -kContainTol) return {s, std::move(lambda)};
    if (m > best_min) {
      best_min = m;
      best = {s, std::move(lambda)};
    }
  }
  return best;
}

}  // namespace reachplan
