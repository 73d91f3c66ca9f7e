#pragma once

// Adaptive non-uniform partitioning of a box-shaped state space. Cells hit by
// the segment from the current state to the goal are split until they reach
// the minimum resolution; everything else stays coarse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "reachplan/geometry.hpp"

namespace reachplan {

/// Closed segment [a, b] against closed box (slab clipping).
inline bool segment_intersects(const Box& c, const Vec& a, const Vec& b) {
  double t0 = 0.0, t1 = 1.0;
  for (int i = 0; i < c.dim(); ++i) {
    const double tol = 1e-12 * (1.0 + std::abs(c.lo(i)) + std::abs(c.hi(i)));
    const double lo = c.lo(i) - tol, hi = c.hi(i) + tol;
    const double d = b(i) - a(i);
    if (d == 0.0) {
      if (a(i) < lo || a(i) > hi) return false;
      continue;
    }
    double ta = (lo - a(i)) / d, tb = (hi - a(i)) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

namespace detail {

inline int power_of_two_ratio(double side, double h, const char* what) {
  require(h > 0.0, std::string(what) + ": h_min must be positive");
  const double r = side / h;
  const double rr = std::round(r);
  require(rr >= 1.0 && std::abs(r - rr) <= 1e-9 * rr,
          std::string(what) + ": root side / h_min must be an integer power of two");
  const auto k = static_cast<std::uint64_t>(rr);
  require((k & (k - 1)) == 0, std::string(what) + ": root side / h_min must be a power of two");
  return static_cast<int>(std::lround(std::log2(rr)));
}

}  // namespace detail

/// Number of cells of the uniform partition at resolution h_min.
inline std::int64_t uniform_cell_count(const Box& root, const Vec& h_min) {
  detail::require(root.valid() && h_min.size() == root.lo.size(), "uniform_cell_count: bad input");
  std::int64_t count = 1;
  for (int i = 0; i < root.dim(); ++i)
    count <<= detail::power_of_two_ratio(root.side(i), h_min(i), "uniform_cell_count");
  return count;
}

/// Refinement tree over a root box. Node ids are stable; leaves form the
/// current cell set.
class PartitionTree {
 public:
  struct SplitRecord {
    CellId parent;
    std::vector<CellId> children;
  };

  PartitionTree(const Box& root, const Vec& h_min) : h_min_(h_min) {
    detail::require(root.valid(), "PartitionTree: degenerate root box");
    detail::require(h_min.size() == root.lo.size(), "PartitionTree: h_min dimension mismatch");
    max_depth_.resize(root.dim());
    for (int i = 0; i < root.dim(); ++i)
      max_depth_[i] = detail::power_of_two_ratio(root.side(i), h_min(i), "PartitionTree");
    Node node;
    node.box = Box(root.lo, root.hi, 0, 0);
    nodes_.push_back(std::move(node));
  }

  const Box& root() const { return nodes_.front().box; }
  const Vec& h_min() const { return h_min_; }
  int dim() const { return root().dim(); }
  std::uint64_t version() const { return version_; }
  std::size_t node_count() const { return nodes_.size(); }

  const Box& cell(CellId id) const { return nodes_.at(static_cast<std::size_t>(id)).box; }
  bool is_leaf(CellId id) const { return nodes_.at(static_cast<std::size_t>(id)).children.empty(); }
  CellId parent(CellId id) const { return nodes_.at(static_cast<std::size_t>(id)).parent; }
  const std::vector<CellId>& children(CellId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).children;
  }

  /// Leaf ids in ascending order.
  std::vector<CellId> leaves() const {
    std::vector<CellId> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].children.empty()) out.push_back(static_cast<CellId>(i));
    return out;
  }

  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.children.empty(); }));
  }

  /// Level of refinement along `axis` for a cell at tree depth `depth`.
  int axis_depth(int axis, int depth) const { return std::min(depth, max_depth_[axis]); }

  bool refinable(CellId id) const {
    const Box& b = cell(id);
    for (int i = 0; i < dim(); ++i)
      if (axis_depth(i, b.depth) < max_depth_[i]) return true;
    return false;
  }

  /// Splits a leaf in half along every axis still coarser than h_min.
  std::vector<CellId> split(CellId id) {
    detail::require(is_leaf(id), "PartitionTree::split: not a leaf");
    detail::require(refinable(id), "PartitionTree::split: cell already at minimum size");
    const Box parent_box = cell(id);
    std::vector<int> axes;
    for (int i = 0; i < dim(); ++i)
      if (axis_depth(i, parent_box.depth) < max_depth_[i]) axes.push_back(i);
    const Vec mid = parent_box.center();
    std::vector<CellId> kids;
    const unsigned count = 1u << axes.size();
    for (unsigned mask = 0; mask < count; ++mask) {
      Vec lo = parent_box.lo, hi = parent_box.hi;
      for (std::size_t k = 0; k < axes.size(); ++k) {
        const int a = axes[k];
        if (mask & (1u << k)) lo(a) = mid(a);
        else hi(a) = mid(a);
      }
      Node node;
      node.box = Box(lo, hi, static_cast<CellId>(nodes_.size()), parent_box.depth + 1);
      node.parent = id;
      kids.push_back(node.box.id);
      nodes_.push_back(std::move(node));
    }
    nodes_[static_cast<std::size_t>(id)].children = kids;
    ++version_;
    return kids;
  }

  /// Refines every leaf met by segment [a, b] until all of them are at the
  /// minimum size. Returns the splits performed, in order.
  std::vector<SplitRecord> refine_along(const Vec& a, const Vec& b) {
    detail::require(root().contains(a) && root().contains(b),
                    "refine_along: segment endpoints must lie in the root box");
    std::vector<SplitRecord> log;
    while (true) {
      std::vector<CellId> pending;
      for (CellId id : leaves())
        if (refinable(id) && segment_intersects(cell(id), a, b)) pending.push_back(id);
      if (pending.empty()) break;
      for (CellId id : pending) log.push_back({id, split(id)});
    }
    return log;
  }

  /// Leaf containing x. Points on shared faces go to the upper child.
  CellId locate(const Vec& x) const {
    if (!root().contains(x)) return kNoCell;
    CellId id = 0;
    while (!is_leaf(id)) {
      CellId next = kNoCell;
      for (CellId k : children(id)) {
        const Box& b = cell(k);
        bool inside = true;
        for (int i = 0; i < dim() && inside; ++i) {
          const bool at_root_hi = b.hi(i) >= root().hi(i);
          inside = x(i) >= b.lo(i) - (b.lo(i) <= root().lo(i) ? kContainTol : 0.0) &&
                   (x(i) < b.hi(i) || (at_root_hi && x(i) <= b.hi(i) + kContainTol));
        }
        if (inside) {
          next = k;
          break;
        }
      }
      if (next == kNoCell) {
        // Numerical corner case: fall back to the nearest child.
        double best = std::numeric_limits<double>::infinity();
        for (CellId k : children(id)) {
          const double v = cell(k).max_violation(x);
          if (v < best) {
            best = v;
            next = k;
          }
        }
      }
      id = next;
    }
    return id;
  }

 private:
  struct Node {
    Box box;
    CellId parent = kNoCell;
    std::vector<CellId> children;
  };

  Vec h_min_;
  std::vector<int> max_depth_;
  std::vector<Node> nodes_;
  std::uint64_t version_ = 0;
};

/// Algorithm entry point: a fresh tree refined along the segment x_c -> x_star.
inline PartitionTree nonuniform_partition(const Vec& x_c, const Vec& x_star, const Box& root,
                                          const Vec& h_min) {
  PartitionTree tree(root, h_min);
  detail::require(root.contains(x_c) && root.contains(x_star),
                  "nonuniform_partition: points must lie inside the root box");
  tree.refine_along(x_c, x_star);
  return tree;
}

/// Shared (n-1)-dimensional face between two leaves.
struct AdjacencyEntry {
  CellId from = kNoCell;
  CellId to = kNoCell;
  int axis = 0;
  int direction = 1;  // +1: `to` lies on the upper side of `from` along axis
  Vec lo;             // shared rectangle, degenerate along `axis`
  Vec hi;

  /// Facet of `from` that contains the shared rectangle.
  int exit_facet() const { return box_facet(axis, direction > 0); }

  double measure() const {
    double m = 1.0;
    for (int i = 0; i < lo.size(); ++i)
      if (i != axis) m *= hi(i) - lo(i);
    return m;
  }
};

class Adjacency {
 public:
  Adjacency() = default;

  explicit Adjacency(std::vector<AdjacencyEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t k = 0; k < entries_.size(); ++k) by_cell_[entries_[k].from].push_back(k);
  }

  const std::vector<AdjacencyEntry>& entries() const { return entries_; }

  std::vector<const AdjacencyEntry*> outgoing(CellId id) const {
    std::vector<const AdjacencyEntry*> out;
    auto it = by_cell_.find(id);
    if (it == by_cell_.end()) return out;
    for (std::size_t k : it->second) out.push_back(&entries_[k]);
    return out;
  }

  const AdjacencyEntry* find(CellId from, CellId to) const {
    for (const auto* e : outgoing(from))
      if (e->to == to) return e;
    return nullptr;
  }

 private:
  std::vector<AdjacencyEntry> entries_;
  std::map<CellId, std::vector<std::size_t>> by_cell_;
};

/// Every ordered leaf pair whose closures share a face of positive measure.
inline Adjacency adjacency(const PartitionTree& tree) {
  const auto ids = tree.leaves();
  const int n = tree.dim();
  const Vec scale = tree.root().hi - tree.root().lo;
  std::vector<AdjacencyEntry> entries;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const Box& a = tree.cell(ids[p]);
    for (std::size_t q = p + 1; q < ids.size(); ++q) {
      const Box& b = tree.cell(ids[q]);
      int touch_axis = -1, dir = 0;
      bool ok = true;
      for (int i = 0; i < n && ok; ++i) {
        const double tol = 1e-12 * scale(i);
        const double overlap = std::min(a.hi(i), b.hi(i)) - std::max(a.lo(i), b.lo(i));
        if (overlap > tol) continue;
        if (overlap < -tol || touch_axis >= 0) {
          ok = false;
          break;
        }
        touch_axis = i;
        dir = (std::abs(a.hi(i) - b.lo(i)) <= tol) ? 1 : -1;
      }
      if (!ok || touch_axis < 0) continue;
      AdjacencyEntry e;
      e.from = ids[p];
      e.to = ids[q];
      e.axis = touch_axis;
      e.direction = dir;
      e.lo = a.lo.cwiseMax(b.lo);
      e.hi = a.hi.cwiseMin(b.hi);
      const double plane = dir > 0 ? a.hi(touch_axis) : a.lo(touch_axis);
      e.lo(touch_axis) = e.hi(touch_axis) = plane;
      AdjacencyEntry r = e;
      std::swap(r.from, r.to);
      r.direction = -dir;
      entries.push_back(std::move(e));
      entries.push_back(std::move(r));
    }
  }
  return Adjacency(std::move(entries));
}

}  // namespace reachplan
