#pragma once

// Reach graph over partition leaves: one directed edge per shared facet
// piece, classified certain / impossible / uncertain, weighted by exit-time
// bounds or by expected information gain, searched with Dijkstra.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "reachplan/partition.hpp"
#include "reachplan/reach.hpp"

namespace reachplan {

enum class EdgeStatus { Uncertain, Certain, Impossible };

inline const char* to_string(EdgeStatus s) {
  switch (s) {
    case EdgeStatus::Uncertain: return "uncertain";
    case EdgeStatus::Certain: return "certain";
    case EdgeStatus::Impossible: return "impossible";
  }
  return "unknown";
}

/// Shannon entropy in nats, 0 ln 0 = 0.
inline double edge_entropy(double p) {
  detail::require(p >= 0.0 && p <= 1.0, "edge_entropy: probability outside [0, 1]");
  auto term = [](double q) { return q > 0.0 ? q * std::log(q) : 0.0; };
  return -(term(p) + term(1.0 - p));
}

inline double uncertain_weight(double C_u, double l_u, double beta_u, double eig) {
  detail::require(C_u > 0.0 && l_u > 0.0 && beta_u >= 0.0 && eig >= 0.0, "uncertain_weight: bad arguments");
  return C_u * l_u / (1.0 + beta_u * eig);
}

struct GraphParams {
  double C_u = 100.0;
  double beta_u = 0.8;
  double p_prior = 0.5;
};

struct Edge {
  CellId from = kNoCell;
  CellId to = kNoCell;
  int axis = -1;
  int direction = 0;
  Vec lo, hi;         // shared facet rectangle
  double l_u = 0.0;   // source cell length along the transition axis
  EdgeStatus status = EdgeStatus::Uncertain;
  double weight = 0.0;
  double p_e = 0.5;
  double time_bound = 0.0;                // certain edges
  std::optional<CertKind> kind;           // certain edges
  bool capped = false;                    // outgoing facet larger than the shared piece

  int exit_facet() const { return box_facet(axis, direction > 0); }
};

class ReachGraph {
 public:
  using Key = std::pair<CellId, CellId>;

  ReachGraph() = default;

  /// All adjacency pairs as uncertain edges with prior p_e; weights set.
  ReachGraph(const PartitionTree& tree, const Adjacency& adj, const GraphParams& params) : params_(params) {
    for (CellId id : tree.leaves()) nodes_.insert(id);
    for (const auto& a : adj.entries()) {
      Edge e;
      e.from = a.from;
      e.to = a.to;
      e.axis = a.axis;
      e.direction = a.direction;
      e.lo = a.lo;
      e.hi = a.hi;
      e.l_u = tree.cell(a.from).side(a.axis);
      e.p_e = params.p_prior;
      // Shared piece strictly smaller than the source facet: the exit
      // condition on the full facet says nothing about this piece.
      const Box& src = tree.cell(a.from);
      for (int i = 0; i < src.dim(); ++i)
        if (i != a.axis && (a.lo(i) > src.lo(i) + kContainTol || a.hi(i) < src.hi(i) - kContainTol))
          e.capped = true;
      edges_.emplace(Key{a.from, a.to}, std::move(e));
    }
    reindex();
    refresh_weights();
  }

  const GraphParams& params() const { return params_; }
  const std::set<CellId>& nodes() const { return nodes_; }
  const std::map<Key, Edge>& edges() const { return edges_; }
  bool has_node(CellId id) const { return nodes_.count(id) > 0; }

  const Edge* find(CellId from, CellId to) const {
    auto it = edges_.find({from, to});
    return it == edges_.end() ? nullptr : &it->second;
  }
  Edge* find(CellId from, CellId to) {
    auto it = edges_.find({from, to});
    return it == edges_.end() ? nullptr : &it->second;
  }

  std::vector<const Edge*> outgoing(CellId id) const {
    std::vector<const Edge*> out;
    auto it = out_.find(id);
    if (it == out_.end()) return out;
    for (const auto& k : it->second) out.push_back(&edges_.at(k));
    return out;
  }

  /// Knowledge only accumulates: certain and impossible are final.
  void set_certain(CellId from, CellId to, double time_bound, CertKind kind) {
    Edge& e = at(from, to);
    if (e.status == EdgeStatus::Impossible)
      throw std::logic_error("ReachGraph: edge already impossible, cannot certify");
    detail::require(time_bound > 0.0 && std::isfinite(time_bound), "ReachGraph: time bound must be positive");
    if (e.status == EdgeStatus::Certain) {
      // A tighter bound or a stronger certificate (exact over predictive) may replace the old one.
      if (kind == CertKind::Exact || e.kind != CertKind::Exact) {
        e.time_bound = time_bound;
        e.kind = kind;
        e.weight = time_bound;
      }
      return;
    }
    e.status = EdgeStatus::Certain;
    e.time_bound = time_bound;
    e.kind = kind;
    e.weight = time_bound;
  }

  void set_impossible(CellId from, CellId to) {
    Edge& e = at(from, to);
    if (e.status == EdgeStatus::Certain)
      throw std::logic_error("ReachGraph: edge already certain, cannot refute");
    e.status = EdgeStatus::Impossible;
    e.weight = 0.0;
  }

  /// Execution evidence: the controls at hand did not get across. Unlike
  /// set_impossible this also retracts a certificate, which can be wrong
  /// when the model behind it is.
  void block(CellId from, CellId to) {
    Edge& e = at(from, to);
    e.status = EdgeStatus::Impossible;
    e.weight = 0.0;
    e.time_bound = 0.0;
    e.kind.reset();
  }

  /// Belief that an uncertain edge is traversable; weights are not refreshed.
  void set_probability(CellId from, CellId to, double p) {
    Edge& e = at(from, to);
    detail::require(e.status == EdgeStatus::Uncertain, "ReachGraph: probability of a resolved edge");
    detail::require(p > 0.0 && p < 1.0, "ReachGraph: probability must lie in (0, 1)");
    e.p_e = p;
  }

  /// Recomputes uncertain-edge weights from current statuses.
  void refresh_weights() {
    for (auto& [k, e] : edges_)
      if (e.status == EdgeStatus::Uncertain)
        e.weight = uncertain_weight(params_.C_u, e.l_u, params_.beta_u, expected_info_gain(e));
  }

  /// p_e times the entropy of the uncertain edges leaving the target.
  double expected_info_gain(const Edge& e) const {
    double s = 0.0;
    for (const Edge* o : outgoing(e.to))
      if (o->status == EdgeStatus::Uncertain) s += edge_entropy(o->p_e);
    return e.p_e * s;
  }

  /// Sum of edge entropies over uncertain edges.
  double entropy() const {
    double s = 0.0;
    for (const auto& [k, e] : edges_)
      if (e.status == EdgeStatus::Uncertain) s += edge_entropy(e.p_e);
    return s;
  }

  struct Tally {
    int certain = 0, uncertain = 0, impossible = 0;
  };
  Tally tally() const {
    Tally t;
    for (const auto& [k, e] : edges_) {
      if (e.status == EdgeStatus::Certain) ++t.certain;
      else if (e.status == EdgeStatus::Impossible) ++t.impossible;
      else ++t.uncertain;
    }
    return t;
  }

  /// Test and tooling hook: builds a graph from explicit edges.
  static ReachGraph from_edges(const std::vector<CellId>& nodes, std::vector<Edge> edges,
                               const GraphParams& params = {}) {
    ReachGraph g;
    g.params_ = params;
    g.nodes_.insert(nodes.begin(), nodes.end());
    for (auto& e : edges) g.edges_.emplace(Key{e.from, e.to}, std::move(e));
    g.reindex();
    return g;
  }

 private:
  Edge& at(CellId from, CellId to) {
    auto it = edges_.find({from, to});
    if (it == edges_.end()) throw InvalidArgument("ReachGraph: no such edge");
    return it->second;
  }

  void reindex() {
    out_.clear();
    for (const auto& [k, e] : edges_) out_[k.first].push_back(k);
  }

  GraphParams params_;
  std::set<CellId> nodes_;
  std::map<Key, Edge> edges_;
  std::map<CellId, std::vector<Key>> out_;
};

inline double expected_info_gain(const ReachGraph& g, const Edge& e) {
  detail::require(e.status == EdgeStatus::Uncertain, "expected_info_gain: edge is not uncertain");
  return g.expected_info_gain(e);
}

/// Verdict for one outgoing edge of a cell.
struct EdgeVerdict {
  CellId to = kNoCell;
  EdgeStatus status = EdgeStatus::Uncertain;
  double time_bound = 0.0;
  CertKind kind = CertKind::Exact;
};

/// Applies verdicts for the outgoing edges of `cell`. Capped edges never
/// become certain. Uncertain weights are refreshed afterwards.
inline void update_graph(ReachGraph& g, CellId cell, const std::vector<EdgeVerdict>& verdicts) {
  detail::require(g.has_node(cell), "update_graph: unknown cell");
  for (const auto& v : verdicts) {
    const Edge* e = g.find(cell, v.to);
    detail::require(e != nullptr, "update_graph: verdict for a non-adjacent cell");
    if (v.status == EdgeStatus::Certain && !e->capped) g.set_certain(cell, v.to, v.time_bound, v.kind);
    else if (v.status == EdgeStatus::Impossible) g.set_impossible(cell, v.to);
  }
  g.refresh_weights();
}

struct Path {
  std::vector<CellId> nodes;
  double cost = 0.0;
};

/// Dijkstra over non-impossible edges. Equal costs (to 1e-12 relative) are
/// resolved in favour of the lexicographically smallest node sequence.
inline std::optional<Path> shortest_path(const ReachGraph& g, CellId src, CellId dst) {
  detail::require(g.has_node(src) && g.has_node(dst), "shortest_path: unknown node");
  std::map<CellId, double> dist;
  std::map<CellId, std::vector<CellId>> path;
  std::set<CellId> done;
  using Item = std::pair<double, CellId>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[src] = 0.0;
  path[src] = {src};
  pq.push({0.0, src});
  auto tie = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)}); };
  while (!pq.empty()) {
    const auto [d, u] = pq.top();
    pq.pop();
    if (done.count(u) || d > dist[u]) continue;
    done.insert(u);
    if (u == dst) break;
    for (const Edge* e : g.outgoing(u)) {
      if (e->status == EdgeStatus::Impossible || done.count(e->to)) continue;
      detail::require(e->weight > 0.0, "shortest_path: non-positive edge weight");
      const double nd = d + e->weight;
      auto cand = path[u];
      cand.push_back(e->to);
      auto it = dist.find(e->to);
      bool better = it == dist.end() || nd < it->second;
      if (it != dist.end() && tie(nd, it->second)) better = cand < path[e->to];
      if (!better) continue;
      dist[e->to] = nd;
      path[e->to] = std::move(cand);
      pq.push({nd, e->to});
    }
  }
  if (!done.count(dst)) return std::nullopt;
  return Path{path[dst], dist[dst]};
}

}  // namespace reachplan
