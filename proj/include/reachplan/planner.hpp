#pragma once

// Mission loop: refine the partition along the segment to the target,
// identify the current cell, certify or refute transitions (exactly for the
// current cell, predictively for nearby unidentified cells), search the
// reach graph, execute the first transition, repeat; then hold the target
// with the CLF-CBF controller.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "reachplan/deviation.hpp"
#include "reachplan/graph.hpp"
#include "reachplan/sysid.hpp"
#include "reachplan/terminal.hpp"

namespace reachplan {

struct Scenario {
  std::string name = "custom";
  std::string system = "mecanum";  // mecanum | unicycle
  Box workspace;
  Box Pu;
  double L_df = 0.03;
  double L_g = 0.03;
  Vec h_min;
  double C_u = 100.0;
  double beta_u = 0.8;
  double p_e_prior = 0.5;
  double theta_thre = 10.0 * std::numbers::pi / 180.0;  // radians, underactuated only
  double shrink = 0.5;
  Vec x_initial;
  Vec x_target;
  double dt = 1e-3;
  double excitation_period = 1e-3;
  double excitation_scale = 0.1;
  int max_iters = 400;
  double max_sim_time = 600.0;
  int retry_budget = 10;
  double timeout_factor = 3.0;
  double entry_depth = 0.02;  // fraction of the cell side to move past an entered face
  int prediction_hops = 2;
  TerminalParams terminal;
  double terminal_period = 1e-2;  // control update period of the terminal QP
  double terminal_time = 60.0;
  std::uint64_t seed = 1;

  bool underactuated() const { return system == "unicycle"; }
};

inline TrueSystem make_system(const Scenario& s) {
  if (s.system == "mecanum") return mecanum_system();
  if (s.system == "unicycle") return unicycle_system();
  throw InvalidArgument("unknown system '" + s.system + "'");
}

/// Field-path diagnostics; empty when the scenario is usable.
inline std::vector<std::string> validate_scenario(const Scenario& s) {
  std::vector<std::string> err;
  auto bad = [&](const std::string& path, const std::string& what) { err.push_back(path + ": " + what); };
  int n = -1, m = -1;
  if (s.system == "mecanum") n = 2, m = 2;
  else if (s.system == "unicycle") n = 3, m = 2;
  else bad("system", "must be \"mecanum\" or \"unicycle\"");
  if (!s.workspace.valid()) bad("workspace", "lo < hi required on every axis");
  else if (n > 0 && s.workspace.dim() != n) bad("workspace", "expected dimension " + std::to_string(n));
  if (!s.Pu.valid()) bad("input_bounds", "lo < hi required on every axis");
  else if (m > 0 && s.Pu.dim() != m) bad("input_bounds", "expected dimension " + std::to_string(m));
  if (!(s.L_df >= 0.0)) bad("L_df", "must be >= 0");
  if (!(s.L_g >= 0.0)) bad("L_g", "must be >= 0");
  if (s.h_min.size() != s.workspace.lo.size() || !s.h_min.allFinite() || (s.h_min.array() <= 0.0).any())
    bad("h_min", "one positive entry per state axis required");
  else if (s.workspace.valid()) {
    try {
      uniform_cell_count(s.workspace, s.h_min);
    } catch (const InvalidArgument& e) {
      bad("h_min", e.what());
    }
  }
  if (!(s.C_u > 0.0)) bad("C_u", "must be > 0");
  if (!(s.beta_u >= 0.0)) bad("beta_u", "must be >= 0");
  if (!(s.p_e_prior > 0.0 && s.p_e_prior < 1.0)) bad("p_e_prior", "must lie in (0, 1)");
  if (!(s.theta_thre >= 0.0 && s.theta_thre < std::numbers::pi / 2)) bad("theta_thre_deg", "must lie in [0, 90)");
  if (!(s.shrink > 0.0 && s.shrink <= 1.0)) bad("shrink", "must lie in (0, 1]");
  auto check_point = [&](const Vec& x, const std::string& path) {
    if (x.size() != s.workspace.lo.size() || !x.allFinite()) bad(path, "wrong dimension or non-finite");
    else if (s.workspace.valid() && !s.workspace.contains(x)) bad(path, "outside the workspace");
  };
  check_point(s.x_initial, "x_initial");
  check_point(s.x_target, "x_target");
  if (!(s.dt > 0.0)) bad("dt", "must be > 0");
  if (!(s.excitation_period > 0.0)) bad("excitation.period", "must be > 0");
  if (!(s.excitation_scale > 0.0 && s.excitation_scale < 1.0)) bad("excitation.scale", "must lie in (0, 1)");
  if (s.max_iters <= 0) bad("budgets.max_iters", "must be > 0");
  if (!(s.max_sim_time > 0.0)) bad("budgets.max_sim_time", "must be > 0");
  if (s.retry_budget <= 0) bad("budgets.retry_budget", "must be > 0");
  if (!(s.timeout_factor >= 1.0)) bad("budgets.timeout_factor", "must be >= 1");
  if (!(s.entry_depth >= 0.0 && s.entry_depth < 0.5)) bad("entry_depth", "must lie in [0, 0.5)");
  if (s.prediction_hops < 0) bad("prediction_hops", "must be >= 0");
  if (!(s.terminal.alpha > 0.0)) bad("terminal.alpha", "must be > 0");
  if (!(s.terminal.kappa > 0.0)) bad("terminal.kappa", "must be > 0");
  if (!(s.terminal.r_stop > 0.0)) bad("terminal.r_stop", "must be > 0");
  if (!(s.terminal.slack_weight > 0.0)) bad("terminal.slack_weight", "must be > 0");
  if (!(s.terminal_period >= s.dt)) bad("terminal.period", "must be >= dt");
  if (!(s.terminal_time > 0.0)) bad("terminal.time", "must be > 0");
  return err;
}

/// Fully actuated case study: drifting Mecanum platform on [-8, 8]^2.
inline Scenario mecanum_scenario() {
  Scenario s;
  s.name = "mecanum";
  s.system = "mecanum";
  s.workspace = Box(Vec::Constant(2, -8.0), Vec::Constant(2, 8.0));
  s.Pu = Box(Vec::Constant(2, -5.0), Vec::Constant(2, 5.0));
  s.L_df = s.L_g = 0.03;
  s.h_min = Vec::Ones(2);
  s.C_u = 100.0;
  s.beta_u = 0.8;
  s.x_initial = Vec(2);
  s.x_initial << 5.5, 4.5;
  s.x_target = Vec(2);
  s.x_target << -5.5, 1.5;
  return s;
}

/// Underactuated case study: unicycle on [-10, 10]^2 x [-pi, pi].
inline Scenario unicycle_scenario() {
  Scenario s;
  s.name = "unicycle";
  s.system = "unicycle";
  Vec lo(3), hi(3), h(3);
  lo << -10.0, -10.0, -std::numbers::pi;
  hi << 10.0, 10.0, std::numbers::pi;
  h << 1.25, 1.25, std::numbers::pi / 4;
  s.workspace = Box(lo, hi);
  s.Pu = Box(Vec::Constant(2, -10.0), Vec::Constant(2, 10.0));
  s.L_df = 0.05;
  s.L_g = 1.0;
  s.h_min = h;
  s.C_u = 10.0;
  s.beta_u = 1.0;
  s.theta_thre = 10.0 * std::numbers::pi / 180.0;
  s.x_initial = Vec(3);
  s.x_initial << -8.125, -8.125, std::numbers::pi / 8;
  s.x_target = Vec(3);
  s.x_target << 8.125, 8.125, std::numbers::pi / 8;
  s.terminal.alpha = 4.0;  // the leg references below are tracked one at a time
  return s;
}

enum class MissionOutcome { Success, Partial, Failure };

inline const char* to_string(MissionOutcome o) {
  switch (o) {
    case MissionOutcome::Success: return "success";
    case MissionOutcome::Partial: return "partial";
    case MissionOutcome::Failure: return "failure";
  }
  return "unknown";
}

struct MissionEvent {
  double t = 0.0;
  std::string kind;
  CellId cell = kNoCell;
  std::string detail;
};

struct GraphSnapshot {
  struct EdgeRow {
    CellId from, to;
    EdgeStatus status;
    double weight, p_e;
    bool capped;
  };
  int step = 0;
  double t = 0.0;
  CellId current = kNoCell;
  CellId target = kNoCell;
  std::vector<CellId> nodes;
  std::vector<CellId> path;
  double path_cost = 0.0;
  double entropy = 0.0;
  ReachGraph::Tally tally;
  std::vector<EdgeRow> edges;
};

struct LogSample {
  double t;
  Vec x;
  Vec u;
  CellId cell;
};

struct MissionLog {
  MissionOutcome outcome = MissionOutcome::Failure;
  std::string message;
  std::vector<LogSample> trajectory;
  std::vector<MissionEvent> events;
  std::vector<GraphSnapshot> snapshots;
  std::vector<Box> leaves;  // final partition (id and depth filled)
  Vec final_state;

  std::size_t leaf_count = 0;
  std::int64_t uniform_count = 0;
  double reduction_ratio = 0.0;  // 1 - leaves / uniform
  double wall_time = 0.0;
  long lp_solves = 0;
  long qp_solves = 0;
  double sim_time = 0.0;
  double final_distance = 0.0;
  int iterations = 0;
  int identifications = 0;
  int unintended_exits = 0;
  int timeouts = 0;
  int max_retries_used = 0;
  int time_bound_violations = 0;
  double max_workspace_violation = 0.0;
  bool reached_target_cell = false;
  bool terminal_converged = false;
  int terminal_steps = 0;
  double min_terminal_barrier = std::numeric_limits<double>::infinity();
  double max_kkt_residual = 0.0;

  int count(const std::string& kind) const {
    int c = 0;
    for (const auto& e : events) c += e.kind == kind;
    return c;
  }
};

namespace detail {

/// Control at one vertex that keeps the exit row strict and violates the
/// remaining rows as little as possible (L1 over row slacks, rows scaled to
/// unit normal), with a small reward for exit flow. Rows flagged in `hard`
/// get no slack. Empty when the unrelaxed rows alone are infeasible.
inline std::optional<Vec> least_violation_control(const LinearFeasibilityProblem& prob,
                                                  const std::vector<bool>& hard = {}) {
  const int m = prob.dim();
  auto relaxed = [&](std::size_t k) {
    return prob.rows[k].kind != LinearFeasibilityProblem::Row::STRICT_GE && !(k < hard.size() && hard[k]);
  };
  std::vector<std::size_t> soft;
  for (std::size_t k = 0; k < prob.rows.size(); ++k)
    if (relaxed(k)) soft.push_back(k);
  const int S = static_cast<int>(soft.size());
  LinearProgram lp;
  lp.lo = Vec::Zero(m + S);
  lp.hi = Vec::Constant(m + S, 1e6);
  lp.lo.head(m) = prob.bounds.lo;
  lp.hi.head(m) = prob.bounds.hi;
  lp.A = Mat::Zero(static_cast<int>(prob.rows.size()), m + S);
  lp.b = Vec::Zero(static_cast<int>(prob.rows.size()));
  lp.objective = Vec::Zero(m + S);
  int si = 0;
  for (std::size_t k = 0; k < prob.rows.size(); ++k) {
    const auto& r = prob.rows[k];
    const int i = static_cast<int>(k);
    const double scale = std::max(r.a.norm(), 1e-12);
    const double sign = r.kind == LinearFeasibilityProblem::Row::LE ? 1.0 : -1.0;
    lp.A.block(i, 0, 1, m) = sign * r.a.transpose() / scale;
    lp.b(i) = sign * r.b / scale;
    if (r.kind == LinearFeasibilityProblem::Row::STRICT_GE) {
      lp.b(i) -= prob.delta_strict / scale;
      lp.objective.head(m) += 1e-3 * r.a / scale;
    } else if (relaxed(k)) {
      lp.A(i, m + si) = -1.0;
      lp.objective(m + si++) = -1.0;
    }
  }
  const auto res = solve_lp(lp);
  if (!res.ok()) return std::nullopt;
  return Vec(res.x.head(m));
}

/// Exit-time bound of an exact certificate. Relaxed side-facet
/// certificates hold u = 0 at the relaxed vertices, where the model may
/// not flow out at all; their estimate uses the remaining vertices and is
/// not a guarantee. Empty when no vertex flows out.
inline std::optional<double> certificate_time(const AffineModel& model, const ReachCertificate& cert) {
  if (cert.relaxed_vertex.empty() || std::none_of(cert.relaxed_vertex.begin(), cert.relaxed_vertex.end(),
                                                  [](bool b) { return b; }))
    return exit_time_bound(model, cert.region, cert.controls, cert.exit_facet).T0;
  const Vec& n = cert.region.facets[static_cast<std::size_t>(cert.exit_facet)].normal;
  const auto [lo, hi] = facet_extent(cert.region, n);
  double c1 = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cert.controls.size(); ++j)
    if (!cert.relaxed_vertex[j]) c1 = std::min(c1, n.dot(model.eval(cert.region.vertices[j], cert.controls[j])));
  if (!(c1 > 0.0) || !std::isfinite(c1)) return std::nullopt;
  return (hi - lo) / c1;
}

/// Per-vertex controls for an edge that could not be certified: the
/// certified rows where feasible, otherwise the least-violating control,
/// otherwise the input corner driving hardest through the exit facet.
/// Facets flagged in `walls` (the workspace boundary) are kept hard in the
/// least-violation step whenever that is feasible.
inline std::vector<Vec> best_effort_controls(const AffineModel& model, const Polytope& p, int exit_facet,
                                             const Box& Pu, const std::vector<bool>& walls = {}) {
  std::vector<Vec> out;
  const Vec& n = p.facets[static_cast<std::size_t>(exit_facet)].normal;
  for (int j = 0; j < p.num_vertices(); ++j) {
    auto prob = vertex_problem(model, p, exit_facet, j, Pu, {}, {}, false, kStrictMargin);
    auto r = max_margin_feasible(prob, 1e3);
    if (r.feasible()) {
      out.push_back(r.u);
      continue;
    }
    // Same row order as vertex_problem: incident facets, then the exit.
    std::vector<bool> hard;
    for (int i : p.vertex_facets[static_cast<std::size_t>(j)])
      if (i != exit_facet) hard.push_back(static_cast<std::size_t>(i) < walls.size() && walls[static_cast<std::size_t>(i)]);
    if (auto u = least_violation_control(prob, hard)) {
      out.push_back(*u);
      continue;
    }
    if (auto u = least_violation_control(prob)) {
      out.push_back(*u);
      continue;
    }
    const Vec nb = model.B.transpose() * n;
    Vec u(Pu.dim());
    for (int i = 0; i < Pu.dim(); ++i)
      u(i) = std::abs(nb(i)) < 1e-12 ? 0.5 * (Pu.lo(i) + Pu.hi(i)) : (nb(i) > 0.0 ? Pu.hi(i) : Pu.lo(i));
    out.push_back(u);
  }
  return out;
}

/// Terminal references for a unicycle-like plant (state x, y, heading).
/// Inside the target cell the heading is confined to the cell's band, so a
/// position error that no band heading points along is worked off in
/// straight legs along the two edge headings, parallel-parking style. Each
/// leg turns in place, then drives; the CLF-CBF QP tracks one reference at
/// a time and the final reference is the target itself.
class LegReference {
 public:
  LegReference(const Box& cell, const Vec& x_target, double r_stop)
      : cell_(cell), target_(x_target), near_(0.5 * r_stop) {
    const double band = cell.side(kHeadingAxis);
    th_lo_ = std::min(cell.lo(kHeadingAxis) + 0.1 * band, x_target(kHeadingAxis));
    th_hi_ = std::max(cell.hi(kHeadingAxis) - 0.1 * band, x_target(kHeadingAxis));
    const double side = std::min(cell.side(0), cell.side(1));
    step_ = 0.25 * side;
    margin_ = 0.04 * side;
  }

  Vec operator()(const Vec& x) {
    const Eigen::Vector2d p = x.head<2>(), pt = target_.head<2>();
    if (mode_ != Mode::Final && (pt - p).norm() < near_) mode_ = Mode::Final;
    // Drives track the goal's projection on the heading line: anything that
    // knocks the state sideways (a recovery, the drift) ends the leg early
    // instead of leaving a reference the plant cannot reach.
    auto along = [&] { return (goal_ - p).dot(travel_); };
    if (mode_ == Mode::Drive && along() < std::max(0.01, 0.25 * length_)) mode_ = Mode::Next;
    if (mode_ == Mode::Next) plan(x);
    if (mode_ == Mode::Turn && std::abs(x(kHeadingAxis) - heading_) < 0.05) mode_ = Mode::Drive;
    Vec ref = target_;
    if (mode_ == Mode::Turn) ref << p, heading_;
    if (mode_ == Mode::Drive) ref << p + along() * travel_, heading_;
    return ref;
  }

 private:
  enum class Mode { Next, Turn, Drive, Final };

  static Eigen::Vector2d dir(double th) { return {std::cos(th), std::sin(th)}; }

  /// Longest run from p along d, at most `cap`, that keeps a margin to the
  /// cell faces (or, where p is already in the margin, moves at most a
  /// little deeper into it).
  double run(const Eigen::Vector2d& p, const Eigen::Vector2d& d, double cap) const {
    double s = cap;
    for (int i = 0; i < 2; ++i) {
      const double hi = std::min(std::max(cell_.hi(i) - margin_, p(i) + 0.02), cell_.hi(i) - 0.005);
      const double lo = std::max(std::min(cell_.lo(i) + margin_, p(i) - 0.02), cell_.lo(i) + 0.005);
      if (d(i) > 1e-12) s = std::min(s, (hi - p(i)) / d(i));
      if (d(i) < -1e-12) s = std::min(s, (lo - p(i)) / d(i));
    }
    return std::max(s, 0.0);
  }

  void plan(const Vec& x) {
    const Eigen::Vector2d p = x.head<2>(), e = target_.head<2>() - p;
    const double phi = std::atan2(e(1), e(0));
    const double pi = std::numbers::pi;
    for (double c : {phi, phi + pi, phi - pi, phi + 2 * pi, phi - 2 * pi})
      if (c >= th_lo_ && c <= th_hi_) {
        heading_ = c;
        goal_ = target_.head<2>();
        length_ = e.norm();
        travel_ = e / length_;
        mode_ = Mode::Turn;
        return;
      }
    Eigen::Matrix2d D;
    D << dir(th_lo_), dir(th_hi_);
    const Eigen::Vector2d ab = D.colPivHouseholderQr().solve(e);
    Eigen::Vector2d d[2];
    double s[2];
    for (int k = 0; k < 2; ++k) {
      d[k] = (ab(k) > 0.0 ? 1.0 : -1.0) * dir(k == 0 ? th_lo_ : th_hi_);
      s[k] = run(p, d[k], std::min(std::abs(ab(k)), step_));
    }
    if (std::max(s[0], s[1]) < 0.005) {
      mode_ = Mode::Final;
      return;
    }
    // Prefer the edge heading closer to the current one unless it is
    // blocked much sooner.
    int k = std::abs(x(kHeadingAxis) - th_lo_) < std::abs(x(kHeadingAxis) - th_hi_) ? 0 : 1;
    if (s[k] < 0.5 * s[1 - k]) k = 1 - k;
    heading_ = k == 0 ? th_lo_ : th_hi_;
    goal_ = p + s[k] * d[k];
    length_ = s[k];
    travel_ = d[k];
    mode_ = Mode::Turn;
  }

  Box cell_;
  Vec target_;
  double near_, th_lo_ = 0.0, th_hi_ = 0.0, step_ = 0.0, margin_ = 0.0;
  Mode mode_ = Mode::Next;
  double heading_ = 0.0, length_ = 0.0;
  Eigen::Vector2d goal_ = Eigen::Vector2d::Zero(), travel_ = Eigen::Vector2d::UnitX();
};

}  // namespace detail

struct ReplanDirective {
  enum class Action { Continue, Replan, Abort };
  Action action = Action::Continue;
  CellId current = kNoCell;  // leaf the state is in now
  std::string reason;
};

/// Classifies a cell exit against the plan. Leaving the planned way is a
/// no-op, landing elsewhere in the workspace asks for a replan from the
/// cell actually entered, and leaving the workspace aborts the mission.
inline ReplanDirective handle_unintended_exit(const PartitionTree& tree, const Vec& state, int intended_facet,
                                              int actual_facet, CellId intended_cell) {
  ReplanDirective d;
  d.current = tree.locate(state);
  if (d.current == kNoCell || !tree.root().contains(state, 1e-6)) {
    d.action = ReplanDirective::Action::Abort;
    d.current = kNoCell;
    d.reason = "left the workspace through facet " + std::to_string(actual_facet);
    return d;
  }
  if (actual_facet == intended_facet && d.current == intended_cell) return d;
  d.action = ReplanDirective::Action::Replan;
  d.reason = "planned cell " + std::to_string(intended_cell) + " via facet " + std::to_string(intended_facet) +
             ", entered cell " + std::to_string(d.current) + " via facet " + std::to_string(actual_facet);
  return d;
}

/// Test hook: lets a test replace what identification returns.
struct MissionHooks {
  std::function<void(AffineModel&, CellId)> on_identified;
};

class MissionRunner {
 public:
  explicit MissionRunner(Scenario sc, MissionHooks hooks = {})
      : sc_(std::move(sc)), hooks_(std::move(hooks)), sys_(make_system(sc_)), tree_(sc_.workspace, sc_.h_min) {
    const auto errs = validate_scenario(sc_);
    if (!errs.empty()) throw InvalidArgument("invalid scenario: " + errs.front());
    last_u_ = sc_.Pu.center();
  }

  MissionLog run() {
    const auto wall0 = std::chrono::steady_clock::now();
    const auto stats0 = solver_stats();
    x_ = sc_.x_initial;
    t_ = 0.0;
    refine();
    log_.trajectory.push_back({t_, x_, last_u_, locate(x_)});
    try {
      loop();
    } catch (const NumericalError& e) {
      finish(MissionOutcome::Failure, std::string("numerical error: ") + e.what());
    }
    log_.final_state = x_;
    log_.final_distance = (x_ - sc_.x_target).norm();
    log_.leaf_count = tree_.leaf_count();
    log_.uniform_count = uniform_cell_count(sc_.workspace, sc_.h_min);
    log_.reduction_ratio = 1.0 - static_cast<double>(log_.leaf_count) / static_cast<double>(log_.uniform_count);
    for (CellId id : tree_.leaves()) log_.leaves.push_back(tree_.cell(id));
    log_.lp_solves = solver_stats().lp_solves - stats0.lp_solves;
    log_.qp_solves = solver_stats().qp_solves - stats0.qp_solves;
    log_.sim_time = t_;
    for (const auto& s : log_.trajectory)
      log_.max_workspace_violation = std::max(log_.max_workspace_violation, sc_.workspace.max_violation(s.x));
    log_.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return log_;
  }

 private:
  using Key = ReachGraph::Key;

  struct EdgeKnowledge {
    EdgeStatus status = EdgeStatus::Uncertain;
    double time_bound = 0.0;
    CertKind kind = CertKind::Exact;
    std::optional<ReachCertificate> cert;  // controls for execution
    bool exact_done = false;
    std::optional<double> p_e;             // lowered after failed attempts
    int predictive_source = -1;            // model index last used for prediction
    int misses = 0;                        // unintended exits under a certificate
  };

  // ---- bookkeeping -------------------------------------------------------

  void event(const std::string& kind, CellId cell, const std::string& detail = {}) {
    log_.events.push_back({t_, kind, cell, detail});
  }

  void finish(MissionOutcome o, const std::string& msg) {
    if (done_) return;
    done_ = true;
    log_.outcome = o;
    log_.message = msg;
    event(to_string(o), tree_.locate(x_), msg);
  }

  void record(const Trajectory& tr, CellId cell) {
    for (std::size_t k = 1; k < tr.samples.size(); ++k)
      log_.trajectory.push_back({tr.samples[k].t, tr.samples[k].x, tr.samples[k].u, cell});
  }

  /// Partition queries see states projected onto the workspace; the loop
  /// has already rejected anything more than a rounding error outside.
  Vec projected(const Vec& x) const { return x.cwiseMax(sc_.workspace.lo).cwiseMin(sc_.workspace.hi); }
  CellId locate(const Vec& x) const { return tree_.locate(projected(x)); }

  // ---- partition and models ----------------------------------------------

  void refine() {
    const auto splits = tree_.refine_along(projected(x_), sc_.x_target);
    for (const auto& s : splits) {
      auto it = cell_model_.find(s.parent);
      for (CellId c : s.children)
        if (it != cell_model_.end()) inherited_.insert(c), cell_model_[c] = it->second;
      if (it != cell_model_.end()) cell_model_.erase(it);
      inherited_.erase(s.parent);
    }
    if (!splits.empty()) event("refine", kNoCell, std::to_string(splits.size()) + " splits");
    if (tree_.version() != graph_version_) rebuild_graph();
  }

  void rebuild_graph() {
    adj_ = adjacency(tree_);
    graph_ = ReachGraph(tree_, adj_, {sc_.C_u, sc_.beta_u, sc_.p_e_prior});
    // Drop knowledge about edges whose endpoints were split.
    for (auto it = know_.begin(); it != know_.end();)
      it = graph_.find(it->first.first, it->first.second) ? std::next(it) : know_.erase(it);
    for (auto& [k, kn] : know_) {
      if (kn.status == EdgeStatus::Certain) graph_.set_certain(k.first, k.second, kn.time_bound, kn.kind);
      else if (kn.status == EdgeStatus::Impossible) graph_.set_impossible(k.first, k.second);
      else if (kn.p_e) graph_.set_probability(k.first, k.second, *kn.p_e);
    }
    graph_.refresh_weights();
    graph_version_ = tree_.version();
  }

  bool identified(CellId c) const { return cell_model_.count(c) && !inherited_.count(c); }

  /// Runs the excitation from x_. Returns false when the state left the cell.
  bool identify(CellId cell) {
    const Box& box = tree_.cell(cell);
    clear_faces(cell);
    const auto plan = default_excitation(sc_.Pu, sys_.n, sc_.excitation_period, sc_.excitation_scale, sc_.Pu.center(),
                                         static_cast<std::uint32_t>(sc_.seed * 7919u + static_cast<std::uint64_t>(log_.identifications)));
    // States fresh from a crossing sit on a face; the excitation may wander
    // across it by a hair without leaving the cell's dynamics behind.
    const Vec pad = sc_.entry_depth * (box.hi - box.lo);
    const Box allowed((box.lo - pad).cwiseMax(sc_.workspace.lo), (box.hi + pad).cwiseMin(sc_.workspace.hi));
    const auto r = identify_affine(sys_, x_, plan, allowed);
    ++log_.identifications;
    for (std::size_t k = 1; k < r.samples.size(); ++k)
      log_.trajectory.push_back({t_ + r.samples[k].t, r.samples[k].x, r.samples[k].u, cell});
    t_ += r.duration;
    x_ = r.final_state;
    last_u_ = plan.inputs.back();
    if (!r.ok) {
      event("identification_aborted", cell, r.message);
      bump_retry(cell);
      return false;
    }
    AffineModel model = r.model;
    if (hooks_.on_identified) hooks_.on_identified(model, cell);
    models_.push_back(model);
    cell_model_[cell] = model;
    inherited_.erase(cell);
    // Exact verdicts of this cell are re-derived from the new model.
    for (auto& [k, kn] : know_)
      if (k.first == cell) kn.exact_done = false;
    event("identified", cell);
    return true;
  }

  // ---- certification -----------------------------------------------------

  Polytope cell_polytope(CellId c) const { return box_to_polytope(tree_.cell(c)); }

  std::optional<ReachCertificate> exact_certificate(const AffineModel& model, CellId c, int facet) const {
    const Box& box = tree_.cell(c);
    if (sc_.underactuated()) return relaxed_facet_reachable(model, box, facet, sc_.Pu, sc_.theta_thre, sc_.shrink);
    return facet_reachable(model, box_to_polytope(box), facet, sc_.Pu);
  }

  void apply(CellId from, CellId to, EdgeStatus st, double T0, CertKind kind,
             std::optional<ReachCertificate> cert) {
    auto& kn = know_[{from, to}];
    const Edge* e = graph_.find(from, to);
    if (st == EdgeStatus::Certain) {
      if (cert) kn.cert = std::move(cert);
      if (e->capped || e->status == EdgeStatus::Impossible) return;
      if (e->status == EdgeStatus::Certain && kn.kind == CertKind::Exact && kind != CertKind::Exact) return;
      graph_.set_certain(from, to, T0, kind);
      kn.status = EdgeStatus::Certain;
      kn.time_bound = graph_.find(from, to)->time_bound;
      kn.kind = *graph_.find(from, to)->kind;
    } else if (st == EdgeStatus::Impossible) {
      if (e->status != EdgeStatus::Uncertain) return;
      graph_.set_impossible(from, to);
      kn.status = EdgeStatus::Impossible;
    }
  }

  /// Exact verdicts for all outgoing edges of an identified cell.
  bool certify_exact(CellId c) {
    const AffineModel& model = cell_model_.at(c);
    const Polytope p = cell_polytope(c);
    const auto own = cell_pair_bounds(sc_.L_df, sc_.L_g, model, tree_.cell(c));
    bool changed = false;
    std::map<int, std::optional<ReachCertificate>> by_facet;
    for (const auto* a : adj_.outgoing(c)) {
      auto& kn = know_[{a->from, a->to}];
      if (kn.exact_done) continue;
      kn.exact_done = true;
      const int f = a->exit_facet();
      if (!by_facet.count(f)) by_facet[f] = exact_certificate(model, c, f);
      const auto before = graph_.find(a->from, a->to)->status;
      const auto& cert = by_facet[f];
      if (cert) {
        if (const auto T0 = detail::certificate_time(model, *cert))
          apply(a->from, a->to, EdgeStatus::Certain, *T0, cert->kind, cert);
        else
          know_[{a->from, a->to}].cert = cert;  // usable controls, no time estimate
      } else if (predict_unreachable(model, own, p, f, sc_.Pu)) {
        apply(a->from, a->to, EdgeStatus::Impossible, 0.0, CertKind::Exact, std::nullopt);
      }
      changed |= graph_.find(a->from, a->to)->status != before;
    }
    if (changed) graph_.refresh_weights();
    return changed;
  }

  int nearest_model(const Box& cell) const {
    int best = -1;
    double bd = std::numeric_limits<double>::infinity();
    const Vec c = cell.center();
    for (std::size_t i = 0; i < models_.size(); ++i) {
      const double d = (models_[i].linearization_point - c).norm();
      if (d < bd) {
        bd = d;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

  /// Predictive verdicts for unidentified cells within the hop horizon of
  /// identified cells.
  bool certify_predictive() {
    std::map<CellId, int> hops;
    std::vector<CellId> frontier;
    for (CellId id : graph_.nodes())
      if (identified(id)) hops[id] = 0, frontier.push_back(id);
    for (int h = 1; h <= sc_.prediction_hops; ++h) {
      std::vector<CellId> next;
      for (CellId u : frontier)
        for (const auto* a : adj_.outgoing(u))
          if (!hops.count(a->to)) hops[a->to] = h, next.push_back(a->to);
      frontier = std::move(next);
    }
    bool changed = false;
    for (const auto& [c, h] : hops) {
      if (h == 0) continue;
      const Box& box = tree_.cell(c);
      const int src = nearest_model(box);
      if (src < 0) continue;
      const AffineModel& source = models_[static_cast<std::size_t>(src)];
      const auto bounds = cell_pair_bounds(sc_.L_df, sc_.L_g, source, box);
      const Polytope p = box_to_polytope(box);
      for (const auto* a : adj_.outgoing(c)) {
        auto& kn = know_[{a->from, a->to}];
        const Edge* e = graph_.find(a->from, a->to);
        if (e->status != EdgeStatus::Uncertain || kn.predictive_source == src) continue;
        kn.predictive_source = src;
        const int f = a->exit_facet();
        if (auto cert = predict_reachable(source, bounds, p, f, sc_.Pu)) {
          const auto T = robust_exit_time_bound(source, bounds, p, f, sc_.Pu, cert->rows);
          if (T && std::isfinite(T->bound.T0) && T->bound.T0 > 0.0) {
            cert->controls = T->controls;
            apply(a->from, a->to, EdgeStatus::Certain, T->bound.T0, CertKind::Predictive, std::move(cert));
          }
        } else if (predict_unreachable(source, bounds, p, f, sc_.Pu)) {
          apply(a->from, a->to, EdgeStatus::Impossible, 0.0, CertKind::Predictive, std::nullopt);
        }
        changed |= graph_.find(a->from, a->to)->status != EdgeStatus::Uncertain;
      }
    }
    if (changed) graph_.refresh_weights();
    return changed;
  }

  void snapshot(CellId cur, CellId target, const std::optional<Path>& path) {
    GraphSnapshot s;
    s.step = static_cast<int>(log_.snapshots.size());
    s.t = t_;
    s.current = cur;
    s.target = target;
    if (path) {
      s.path = path->nodes;
      s.path_cost = path->cost;
    }
    s.nodes.assign(graph_.nodes().begin(), graph_.nodes().end());
    s.entropy = graph_.entropy();
    s.tally = graph_.tally();
    for (const auto& [k, e] : graph_.edges())
      s.edges.push_back({e.from, e.to, e.status, e.weight, e.p_e, e.capped});
    log_.snapshots.push_back(std::move(s));
  }

  // ---- execution ---------------------------------------------------------

  /// Controller and time budget for the planned edge out of `cur`.
  std::pair<PWAController, double> controller_for(CellId cur, const Edge& e) {
    const Box& box = tree_.cell(cur);
    const int f = e.exit_facet();
    auto& kn = know_[{e.from, e.to}];
    if (e.status == EdgeStatus::Certain && kn.cert) {
      const auto& cert = *kn.cert;
      return {synthesize_controller(cert.region, cert.controls), sc_.timeout_factor * e.time_bound};
    }
    // Uncertain edge: a certificate for the full facet may exist (capped
    // edges); otherwise best-effort vertex controls.
    const AffineModel& model = cell_model_.at(cur);
    Polytope region = box_to_polytope(box);
    std::vector<Vec> controls;
    if (kn.cert) {
      region = kn.cert->region;
      controls = kn.cert->controls;
    } else {
      std::vector<bool> walls(region.facets.size(), false);
      for (int a = 0; a < box.dim(); ++a) {
        if (sc_.underactuated() && a == kHeadingAxis) continue;  // periodic
        walls[static_cast<std::size_t>(box_facet(a, false))] = box.lo(a) <= sc_.workspace.lo(a);
        walls[static_cast<std::size_t>(box_facet(a, true))] = box.hi(a) >= sc_.workspace.hi(a);
      }
      controls = detail::best_effort_controls(model, region, f, sc_.Pu, walls);
    }
    double c1 = std::numeric_limits<double>::infinity();
    const Vec& n = region.facets[static_cast<std::size_t>(f)].normal;
    for (int j = 0; j < region.num_vertices(); ++j)
      c1 = std::min(c1, n.dot(model.eval(region.vertices[static_cast<std::size_t>(j)], controls[static_cast<std::size_t>(j)])));
    const double speed = std::max(c1, 0.05 * sc_.Pu.hi.cwiseAbs().maxCoeff());
    return {synthesize_controller(region, controls), sc_.timeout_factor * box.side(e.axis) / speed};
  }

  /// Wraps periodic coordinates (unicycle heading) back into the workspace.
  Vec wrap(const Vec& x) const {
    Vec y = x;
    if (sc_.underactuated()) {
      const double lo = sc_.workspace.lo(kHeadingAxis), hi = sc_.workspace.hi(kHeadingAxis);
      const double span = hi - lo;
      if (y(kHeadingAxis) > hi) y(kHeadingAxis) -= span;
      if (y(kHeadingAxis) < lo) y(kHeadingAxis) += span;
    }
    return y;
  }

  void execute(CellId cur, const Edge& e) {
    auto [ctrl, budget] = controller_for(cur, e);
    const bool certain = e.status == EdgeStatus::Certain;
    const double bound = e.time_bound;
    IntegrateOptions opt;
    opt.dt = sc_.dt;
    opt.t_max = std::min(budget, sc_.max_sim_time - t_ + sc_.dt);
    opt.t0 = t_;
    opt.input_bounds = sc_.Pu;
    const double t_start = t_;
    const auto tr = integrate(sys_, [&](const Vec& x) { return ctrl(x); }, x_, tree_.cell(cur), opt);
    record(tr, cur);
    t_ = tr.final_time();
    x_ = tr.final_state();
    if (!tr.samples.empty()) last_u_ = tr.samples.back().u;
    if (!tr.exit) {
      ++log_.timeouts;
      event("timeout", cur, "no exit toward " + std::to_string(e.to) + " within " + std::to_string(budget) + " s");
      bump_retry(cur);
      // A failed traversal is evidence against the edge, certificate or
      // not; prune it so the search tries something else.
      auto& kn = know_[{e.from, e.to}];
      kn.status = EdgeStatus::Impossible;
      kn.cert.reset();
      graph_.block(e.from, e.to);
      graph_.refresh_weights();
      return;
    }
    if (is_wall(tree_.cell(cur), tr.exit->facet)) {
      // Integration stops on the workspace face; back off and replan
      // rather than leave.
      x_ = tr.exit->point.cwiseMax(sc_.workspace.lo).cwiseMin(sc_.workspace.hi);
      ++log_.unintended_exits;
      event("wall_contact", cur, "planned cell " + std::to_string(e.to) + ", reached the workspace boundary (facet " +
                                     std::to_string(tr.exit->facet) + ")");
      miss(e);
      bump_retry(cur);
      if (!done_) recover(cur, tr.exit->facet, cell_model_.at(cur));
      return;
    }
    const auto d = handle_unintended_exit(tree_, wrap(tr.exit->point), e.exit_facet(), tr.exit->facet, e.to);
    if (d.action == ReplanDirective::Action::Abort) {
      finish(MissionOutcome::Failure, d.reason);
      return;
    }
    x_ = wrap(tr.exit->point);
    const CellId actual = d.current;
    if (certain && e.kind != CertKind::Relaxed && t_ - t_start > bound * (1.0 + 1e-3)) {
      ++log_.time_bound_violations;
      event("time_bound_exceeded", cur, std::to_string(t_ - t_start) + " > " + std::to_string(bound));
    }
    if (d.action == ReplanDirective::Action::Replan) {
      ++log_.unintended_exits;
      event("unintended_exit", cur, d.reason);
      miss(e);
      bump_retry(cur);
    } else {
      event("cell_entered", actual, "from " + std::to_string(cur) + (certain ? " (certain)" : " (uncertain)"));
    }
    settle(actual, facet_axis(tr.exit->facet), facet_is_upper(tr.exit->facet) ? 1 : -1);
  }

  /// Crossings end on the shared face. Holding the last input a little
  /// longer moves the state off the face, so the excitation that follows
  /// does not immediately push it back.
  void settle(CellId cell, int axis, int direction) {
    const Box box = tree_.cell(cell);
    const double depth = sc_.entry_depth * box.side(axis);
    auto inside = [&] { return direction > 0 ? x_(axis) - box.lo(axis) : box.hi(axis) - x_(axis); };
    IntegrateOptions opt;
    opt.dt = sc_.dt;
    opt.t_max = sc_.dt;
    opt.input_bounds = sc_.Pu;
    const Vec u = last_u_;
    for (int k = 0; k < 1000 && inside() < depth; ++k) {
      opt.t0 = t_;
      const auto tr = integrate(sys_, [&](const Vec&) { return u; }, x_, box, opt);
      record(tr, cell);
      t_ = tr.final_time();
      const double before = inside();
      x_ = tr.final_state();
      if (tr.exit) {
        x_ = wrap(x_);
        return;
      }
      if (inside() <= before) return;  // the held input does not move inward
    }
  }

  /// The excitation wanders a little; near a face it could carry the state
  /// out of the cell (or the workspace) and abort. Back off first, using the
  /// best model at hand.
  void clear_faces(CellId cell) {
    const Box box = tree_.cell(cell);
    const AffineModel* model = nullptr;
    if (auto it = cell_model_.find(cell); it != cell_model_.end()) {
      model = &it->second;
    } else {
      double bd = std::numeric_limits<double>::infinity();
      for (const auto& m : models_)
        if (const double d = (m.linearization_point - x_).norm(); d < bd) bd = d, model = &m;
    }
    if (!model) return;
    for (int f = 0; f < 2 * box.dim(); ++f) {
      const int a = facet_axis(f);
      const double gap = facet_is_upper(f) ? box.hi(a) - x_(a) : x_(a) - box.lo(a);
      if (gap < sc_.entry_depth * box.side(a)) recover(cell, f, *model);
    }
  }

  /// Facet f of `box` lies on the (non-periodic) workspace boundary.
  bool is_wall(const Box& box, int f) const {
    const int a = facet_axis(f);
    if (sc_.underactuated() && a == kHeadingAxis) return false;
    return facet_is_upper(f) ? box.hi(a) >= sc_.workspace.hi(a) : box.lo(a) <= sc_.workspace.lo(a);
  }

  /// Moves the state off a face of the cell: holds the input corner that
  /// `model` says pushes hardest away from it.
  void recover(CellId cell, int wall, const AffineModel& model) {
    const Box box = tree_.cell(cell);
    const int axis = facet_axis(wall);
    const double sign = facet_is_upper(wall) ? 1.0 : -1.0;
    const Vec nb = sign * model.B.row(axis).transpose();
    Vec u = sc_.Pu.center();
    for (int i = 0; i < u.size(); ++i)
      if (std::abs(nb(i)) > 1e-9) u(i) = nb(i) > 0.0 ? sc_.Pu.lo(i) : sc_.Pu.hi(i);
    last_u_ = u;
    const double depth = sc_.entry_depth * box.side(axis);
    auto inside = [&] { return sign > 0 ? box.hi(axis) - x_(axis) : x_(axis) - box.lo(axis); };
    IntegrateOptions opt;
    opt.dt = sc_.dt;
    opt.t_max = sc_.dt;
    opt.input_bounds = sc_.Pu;
    for (int k = 0; k < 1000 && inside() < depth; ++k) {
      opt.t0 = t_;
      const auto tr = integrate(sys_, [&](const Vec&) { return u; }, x_, box, opt);
      record(tr, cell);
      t_ = tr.final_time();
      const double before = inside();
      x_ = tr.final_state();
      if (tr.exit) {
        x_ = wrap(x_.cwiseMax(sc_.workspace.lo).cwiseMin(sc_.workspace.hi));
        return;
      }
      if (inside() <= before) return;
    }
  }

  /// An edge whose controller sent the state elsewhere. Uncertain edges
  /// lose belief; a certificate that misses twice is retracted.
  void miss(const Edge& e) {
    const CellId from = e.from, to = e.to;
    auto& kn = know_[{from, to}];
    if (e.status == EdgeStatus::Uncertain) {
      lower_belief(from, to);
    } else if (e.status == EdgeStatus::Certain && ++kn.misses >= 2) {
      kn.status = EdgeStatus::Impossible;
      kn.cert.reset();
      graph_.block(from, to);
      graph_.refresh_weights();
      event("certificate_retracted", from, "edge to " + std::to_string(to) + " missed twice");
    }
  }

  /// A missed uncertain edge keeps its status but loses half its belief,
  /// which raises its weight so the search tries alternatives first.
  void lower_belief(CellId from, CellId to) {
    auto& kn = know_[{from, to}];
    const double p = 0.5 * graph_.find(from, to)->p_e;
    kn.p_e = p;
    graph_.set_probability(from, to, p);
    graph_.refresh_weights();
  }

  void bump_retry(CellId c) {
    const int r = ++retries_[c];
    log_.max_retries_used = std::max(log_.max_retries_used, r);
    if (r > sc_.retry_budget) finish(MissionOutcome::Failure, "retry budget exhausted in cell " + std::to_string(c));
  }

  // ---- terminal phase ----------------------------------------------------

  void terminal(CellId target) {
    event("terminal_phase", target);
    log_.reached_target_cell = true;
    const Box box = tree_.cell(target);
    const double t_end = t_ + sc_.terminal_time;
    std::optional<detail::LegReference> legs;
    if (sc_.underactuated()) legs.emplace(box, sc_.x_target, sc_.terminal.r_stop);
    double best = std::numeric_limits<double>::infinity(), best_t = t_;
    while (t_ < t_end) {
      if ((x_ - sc_.x_target).norm() < sc_.terminal.r_stop) {
        log_.terminal_converged = true;
        finish(MissionOutcome::Success, "reached target");
        return;
      }
      // The identified input matrix is only good near the heading it was
      // identified at; and a model whose bias parks the state short of the
      // target is replaced by one identified where the state stalled.
      const double dist = (x_ - sc_.x_target).norm();
      if (dist < 0.99 * best) best = dist, best_t = t_;
      const bool turned =
          legs && std::abs(x_(kHeadingAxis) - cell_model_.at(target).linearization_point(kHeadingAxis)) > 0.05;
      const bool stalled = !legs && t_ - best_t > 1.0;  // turning in place makes no progress either
      if (turned || stalled) {
        const std::size_t first = log_.trajectory.size();
        identify(target);
        for (std::size_t k = first; k < log_.trajectory.size(); ++k)
          log_.min_terminal_barrier = std::min(log_.min_terminal_barrier, -box.max_violation(log_.trajectory[k].x));
        if (done_) return;
        if (!box.contains(x_, 1e-9)) return;  // back to planning
        best_t = t_;
      }
      const Vec ref = legs ? (*legs)(x_) : sc_.x_target;
      const auto st = clf_cbf_control(cell_model_.at(target), x_, ref, box, sc_.Pu, sc_.terminal);
      ++log_.terminal_steps;
      if (!st.ok) {
        finish(MissionOutcome::Partial, st.message);
        return;
      }
      log_.max_kkt_residual = std::max({log_.max_kkt_residual, st.qp.stationarity, st.qp.complementarity, st.qp.primal_violation});
      IntegrateOptions opt;
      opt.dt = sc_.dt;
      opt.t_max = sc_.terminal_period;
      opt.t0 = t_;
      opt.input_bounds = sc_.Pu;
      opt.zero_order_hold = true;
      const Vec u = st.u;
      const auto tr = integrate(sys_, [&](const Vec&) { return u; }, x_, box, opt);
      record(tr, target);
      for (const auto& s : tr.samples) log_.min_terminal_barrier = std::min(log_.min_terminal_barrier, -box.max_violation(s.x));
      t_ = tr.final_time();
      x_ = tr.final_state();
      last_u_ = u;
      if (tr.exit) {
        event("terminal_exit", target, "left the target cell through facet " + std::to_string(tr.exit->facet));
        x_ = wrap(x_);
        return;  // back to planning
      }
    }
    finish(MissionOutcome::Partial, "terminal time budget spent; distance " + std::to_string((x_ - sc_.x_target).norm()));
  }

  // ---- main loop ---------------------------------------------------------

  void loop() {
    event("start", kNoCell);
    for (int it = 0; !done_; ++it) {
      log_.iterations = it;
      if (it >= sc_.max_iters) return finish(MissionOutcome::Failure, "iteration budget exhausted");
      if (t_ >= sc_.max_sim_time) return finish(MissionOutcome::Failure, "simulated time budget exhausted");
      x_ = wrap(x_);
      if (!sc_.workspace.contains(x_, 1e-6)) return finish(MissionOutcome::Failure, "left the workspace");
      refine();
      CellId cur = locate(x_);
      const CellId target = locate(sc_.x_target);
      if (!identified(cur)) {
        if (!identify(cur)) continue;
        if (locate(x_) != cur) continue;
      }
      if (cur == target) {
        terminal(target);
        continue;
      }
      certify_exact(cur);
      certify_predictive();
      std::optional<Path> path;
      // Exact checks along the path can change it; iterate to a fixed point.
      for (int k = 0; k < 64; ++k) {
        path = shortest_path(graph_, cur, target);
        if (!path) break;
        bool changed = false;
        for (std::size_t i = 0; i + 1 < path->nodes.size(); ++i)
          if (identified(path->nodes[i])) changed |= certify_exact(path->nodes[i]);
        if (!changed) break;
      }
      snapshot(cur, target, path);
      if (!path) return finish(MissionOutcome::Failure, "no path to the target cell");
      const Edge* e = graph_.find(path->nodes[0], path->nodes[1]);
      event("plan", cur, "next " + std::to_string(e->to) + " (" + to_string(e->status) + "), cost " + std::to_string(path->cost));
      execute(cur, *e);
    }
  }

  Scenario sc_;
  MissionHooks hooks_;
  TrueSystem sys_;
  PartitionTree tree_;
  Adjacency adj_;
  ReachGraph graph_;
  std::uint64_t graph_version_ = ~0ull;
  std::map<Key, EdgeKnowledge> know_;
  std::vector<AffineModel> models_;
  std::map<CellId, AffineModel> cell_model_;
  std::set<CellId> inherited_;
  std::map<CellId, int> retries_;
  MissionLog log_;
  Vec x_;
  Vec last_u_;
  double t_ = 0.0;
  bool done_ = false;
};

inline MissionLog run_mission(const Scenario& s, MissionHooks hooks = {}) {
  return MissionRunner(s, std::move(hooks)).run();
}

}  // namespace reachplan
