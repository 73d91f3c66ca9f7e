// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "reachplan/reachplan.hpp"
#include "support.hpp"

using namespace reachplan;
using testsupport::spectral_norm;
using testsupport::vec;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("%s  %2d  %-34s %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string trajectory_csv(const MissionLog& log) {
  std::ostringstream os;
  write_trajectory_csv(os, log);
  return os.str();
}

using StatusSeq = std::vector<std::vector<std::tuple<CellId, CellId, EdgeStatus>>>;

StatusSeq edge_statuses(const MissionLog& log) {
  StatusSeq seq;
  for (const auto& s : log.snapshots) {
    auto& row = seq.emplace_back();
    for (const auto& e : s.edges) row.emplace_back(e.from, e.to, e.status);
  }
  return seq;
}

// Random instance in 2 or 3 dimensions with two inputs.
struct Instance {
  Box cell;
  Polytope p;
  AffineModel m;
  int facet;
};

Instance random_instance(std::mt19937& rng, int t, double span) {
  const int n = t % 3 == 2 ? 3 : 2;
  Instance in{testsupport::random_box(rng, n, span), {}, {}, 0};
  in.p = box_to_polytope(in.cell);
  in.m = testsupport::random_model(rng, n, 2, in.cell.center());
  in.facet = t % (2 * n);
  return in;
}

void mecanum_criteria(const MissionLog& log) {
  report(1, log.outcome == MissionOutcome::Success && log.wall_time <= 120.0 && log.max_workspace_violation <= 1e-6,
         "mecanum end-to-end",
         fmt("outcome %s, wall %.2f s, sim %.2f s, workspace violation %.1e", to_string(log.outcome), log.wall_time,
             log.sim_time, log.max_workspace_violation));
  const double frac = static_cast<double>(log.leaf_count) / static_cast<double>(log.uniform_count);
  report(2, frac <= 0.5, "partition reduction",
         fmt("%zu of %lld uniform cells (%.1f%%, reduction %.1f%%)", log.leaf_count,
             static_cast<long long>(log.uniform_count), 100 * frac, 100 * log.reduction_ratio));
}

void predictive_soundness() {
  std::mt19937 rng(1001);
  const Box Pu(Vec::Constant(2, -1.5), Vec::Constant(2, 1.5));
  std::uniform_real_distribution<double> E(0.0, 0.3);
  int certified = 0, violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto in = random_instance(rng, t, 2.0);
    const DeviationBounds b{E(rng), E(rng), E(rng)};
    const auto cert = predict_reachable(in.m, b, in.p, in.facet, Pu);
    if (!cert) continue;
    ++certified;
    for (int s = 0; s < 100; ++s) {
      const auto mp = testsupport::perturbed(rng, in.m, b);
      for (int j = 0; j < in.p.num_vertices(); ++j)
        violations += !testsupport::vertex_condition_holds(mp, in.p, in.facet, j, cert->controls[j]);
    }
  }
  report(3, certified > 0 && violations == 0, "predictive certificate soundness",
         fmt("%d of 1000 instances certified, %d vertex violations over %d perturbed models", certified, violations,
             100 * certified));
}

void unreachability_soundness() {
  std::mt19937 rng(1002);
  const Box Pu(Vec::Constant(2, -1.5), Vec::Constant(2, 1.5));
  std::uniform_real_distribution<double> E(0.0, 0.3);
  int refuted = 0, violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto in = random_instance(rng, t, 2.0);
    const DeviationBounds b{E(rng), E(rng), E(rng)};
    if (!predict_unreachable(in.m, b, in.p, in.facet, Pu)) continue;
    ++refuted;
    for (int s = 0; s < 100; ++s)
      violations += facet_reachable(testsupport::perturbed(rng, in.m, b), in.p, in.facet, Pu).has_value();
  }
  report(4, refuted > 0 && violations == 0, "predictive unreachability soundness",
         fmt("%d of 1000 instances refuted, %d reachable perturbed models", refuted, violations));
}

void zero_bounds() {
  std::mt19937 rng(1003);
  const Box Pu(Vec::Constant(2, -2.0), Vec::Constant(2, 2.0));
  int disagree = 0, reachable = 0;
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    const auto in = random_instance(rng, t, 4.0);
    const bool exact = facet_reachable(in.m, in.p, in.facet, Pu).has_value();
    disagree += predict_reachable(in.m, {}, in.p, in.facet, Pu).has_value() != exact;
    disagree += predict_unreachable(in.m, {}, in.p, in.facet, Pu) == exact;
    const auto r = robust_exit_time_bound(in.m, {}, in.p, in.facet, Pu);
    if (!r) continue;
    ++reachable;
    const auto nominal = exit_time_bound(in.m, in.p, r->controls, in.facet);
    worst = std::max(worst, std::abs(r->bound.T0 - nominal.T0));
  }
  report(5, disagree == 0 && reachable > 0 && worst <= 1e-9, "zero-bound reductions",
         fmt("%d verdict disagreements in 500, %d time bounds, max |T0 robust - nominal| %.1e", disagree, reachable,
             worst));
}

void exit_time() {
  std::mt19937 rng(1004);
  const Box Pu(Vec::Constant(2, -2.0), Vec::Constant(2, 2.0));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  int cells = 0, runs = 0, bad = 0;
  double worst = 0.0;
  for (int t = 0; cells < 100 && t < 2000; ++t) {
    const auto in = random_instance(rng, t, 4.0);
    const auto cert = facet_reachable(in.m, in.p, in.facet, Pu);
    if (!cert) continue;
    ++cells;
    const auto bound = exit_time_bound(in.m, in.p, cert->controls, in.facet);
    const auto ctrl = synthesize_controller(in.p, cert->controls);
    const Vec span = in.cell.hi - in.cell.lo;
    for (int k = 0; k < 20; ++k) {
      Vec x0 = in.cell.lo;
      for (int i = 0; i < x0.size(); ++i) x0(i) += span(i) * (0.001 + 0.998 * U(rng));
      const auto traj =
          integrate(affine_system(in.m), ctrl, x0, in.cell, {.dt = 1e-3, .t_max = 2 * bound.T0 + 1});
      ++runs;
      if (!traj.exit || traj.exit->facet != in.facet) {
        ++bad;
        continue;
      }
      worst = std::max(worst, traj.exit->time / bound.T0);
      bad += traj.exit->time > bound.T0 * (1 + 1e-3);
    }
  }
  report(6, cells == 100 && bad == 0, "exit-time bound",
         fmt("%d cells x 20 starts, %d misses, max measured/T0 %.4f", cells, bad, worst));
}

void deviation() {
  const auto s = mecanum_system();
  std::mt19937 rng(1005);
  std::uniform_real_distribution<double> U(-8.0, 8.0);
  int violations = 0;
  double tightest = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Vec x1 = vec({U(rng), U(rng)}), x2 = vec({U(rng), U(rng)});
    const auto b = deviation_bounds(0.03, 0.03, x1, x2);
    const auto m1 = analytic_linearize(s, x1), m2 = analytic_linearize(s, x2);
    const double dA = spectral_norm(m2.A - m1.A), dB = spectral_norm(s.input(x2) - s.input(x1)),
                 dc = (m2.c - m1.c).norm();
    violations += (dA > b.eps_A + 1e-12) + (dB > b.eps_B + 1e-12) + (dc > b.eps_c + 1e-12);
    if (b.eps_A > 0) tightest = std::max({tightest, dA / b.eps_A, dB / b.eps_B});
  }
  report(7, violations == 0, "deviation bound soundness",
         fmt("10000 pairs, %d violations, max ratio to bound %.3f", violations, tightest));
}

void identification() {
  std::mt19937 rng(1006);
  const Box Pu(Vec::Constant(2, -5.0), Vec::Constant(2, 5.0));
  auto rel = [](const Mat& est, const Mat& truth) { return (est - truth).norm() / std::max(1.0, truth.norm()); };
  double worst_affine = 0.0;
  bool ok = true;
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + t % 2;
    const auto truth = testsupport::random_model(rng, n, 2, Vec::Zero(n));
    const auto r = identify_affine(affine_system(truth), testsupport::gaussian(rng, n, 1), default_excitation(Pu, n));
    ok = ok && r.ok;
    if (!r.ok) continue;
    worst_affine = std::max({worst_affine, rel(r.model.A, truth.A), rel(r.model.B, truth.B), rel(r.model.c, truth.c)});
  }
  const auto s = mecanum_system();
  const Box Pm(Vec::Constant(2, -5.0), Vec::Constant(2, 5.0));
  double worst_mecanum = 0.0;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const Vec x0 = vec({-7.5 + i, -7.5 + j});
      const auto r = identify_affine(s, x0, default_excitation(Pm, 2));
      ok = ok && r.ok;
      if (!r.ok) continue;
      const auto lin = analytic_linearize(s, x0);
      worst_mecanum = std::max({worst_mecanum, spectral_norm(r.model.A - lin.A), spectral_norm(r.model.B - lin.B)});
    }
  report(8, ok && worst_affine <= 1e-3 && worst_mecanum <= 0.05, "identification accuracy",
         fmt("affine max rel err %.1e (50 systems), mecanum max op-norm err %.4f (256 centers)", worst_affine,
             worst_mecanum));
}

Edge random_edge(CellId a, CellId b, double w, EdgeStatus s) {
  Edge e;
  e.from = a;
  e.to = b;
  e.status = s;
  e.weight = w;
  e.l_u = 1.0;
  return e;
}

void graph_kernels() {
  const double h = edge_entropy(0.5);
  const double w = uncertain_weight(100.0, 1.0, 0.8, 1.0397);
  std::mt19937 rng(1007);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  int mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 2 + static_cast<int>(U(rng) * 7);
    std::vector<CellId> nodes;
    for (int i = 0; i < n; ++i) nodes.push_back(i);
    std::vector<Edge> edges;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j || U(rng) > 0.4) continue;
        const double wt = t % 2 == 0 ? 1.0 + std::floor(3 * U(rng)) : 0.1 + U(rng);
        edges.push_back(random_edge(i, j, wt, U(rng) < 0.15 ? EdgeStatus::Impossible : EdgeStatus::Certain));
      }
    const auto got = shortest_path(ReachGraph::from_edges(nodes, edges), 0, n - 1);
    const auto want = testsupport::brute_force(nodes, edges, 0, n - 1);
    if (got.has_value() != want.has_value()) ++mismatches;
    else if (got && (std::abs(got->cost - want->cost) > 1e-12 || got->nodes != want->nodes)) ++mismatches;
  }
  const bool pass = std::abs(h - std::log(2.0)) <= 1e-12 && std::abs(w - 54.5923047) <= 1e-6 && mismatches == 0;
  report(9, pass, "graph kernels",
         fmt("H(0.5) - ln 2 = %.1e, weight %.7f, %d Dijkstra mismatches in 200 graphs", h - std::log(2.0), w,
             mismatches));
}

void unicycle_criteria(const Scenario& s, const MissionLog& log) {
  report(10, log.outcome == MissionOutcome::Success && log.max_retries_used <= s.retry_budget,
         "unicycle end-to-end",
         fmt("outcome %s, distance %.4f, %d unintended exits, %d timeouts, max retries %d of %d, sim %.1f s",
             to_string(log.outcome), log.final_distance, log.unintended_exits, log.timeouts, log.max_retries_used,
             s.retry_budget, log.sim_time));
}

void terminal_criteria(const MissionLog& mec, const MissionLog& uni) {
  auto ok = [](const MissionLog& l) {
    return l.reached_target_cell && l.terminal_converged && l.final_distance < 0.1 &&
           l.min_terminal_barrier >= -1e-6 && l.max_kkt_residual <= 1e-6;
  };
  report(11, ok(mec) && ok(uni), "terminal phase",
         fmt("distance %.4f / %.4f, min barrier %.1e / %.1e, max KKT %.1e / %.1e (mecanum / unicycle)",
             mec.final_distance, uni.final_distance, mec.min_terminal_barrier, uni.min_terminal_barrier,
             mec.max_kkt_residual, uni.max_kkt_residual));
}

void determinism(const Scenario& sm, const MissionLog& mec, const Scenario& su, const MissionLog& uni) {
  const auto mec2 = run_mission(sm);
  const auto uni2 = run_mission(su);
  const bool csv = trajectory_csv(mec) == trajectory_csv(mec2) && trajectory_csv(uni) == trajectory_csv(uni2);
  const bool edges = edge_statuses(mec) == edge_statuses(mec2) && edge_statuses(uni) == edge_statuses(uni2);
  report(12, csv && edges, "determinism",
         fmt("trajectory.csv %s, edge-status sequences %s (%zu + %zu snapshots)", csv ? "identical" : "differ",
             edges ? "identical" : "differ", mec.snapshots.size(), uni.snapshots.size()));
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const Scenario sm = mecanum_scenario(), su = unicycle_scenario();
  const MissionLog mec = run_mission(sm);
  mecanum_criteria(mec);
  predictive_soundness();
  unreachability_soundness();
  zero_bounds();
  exit_time();
  deviation();
  identification();
  graph_kernels();
  const MissionLog uni = run_mission(su);
  unicycle_criteria(su, uni);
  terminal_criteria(mec, uni);
  determinism(sm, mec, su, uni);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%d of 12 criteria passed (%.1f s)\n", 12 - failures, secs);
  return failures == 0 ? 0 : 1;
}
