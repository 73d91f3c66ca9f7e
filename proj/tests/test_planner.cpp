#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "reachplan/planner.hpp"

using namespace reachplan;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

bool has_event(const MissionLog& log, const std::string& kind) { return log.count(kind) > 0; }

}  // namespace

TEST(Planner, BuiltInScenariosAreValid) {
  EXPECT_TRUE(validate_scenario(mecanum_scenario()).empty());
  EXPECT_TRUE(validate_scenario(unicycle_scenario()).empty());
}

TEST(Planner, ValidationNamesTheField) {
  auto s = mecanum_scenario();
  s.x_initial = v2(9.0, 0.0);
  s.retry_budget = 0;
  const auto errs = validate_scenario(s);
  ASSERT_EQ(errs.size(), 2u);
  EXPECT_EQ(errs[0].rfind("x_initial:", 0), 0u);
  EXPECT_EQ(errs[1].rfind("budgets.retry_budget:", 0), 0u);
  EXPECT_THROW(MissionRunner{s}, InvalidArgument);
}

TEST(Planner, MecanumMission) {
  const auto log = run_mission(mecanum_scenario());
  ASSERT_EQ(log.outcome, MissionOutcome::Success) << log.message;
  EXPECT_LT(log.final_distance, 0.1);
  EXPECT_LE(static_cast<double>(log.leaf_count), 0.5 * static_cast<double>(log.uniform_count));
  EXPECT_LE(log.max_workspace_violation, 1e-6);
  EXPECT_EQ(log.time_bound_violations, 0);
  EXPECT_GE(log.min_terminal_barrier, -1e-6);
  EXPECT_LE(log.max_kkt_residual, 1e-6);
  for (std::size_t i = 1; i < log.events.size(); ++i) EXPECT_LE(log.events[i - 1].t, log.events[i].t);
  for (std::size_t i = 1; i < log.trajectory.size(); ++i)
    ASSERT_LE(log.trajectory[i - 1].t, log.trajectory[i].t + 1e-12);
  EXPECT_TRUE(has_event(log, "identified"));
  EXPECT_TRUE(has_event(log, "terminal_phase"));
  EXPECT_FALSE(log.snapshots.empty());
}

TEST(Planner, StartInTargetCellRunsTerminalOnly) {
  auto s = mecanum_scenario();
  s.x_initial = v2(-5.2, 1.8);
  const auto log = run_mission(s);
  ASSERT_EQ(log.outcome, MissionOutcome::Success) << log.message;
  EXPECT_FALSE(has_event(log, "plan"));
  EXPECT_TRUE(has_event(log, "terminal_phase"));
  EXPECT_TRUE(log.snapshots.empty());
  EXPECT_LT(log.final_distance, 0.1);
}

TEST(Planner, HandleUnintendedExit) {
  PartitionTree tree(Box(Vec::Constant(2, 0.0), Vec::Constant(2, 4.0)), Vec::Ones(2));
  tree.refine_along(v2(0.5, 0.5), v2(3.5, 3.5));
  const CellId a = tree.locate(v2(1.5, 0.5));
  const CellId b = tree.locate(v2(0.5, 1.5));
  // Planned crossing: a lands where it should.
  auto d = handle_unintended_exit(tree, v2(1.5, 0.5), box_facet(0, true), box_facet(0, true), a);
  EXPECT_EQ(d.action, ReplanDirective::Action::Continue);
  EXPECT_EQ(d.current, a);
  // Planned a via +x, went up into b instead.
  d = handle_unintended_exit(tree, v2(0.5, 1.5), box_facet(0, true), box_facet(1, true), a);
  EXPECT_EQ(d.action, ReplanDirective::Action::Replan);
  EXPECT_EQ(d.current, b);
  EXPECT_FALSE(d.reason.empty());
  d = handle_unintended_exit(tree, v2(-0.1, 0.5), box_facet(0, true), box_facet(0, false), a);
  EXPECT_EQ(d.action, ReplanDirective::Action::Abort);
}

TEST(Planner, MisidentifiedModelExhaustsRetryBudget) {
  auto s = mecanum_scenario();
  s.retry_budget = 3;
  MissionHooks hooks;
  hooks.on_identified = [](AffineModel& m, CellId) { m.B = -m.B; };  // every certificate drives backwards
  const auto log = run_mission(s, hooks);
  EXPECT_EQ(log.outcome, MissionOutcome::Failure);
  EXPECT_NE(log.message.find("retry budget"), std::string::npos) << log.message;
  EXPECT_EQ(log.max_retries_used, s.retry_budget + 1);
  EXPECT_GT(log.unintended_exits, 0);
}

TEST(Planner, LegsParkUnicycleInTargetCell) {
  const auto sc = unicycle_scenario();
  const auto sys = make_system(sc);
  Box cell(Vec::Zero(3), Vec::Zero(3));
  cell.lo << 7.5, 7.5, 0.0;
  cell.hi << 8.75, 8.75, std::numbers::pi / 4;
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> U(0.1, 0.9);
  for (int trial = 0; trial < 6; ++trial) {
    Vec x(3);
    for (int i = 0; i < 3; ++i) x(i) = cell.lo(i) + U(rng) * cell.side(i);
    detail::LegReference legs(cell, sc.x_target, sc.terminal.r_stop);
    auto identify = [&] {
      const auto r = identify_affine(sys, x, default_excitation(sc.Pu, 3, sc.excitation_period, sc.excitation_scale,
                                                                sc.Pu.center(), trial),
                                     cell);
      x = r.final_state;
      return r.model;
    };
    AffineModel m = identify();
    double t = 0.0;
    while (t < 60.0 && (x - sc.x_target).norm() >= sc.terminal.r_stop) {
      if (std::abs(x(2) - m.linearization_point(2)) > 0.05) m = identify();
      const auto st = clf_cbf_control(m, x, legs(x), cell, sc.Pu, sc.terminal);
      ASSERT_TRUE(st.ok) << st.message;
      const auto tr = integrate(sys, [&](const Vec&) { return st.u; }, x, cell,
                                {.dt = 1e-3, .t_max = 1e-2, .input_bounds = sc.Pu, .zero_order_hold = true});
      ASSERT_FALSE(tr.exit) << "trial " << trial;
      x = tr.final_state();
      t += 1e-2;
    }
    EXPECT_LT((x - sc.x_target).norm(), sc.terminal.r_stop) << "trial " << trial;
  }
}

TEST(Planner, SameSeedSameRun) {
  auto s = mecanum_scenario();
  s.seed = 7;
  const auto a = run_mission(s), b = run_mission(s);
  ASSERT_EQ(a.trajectory.size(), b.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    ASSERT_EQ(a.trajectory[i].t, b.trajectory[i].t);
    ASSERT_EQ(a.trajectory[i].x, b.trajectory[i].x);
  }
  ASSERT_EQ(a.events.size(), b.events.size());
}
