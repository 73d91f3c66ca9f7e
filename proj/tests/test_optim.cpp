#include <gtest/gtest.h>

#include <random>

#include "reachplan/optim.hpp"

using namespace reachplan;

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Box box2(double lo, double hi) { return Box(Vec::Constant(2, lo), Vec::Constant(2, hi)); }

// Dense grid search over the input box.
bool grid_feasible(const LinearFeasibilityProblem& p, double step) {
  for (double a = p.bounds.lo(0); a <= p.bounds.hi(0) + 1e-12; a += step)
    for (double b = p.bounds.lo(1); b <= p.bounds.hi(1) + 1e-12; b += step)
      if (p.satisfied_by(vec({a, b}), 0.0)) return true;
  return false;
}

// Largest margin the grid can achieve (how robustly feasible an instance is).
double grid_best_margin(const LinearFeasibilityProblem& p, double step) {
  double best = -1e300;
  for (double a = p.bounds.lo(0); a <= p.bounds.hi(0) + 1e-12; a += step)
    for (double b = p.bounds.lo(1); b <= p.bounds.hi(1) + 1e-12; b += step) {
      double worst = 1e300;
      for (std::size_t k = 0; k < p.rows.size(); ++k) worst = std::min(worst, p.slack(k, vec({a, b})));
      best = std::max(best, worst);
    }
  return best;
}

// Active-set enumeration oracle for small strictly convex QPs.
double enumerate_qp(const QuadraticProgram& q, Vec* arg) {
  const int k = static_cast<int>(q.H.rows()), p = static_cast<int>(q.G.rows());
  double best = 1e300;
  for (unsigned mask = 0; mask < (1u << p); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < p; ++i)
      if (mask & (1u << i)) act.push_back(i);
    const int w = static_cast<int>(act.size());
    if (w > k) continue;
    Mat K = Mat::Zero(k + w, k + w);
    K.topLeftCorner(k, k) = q.H;
    Vec rhs(k + w);
    rhs.head(k) = -q.f;
    for (int a = 0; a < w; ++a) {
      K.block(k + a, 0, 1, k) = q.G.row(act[a]);
      K.block(0, k + a, k, 1) = q.G.row(act[a]).transpose();
      rhs(k + a) = q.h(act[a]);
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (lu.rank() < k + w) continue;
    const Vec z = lu.solve(rhs).head(k);
    if ((q.G * z - q.h).maxCoeff() > 1e-9) continue;
    const double val = 0.5 * z.dot(q.H * z) + q.f.dot(z);
    if (val < best) {
      best = val;
      if (arg) *arg = z;
    }
  }
  return best;
}

}  // namespace

TEST(LinearFeasibility, SimpleCases) {
  LinearFeasibilityProblem p(box2(-5, 5));
  p.add_ge(vec({1, 0}), 1.0);
  const auto r = linear_feasible(p);
  ASSERT_TRUE(r.feasible());
  EXPECT_GE(r.u(0), 1.0 - 1e-12);

  p.add_le(vec({1, 0}), 0.0);
  EXPECT_EQ(linear_feasible(p).status, LPStatus::Infeasible);
}

TEST(LinearFeasibility, StrictRowsKeepMargin) {
  LinearFeasibilityProblem p(box2(-1, 1));
  p.add_strict_ge(vec({1, 1}), 2.0 - 1e-5);
  const auto r = linear_feasible(p);
  ASSERT_TRUE(r.feasible());
  EXPECT_GE(p.slack(0, r.u), kStrictMargin);
  // A strict row that can only be met with equality is infeasible.
  LinearFeasibilityProblem q(box2(-1, 1));
  q.add_strict_ge(vec({1, 1}), 2.0);
  EXPECT_EQ(linear_feasible(q).status, LPStatus::Infeasible);
}

TEST(LinearFeasibility, DegenerateBoundsAfterSignRestriction) {
  LinearFeasibilityProblem p(Box(vec({0, -1}), vec({2, 1})));
  p.restrict_sign(0, -1);  // pins u0 = 0
  p.add_le(vec({1, 1}), 0.5);
  const auto r = linear_feasible(p);
  ASSERT_TRUE(r.feasible());
  EXPECT_EQ(r.u(0), 0.0);
}

TEST(LinearFeasibility, MatchesGridOracle) {
  std::mt19937 rng(21);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  int agree = 0, skipped = 0;
  for (int trial = 0; trial < 300; ++trial) {
    LinearFeasibilityProblem p(box2(-1, 1));
    const int rows = 2 + trial % 4;
    for (int k = 0; k < rows; ++k) {
      const Vec a = vec({U(rng), U(rng)});
      if (k % 3 == 2) p.add_strict_ge(a, 0.8 * U(rng));
      else p.add_le(a, 0.8 * U(rng));
    }
    const auto r = linear_feasible(p);
    ASSERT_NE(r.status, LPStatus::NumericalFailure);
    if (r.feasible()) {
      EXPECT_TRUE(p.satisfied_by(r.u));
    }
    // Instances whose best margin is within grid resolution are ambiguous
    // for a 0.01 grid; skip them.
    const double m = grid_best_margin(p, 0.01);
    if (std::abs(m) < 0.03) {
      ++skipped;
      continue;
    }
    EXPECT_EQ(r.feasible(), grid_feasible(p, 0.01)) << "trial " << trial;
    ++agree;
  }
  EXPECT_GT(agree, 200);
}

TEST(LinearProgram, MaximizeOverBox) {
  LinearProgram lp;
  lp.lo = vec({-1, -2});
  lp.hi = vec({3, 4});
  lp.A = Mat(1, 2);
  lp.A << 1, 1;
  lp.b = vec({5});
  lp.objective = vec({2, 1});
  const auto r = solve_lp(lp);
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r.value, 8.0, 1e-12);  // x = (3, 2)
}

TEST(LinearProgram, Deterministic) {
  LinearFeasibilityProblem p(box2(-3, 3));
  p.add_le(vec({1, 2}), 1.0);
  p.add_ge(vec({-1, 1}), -0.5);
  const auto a = linear_feasible(p), b = linear_feasible(p);
  EXPECT_EQ(a.u, b.u);
}

TEST(LinearFeasibility, MaxMarginPushesInward) {
  LinearFeasibilityProblem p(box2(-1, 1));
  p.add_le(vec({1, 0}), 0.0);
  p.add_strict_ge(vec({0, 1}), 0.0);
  const auto r = max_margin_feasible(p, 0.5);
  ASSERT_TRUE(r.feasible());
  EXPECT_NEAR(r.margin, 0.5, 1e-9);
  EXPECT_LE(r.u(0), -0.5 + 1e-9);
  EXPECT_GE(r.u(1), 0.5 + kStrictMargin - 1e-9);
}

namespace {

struct UnitSquareIntegrator {
  AffineModel model;
  Polytope poly;
  Box Pu;
  UnitSquareIntegrator() {
    model.A = Mat::Zero(2, 2);
    model.B = Mat::Identity(2, 2);
    model.c = Vec::Zero(2);
    model.linearization_point = Vec::Zero(2);
    poly = box_to_polytope(Box(Vec::Zero(2), Vec::Ones(2)));
    Pu = box2(-1, 1);
  }
};

}  // namespace

TEST(Maximin, SingleIntegrator) {
  UnitSquareIntegrator s;
  const auto r = maximin_c1_rob(s.model, {}, s.poly, box_facet(0, true), s.Pu);
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r.c1_rob, 1.0, 1e-12);
}

TEST(Maximin, ConstantMarginSubtracts) {
  UnitSquareIntegrator s;
  const auto r = maximin_c1_rob(s.model, {0.0, 0.0, 0.25}, s.poly, box_facet(0, true), s.Pu);
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(r.c1_rob, 0.75, 1e-12);
  // Grid oracle over a shared control (optimal controls are vertex-independent here).
  double best = -1e9;
  for (double a = -1; a <= 1 + 1e-12; a += 0.01) best = std::max(best, a - 0.25);
  EXPECT_NEAR(r.c1_rob, best, 1e-9);
}

TEST(Maximin, CannotBeImprovedByPerturbation) {
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  AffineModel m;
  m.A = Mat::Random(2, 2) * 0.3;
  m.B = Mat::Identity(2, 2) + Mat::Random(2, 2) * 0.2;
  m.c = vec({0.2, -0.1});
  m.linearization_point = Vec::Zero(2);
  const auto poly = box_to_polytope(Box(vec({0.5, -0.5}), vec({1.5, 0.5})));
  const Box Pu = box2(-2, 2);
  const DeviationBounds bounds{0.02, 0.03, 0.05};
  const auto r = maximin_c1_rob(m, bounds, poly, box_facet(1, true), Pu);
  ASSERT_TRUE(r.ok());
  const Vec& n1 = poly.facets[box_facet(1, true)].normal;
  const double U_max = max_vertex_norm(Pu);
  auto inner = [&](const std::vector<Vec>& us) {
    double v = 1e300;
    for (int j = 0; j < poly.num_vertices(); ++j)
      v = std::min(v, robust_flow(m, bounds, n1, poly.vertices[j], us[j], U_max));
    return v;
  };
  EXPECT_NEAR(r.c1_rob, inner(r.controls), 1e-9);
  for (int k = 0; k < 1000; ++k) {
    auto us = r.controls;
    for (auto& u : us) u = (u + 0.1 * vec({U(rng), U(rng)})).cwiseMax(Pu.lo).cwiseMin(Pu.hi);
    EXPECT_LE(inner(us), r.c1_rob + 1e-9);
  }
}

TEST(QP, Unconstrained) {
  QuadraticProgram q;
  q.H = 2.0 * Mat::Identity(3, 3);
  q.f = Vec::Zero(3);
  q.G = Mat(1, 3);
  q.G << 1, 1, 1;
  q.h = vec({1.0});
  const auto r = solve_qp(q);
  ASSERT_TRUE(r.ok);
  EXPECT_LT(r.z.norm(), 1e-12);
}

TEST(QP, SingleActiveRowIsProjection) {
  // min |z|^2 s.t. a.z <= b with b < 0: z = b a / |a|^2.
  QuadraticProgram q;
  q.H = 2.0 * Mat::Identity(3, 3);
  q.f = Vec::Zero(3);
  q.G = Mat(1, 3);
  q.G << 0.5, -1.0, 2.0;
  q.h = vec({-3.0});
  const auto r = solve_qp(q);
  ASSERT_TRUE(r.ok);
  const Vec a = q.G.row(0).transpose();
  EXPECT_LT((r.z - (-3.0) * a / a.squaredNorm()).norm(), 1e-10);
  EXPECT_LE(r.stationarity, 1e-9);
  EXPECT_LE(r.complementarity, 1e-9);
}

TEST(QP, MatchesActiveSetEnumeration) {
  std::mt19937 rng(17);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + trial % 3, p = 2 + trial % 5;
    Mat L = Mat::Random(k, k);
    QuadraticProgram q;
    q.H = L * L.transpose() + 0.5 * Mat::Identity(k, k);
    q.f = Vec::Random(k) * 2.0;
    q.G = Mat::Random(p, k);
    // Feasible by construction: a random point satisfies every row.
    const Vec z0 = Vec::Random(k);
    q.h = q.G * z0 + Vec::Random(p).cwiseAbs() * 0.5;
    const auto r = solve_qp(q, 1e3);
    ASSERT_TRUE(r.ok) << r.message;
    Vec zo;
    const double best = enumerate_qp(q, &zo);
    EXPECT_NEAR(r.objective, best, 1e-6 * (1.0 + std::abs(best)));
    EXPECT_LE(r.stationarity, 1e-6);
    EXPECT_LE(r.complementarity, 1e-6);
    EXPECT_LE(r.primal_violation, 1e-8);
    EXPECT_GE(r.lambda.minCoeff(), 0.0);
  }
  (void)U;
}
