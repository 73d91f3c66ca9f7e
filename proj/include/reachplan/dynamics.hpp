#pragma once

// Plant models (the "unknown" control-affine systems of the case studies),
// the local affine model type, and a fixed-step RK4 integrator that stops at
// the first crossing of a cell boundary.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "reachplan/geometry.hpp"

namespace reachplan {

/// Local affine model xdot = A x + B u + c.
struct AffineModel {
  Mat A;
  Mat B;
  Vec c;
  Vec linearization_point;
  /// Set when the model was copied from a parent cell that got split.
  bool inherited = false;

  int state_dim() const { return static_cast<int>(A.rows()); }
  int input_dim() const { return static_cast<int>(B.cols()); }
  Vec eval(const Vec& x, const Vec& u) const { return A * x + B * u + c; }

  bool finite() const { return A.allFinite() && B.allFinite() && c.allFinite(); }
};

/// xdot = f(x) + g(x) u. The drift Jacobian is optional; only analytic
/// systems used as test oracles provide it.
struct TrueSystem {
  std::string name;
  int n = 0;
  int m = 0;
  std::function<Vec(const Vec&)> drift;
  std::function<Mat(const Vec&)> input;
  std::function<Mat(const Vec&)> drift_jacobian;

  Vec operator()(const Vec& x, const Vec& u) const { return drift(x) + input(x) * u; }
};

/// Four-wheel Mecanum robot on uneven terrain (planar translation only).
inline TrueSystem mecanum_system() {
  TrueSystem s;
  s.name = "mecanum";
  s.n = 2;
  s.m = 2;
  s.drift = [](const Vec& x) {
    Vec f(2);
    f << -0.5 * std::sin(0.1 * x(0) - 0.2 * x(1)) - 4.5,
        -0.2 * std::sin(0.3 * x(0) - 0.1 * x(1)) - 4.5;
    return f;
  };
  s.input = [](const Vec& x) {
    Mat g(2, 2);
    g << 1.0 + 0.02 * x(0), 0.02 * x(1),
        -0.02 * x(0), 1.0 - 0.02 * x(1);
    return g;
  };
  s.drift_jacobian = [](const Vec& x) {
    const double c1 = std::cos(0.1 * x(0) - 0.2 * x(1));
    const double c2 = std::cos(0.3 * x(0) - 0.1 * x(1));
    Mat j(2, 2);
    j << -0.05 * c1, 0.1 * c1,
        -0.06 * c2, 0.02 * c2;
    return j;
  };
  return s;
}

/// Unicycle kinematics (x, y, theta) with inputs (v, omega) and
/// position-dependent velocity disturbances.
inline TrueSystem unicycle_system() {
  TrueSystem s;
  s.name = "unicycle";
  s.n = 3;
  s.m = 2;
  s.drift = [](const Vec& x) {
    const double dv = 0.03 * std::cos(0.01 * x(0) + 0.02 * x(1));
    const double dw = 0.03 * std::sin(-0.02 * x(0) + 0.01 * x(1));
    Vec f(3);
    f << std::cos(x(2)) * dv, std::sin(x(2)) * dv, dw;
    return f;
  };
  s.input = [](const Vec& x) {
    Mat g = Mat::Zero(3, 2);
    g(0, 0) = std::cos(x(2));
    g(1, 0) = std::sin(x(2));
    g(2, 1) = 1.0;
    return g;
  };
  s.drift_jacobian = [](const Vec& x) {
    const double a = 0.01 * x(0) + 0.02 * x(1);
    const double b = -0.02 * x(0) + 0.01 * x(1);
    const double dv = 0.03 * std::cos(a);
    const double dv_dx = -0.03 * std::sin(a) * 0.01;
    const double dv_dy = -0.03 * std::sin(a) * 0.02;
    const double ct = std::cos(x(2)), st = std::sin(x(2));
    Mat j(3, 3);
    j << ct * dv_dx, ct * dv_dy, -st * dv,
        st * dv_dx, st * dv_dy, ct * dv,
        0.03 * std::cos(b) * -0.02, 0.03 * std::cos(b) * 0.01, 0.0;
    return j;
  };
  return s;
}

/// The affine system xdot = A x + B u + c wrapped as a plant.
inline TrueSystem affine_system(const Mat& A, const Mat& B, const Vec& c) {
  TrueSystem s;
  s.name = "affine";
  s.n = static_cast<int>(A.rows());
  s.m = static_cast<int>(B.cols());
  s.drift = [A, c](const Vec& x) -> Vec { return A * x + c; };
  s.input = [B](const Vec&) -> Mat { return B; };
  s.drift_jacobian = [A](const Vec&) -> Mat { return A; };
  return s;
}

inline TrueSystem affine_system(const AffineModel& m) { return affine_system(m.A, m.B, m.c); }

/// Jacobian linearization at (x_e, u = 0): A = df(x_e), B = g(x_e),
/// c = f(x_e) - df(x_e) x_e.
inline AffineModel analytic_linearize(const TrueSystem& s, const Vec& x_e) {
  detail::require(static_cast<bool>(s.drift_jacobian),
                  "analytic_linearize: system has no closed-form drift Jacobian");
  AffineModel m;
  m.A = s.drift_jacobian(x_e);
  m.B = s.input(x_e);
  m.c = s.drift(x_e) - m.A * x_e;
  m.linearization_point = x_e;
  return m;
}

using Controller = std::function<Vec(const Vec&)>;

struct TrajectorySample {
  double t;
  Vec x;
  Vec u;
};

struct ExitEvent {
  int facet;  // box facet index, see box_facet()
  double time;
  Vec point;
};

struct Trajectory {
  std::vector<TrajectorySample> samples;
  std::optional<ExitEvent> exit;
  int clamped_steps = 0;
  std::vector<std::string> warnings;

  const Vec& final_state() const { return exit ? exit->point : samples.back().x; }
  double final_time() const { return exit ? exit->time : samples.back().t; }
};

struct IntegrateOptions {
  double dt = 1e-3;
  double t_max = 1.0;   // duration, relative to t0
  double t0 = 0.0;      // absolute start time stamped on samples
  std::optional<Box> input_bounds;
  /// Evaluate the controller once per step and hold it (digital control).
  bool zero_order_hold = false;
  /// Stop as soon as the state leaves the cell by more than this.
  double event_tol = kContainTol;
  /// Time resolution of the crossing search.
  double event_time_tol = 1e-9;
};

namespace detail {

inline Vec clamp_input(const Vec& u, const std::optional<Box>& bounds, bool* clamped) {
  if (!bounds) return u;
  Vec out = u.cwiseMax(bounds->lo).cwiseMin(bounds->hi);
  if ((out - u).cwiseAbs().maxCoeff() > 1e-9 && clamped) *clamped = true;
  return out;
}

inline int violated_facet(const Box& cell, const Vec& x) {
  int best = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < cell.dim(); ++i) {
    const double vlo = cell.lo(i) - x(i), vhi = x(i) - cell.hi(i);
    if (vlo > worst) {
      worst = vlo;
      best = box_facet(i, false);
    }
    if (vhi > worst) {
      worst = vhi;
      best = box_facet(i, true);
    }
  }
  return best;
}

}  // namespace detail

/// Fixed-step RK4 closed-loop rollout inside `cell`. The first step that
/// leaves the cell is bisected to locate the crossing time and facet; the
/// trajectory ends there or at t_max.
inline Trajectory integrate(const TrueSystem& s, const Controller& ctrl, const Vec& x0,
                            const Box& cell, const IntegrateOptions& opt = {}) {
  detail::require(opt.dt > 0.0, "integrate: dt must be positive");
  detail::require(x0.size() == s.n, "integrate: state dimension mismatch");
  detail::require(cell.contains(x0, 1e-6), "integrate: initial state outside the cell");

  Trajectory traj;
  bool clamped_any = false;
  auto control = [&](const Vec& x) {
    bool clamped = false;
    Vec u = detail::clamp_input(ctrl(x), opt.input_bounds, &clamped);
    if (clamped) clamped_any = true;
    return u;
  };

  // One RK4 step of length h from x; `held` fixes u across stages.
  auto step = [&](const Vec& x, double h, const Vec* held) {
    auto rhs = [&](const Vec& y) { return s(y, held ? *held : control(y)); };
    const Vec k1 = rhs(x);
    const Vec k2 = rhs(x + 0.5 * h * k1);
    const Vec k3 = rhs(x + 0.5 * h * k2);
    const Vec k4 = rhs(x + h * k3);
    return Vec(x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  };

  Vec x = x0;
  double t = 0.0;
  traj.samples.push_back({opt.t0, x, control(x)});
  if (cell.max_violation(x) > opt.event_tol && !cell.contains(x, 1e-6)) {
    traj.exit = ExitEvent{detail::violated_facet(cell, x), opt.t0, x};
    return traj;
  }

  const double eps_t = 1e-12 * std::max(1.0, opt.t_max);
  while (t < opt.t_max - eps_t) {
    const double h = std::min(opt.dt, opt.t_max - t);
    const Vec u_hold = control(x);
    clamped_any = false;
    const Vec* held = opt.zero_order_hold ? &u_hold : nullptr;
    Vec x_next = step(x, h, held);
    if (clamped_any) {
      ++traj.clamped_steps;
      if (traj.warnings.size() < 16)
        traj.warnings.push_back("control clamped to input bounds at t=" + std::to_string(opt.t0 + t));
    }
    if (!x_next.allFinite()) throw NumericalError("integrate: non-finite state");

    if (cell.max_violation(x_next) > opt.event_tol) {
      double lo = 0.0, hi = h;
      Vec x_hi = x_next;
      while (hi - lo > opt.event_time_tol) {
        const double mid = 0.5 * (lo + hi);
        Vec xm = step(x, mid, held);
        if (cell.max_violation(xm) > opt.event_tol) {
          hi = mid;
          x_hi = std::move(xm);
        } else {
          lo = mid;
        }
      }
      const double t_exit = opt.t0 + t + hi;
      traj.samples.push_back({t_exit, x_hi, u_hold});
      traj.exit = ExitEvent{detail::violated_facet(cell, x_hi), t_exit, x_hi};
      return traj;
    }
    x = std::move(x_next);
    t += h;
    traj.samples.push_back({opt.t0 + t, x, u_hold});
  }
  return traj;
}

}  // namespace reachplan
