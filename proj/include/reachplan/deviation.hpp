#pragma once

// Lipschitz bounds on how far two local affine models can differ.

#include <algorithm>

#include "reachplan/dynamics.hpp"

namespace reachplan {

struct DeviationBounds {
  double eps_A = 0.0;
  double eps_B = 0.0;
  double eps_c = 0.0;

  bool zero() const { return eps_A == 0.0 && eps_B == 0.0 && eps_c == 0.0; }
};

inline DeviationBounds deviation_bounds(double L_df, double L_g, const Vec& x1, const Vec& x2) {
  detail::require(L_df >= 0.0 && L_g >= 0.0, "deviation_bounds: Lipschitz constants must be nonnegative");
  detail::require(x1.size() == x2.size(), "deviation_bounds: dimension mismatch");
  const double d = (x2 - x1).norm();
  return {L_df * d, L_g * d, 0.5 * L_df * d * d + L_df * d * x2.norm()};
}

/// Worst case of deviation_bounds over the vertices of `target` (both d and
/// ||x2|| are convex, so vertices attain the maxima).
inline DeviationBounds cell_pair_bounds(double L_df, double L_g, const AffineModel& source,
                                        const Box& target) {
  detail::require(source.linearization_point.size() == target.dim(),
                  "cell_pair_bounds: source model has no linearization point");
  DeviationBounds out;
  const unsigned count = 1u << target.dim();
  for (unsigned mask = 0; mask < count; ++mask) {
    const auto b = deviation_bounds(L_df, L_g, source.linearization_point, target.corner(mask));
    out.eps_A = std::max(out.eps_A, b.eps_A);
    out.eps_B = std::max(out.eps_B, b.eps_B);
    out.eps_c = std::max(out.eps_c, b.eps_c);
  }
  return out;
}

}  // namespace reachplan
