#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace reachplan {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Leaf/node identifier inside a PartitionTree. Stable across refinement.
using CellId = std::int64_t;
inline constexpr CellId kNoCell = -1;

/// Absolute tolerance for point-in-polytope tests.
inline constexpr double kContainTol = 1e-9;

/// Margin that realizes a strict inequality "> 0" as ">= kStrictMargin".
inline constexpr double kStrictMargin = 1e-6;

/// Thrown when inputs violate an operation's preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an internal numerical invariant is broken.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace detail
}  // namespace reachplan
