#pragma once

#include "msbtm/error.hpp"
#include "msbtm/numerics.hpp"

namespace msbtm {

/// N particle states at one simulation time, stored one particle per column.
struct Ensemble {
  double t = 0.0;
  Mat states;

  Eigen::Index size() const noexcept { return states.cols(); }
  Eigen::Index dim() const noexcept { return states.rows(); }
  Vec particle(Eigen::Index i) const { return states.col(i); }
};

inline void validate(const Ensemble& e) {
  if (e.size() < 1) throw DimensionError("ensemble must contain at least one particle");
  if (!e.states.allFinite()) throw NonFiniteError("ensemble contains non-finite states");
}

}  // namespace msbtm
