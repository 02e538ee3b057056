#pragma once

#include "spark/model.hpp"
#include "spark/types.hpp"

namespace spark::optim {

/// Per-client Nesterov state. The velocity lives in full parameter space.
struct MomentumState {
  Vector velocity;
  double mu = 0.9;

  static MomentumState zeros(std::size_t dim, double mu);
};

/// v' = mu v + dw;  w' = w + mu v' + dw  (applied in place).
/// Returns the applied step w' - w.
Vector momentum_step(MomentumState& state, model::WeightVector& weights, const Vector& delta);

}  // namespace spark::optim
