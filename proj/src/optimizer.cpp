#include "spark/optimizer.hpp"

#include <string>

#include "spark/errors.hpp"

namespace spark::optim {

MomentumState MomentumState::zeros(std::size_t dim, double mu) {
  if (mu < 0.0 || mu >= 1.0) throw ConfigError("momentum mu must lie in [0, 1), got " + std::to_string(mu));
  return {Vector::Zero(static_cast<Eigen::Index>(dim)), mu};
}

Vector momentum_step(MomentumState& state, model::WeightVector& weights, const Vector& delta) {
  if (state.velocity.size() != delta.size() || static_cast<std::size_t>(delta.size()) != weights.total_dim()) {
    throw ConfigError("momentum_step: velocity, update and weights differ in dimension");
  }
  state.velocity = state.mu * state.velocity + delta;
  Vector step = state.mu * state.velocity + delta;
  weights.values() += step;
  return step;
}

}  // namespace spark::optim
