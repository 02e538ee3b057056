#pragma once

#include <cmath>

#include "spark/model.hpp"
#include "spark/rng.hpp"
#include "spark/types.hpp"

namespace spark::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

inline Matrix random_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform();
  return m;
}

inline model::MlpArchitecture tiny_arch(std::size_t in = 5, std::size_t hidden = 4, std::size_t classes = 3) {
  model::MlpArchitecture a;
  a.input_dim = in;
  a.hidden_dim = hidden;
  a.num_classes = classes;
  return a;
}

inline model::WeightVector random_weights(const model::MlpArchitecture& arch, Rng& rng, double scale = 0.5) {
  Vector v(static_cast<Eigen::Index>(arch.parameter_count()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return model::WeightVector(arch, v);
}

inline double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace spark::test
