#pragma once

#include <Eigen/Dense>

namespace spark {

/// Row-major dense matrix. Logit and target matrices use this layout so that
/// their storage is exactly the sample-major, class-minor flattening used by
/// the kernel engine.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using ClientId = std::uint32_t;

}  // namespace spark
