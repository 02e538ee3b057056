#pragma once

// Two-layer MLP: logits = W2 * relu(W1 * x + b1) + b2.
//
// Parameters are flattened in the fixed layer order W1, b1, W2, b2, each
// matrix row-major. Jacobian rows are indexed sample-major, class-minor:
// row = n * C + c.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spark/rng.hpp"
#include "spark/types.hpp"

namespace spark::model {

enum class Activation { relu };

struct LayerInfo {
  std::string name;
  std::size_t rows = 0;  // 1-D layers (biases) have cols == 1
  std::size_t cols = 0;
  std::size_t offset = 0;  // into the flat parameter vector
  std::size_t size() const noexcept { return rows * cols; }
};

struct MlpArchitecture {
  std::size_t input_dim = 784;
  std::size_t hidden_dim = 100;
  std::size_t num_classes = 10;
  Activation activation = Activation::relu;

  std::size_t parameter_count() const noexcept {
    return input_dim * hidden_dim + hidden_dim + hidden_dim * num_classes + num_classes;
  }
  std::vector<LayerInfo> layers() const;
  /// Throws ConfigError on zero dimensions.
  void validate() const;

  friend bool operator==(const MlpArchitecture&, const MlpArchitecture&) = default;
};

/// Flattened model parameters with their layer table.
class WeightVector {
 public:
  WeightVector() = default;
  explicit WeightVector(const MlpArchitecture& arch);  // zero weights
  WeightVector(const MlpArchitecture& arch, Vector values);

  /// Glorot-uniform weight matrices, zero biases.
  static WeightVector glorot(const MlpArchitecture& arch, Rng& rng);

  const MlpArchitecture& architecture() const noexcept { return arch_; }
  const std::vector<LayerInfo>& layers() const noexcept { return layers_; }
  std::size_t total_dim() const noexcept { return static_cast<std::size_t>(values_.size()); }

  const Vector& values() const noexcept { return values_; }
  Vector& values() noexcept { return values_; }

  Eigen::Map<const Matrix> layer_matrix(std::size_t layer) const;
  Eigen::Map<Matrix> layer_matrix(std::size_t layer);
  auto segment(std::size_t layer) const { return values_.segment(offset(layer), size(layer)); }
  auto segment(std::size_t layer) { return values_.segment(offset(layer), size(layer)); }

 private:
  Eigen::Index offset(std::size_t layer) const { return static_cast<Eigen::Index>(layers_.at(layer).offset); }
  Eigen::Index size(std::size_t layer) const { return static_cast<Eigen::Index>(layers_.at(layer).size()); }

  MlpArchitecture arch_;
  std::vector<LayerInfo> layers_;
  Vector values_;
};

/// Per-layer Jacobian of the logits. layers[l] has N*C rows and d_l columns.
struct JacobianBlock {
  std::vector<std::string> layer_names;
  std::vector<Matrix> layers;
  std::size_t sample_count = 0;
  std::size_t num_classes = 0;
  ClientId owner = 0;

  std::size_t total_dim() const noexcept;
};

Matrix forward(const WeightVector& weights, const Matrix& inputs);

/// Closed-form Jacobian, using relu'(0) = 0.
JacobianBlock jacobian(const WeightVector& weights, const Matrix& inputs, ClientId owner = 0);

/// Gradient of mean cross-entropy with respect to all parameters (backprop).
Vector loss_gradient(const WeightVector& weights, const Matrix& inputs, const Matrix& targets);

/// Mean over rows of -sum_c target * log softmax(logits). Targets must be
/// row-stochastic within 1e-9.
double cross_entropy(const Matrix& logits, const Matrix& targets);
/// Same, against integer labels.
double cross_entropy(const Matrix& logits, std::span<const int> labels);

Matrix softmax_rows(const Matrix& logits, double temperature = 1.0);
Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

/// Row-wise argmax.
std::vector<int> predict(const Matrix& logits);

}  // namespace spark::model
