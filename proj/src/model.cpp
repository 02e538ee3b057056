#include "spark/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spark/errors.hpp"

namespace spark::model {

std::vector<LayerInfo> MlpArchitecture::layers() const {
  std::vector<LayerInfo> out{
      {"W1", hidden_dim, input_dim, 0},
      {"b1", hidden_dim, 1, 0},
      {"W2", num_classes, hidden_dim, 0},
      {"b2", num_classes, 1, 0},
  };
  std::size_t offset = 0;
  for (auto& layer : out) {
    layer.offset = offset;
    offset += layer.size();
  }
  return out;
}

void MlpArchitecture::validate() const {
  if (input_dim == 0 || hidden_dim == 0 || num_classes == 0) {
    throw ConfigError("architecture dimensions must be positive");
  }
}

WeightVector::WeightVector(const MlpArchitecture& arch)
    : WeightVector(arch, Vector::Zero(static_cast<Eigen::Index>(arch.parameter_count()))) {}

WeightVector::WeightVector(const MlpArchitecture& arch, Vector values)
    : arch_(arch), layers_(arch.layers()), values_(std::move(values)) {
  arch_.validate();
  if (static_cast<std::size_t>(values_.size()) != arch_.parameter_count()) {
    throw ConfigError("weight vector has " + std::to_string(values_.size()) + " entries, architecture needs " +
                      std::to_string(arch_.parameter_count()));
  }
}

WeightVector WeightVector::glorot(const MlpArchitecture& arch, Rng& rng) {
  WeightVector w(arch);
  for (std::size_t l = 0; l < w.layers_.size(); ++l) {
    const auto& info = w.layers_[l];
    if (info.cols == 1) continue;  // biases start at zero
    const double bound = std::sqrt(6.0 / static_cast<double>(info.rows + info.cols));
    auto seg = w.segment(l);
    for (Eigen::Index i = 0; i < seg.size(); ++i) seg[i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return w;
}

Eigen::Map<const Matrix> WeightVector::layer_matrix(std::size_t layer) const {
  const auto& info = layers_.at(layer);
  return {values_.data() + info.offset, static_cast<Eigen::Index>(info.rows), static_cast<Eigen::Index>(info.cols)};
}

Eigen::Map<Matrix> WeightVector::layer_matrix(std::size_t layer) {
  const auto& info = layers_.at(layer);
  return {values_.data() + info.offset, static_cast<Eigen::Index>(info.rows), static_cast<Eigen::Index>(info.cols)};
}

std::size_t JacobianBlock::total_dim() const noexcept {
  std::size_t d = 0;
  for (const auto& l : layers) d += static_cast<std::size_t>(l.cols());
  return d;
}

namespace {

enum : std::size_t { kW1 = 0, kB1 = 1, kW2 = 2, kB2 = 3 };

void check_inputs(const WeightVector& weights, const Matrix& inputs) {
  const auto& arch = weights.architecture();
  if (static_cast<std::size_t>(inputs.cols()) != arch.input_dim) {
    throw ConfigError("input has " + std::to_string(inputs.cols()) + " features, architecture expects " +
                      std::to_string(arch.input_dim));
  }
}

Matrix preactivation(const WeightVector& weights, const Matrix& inputs) {
  const auto w1 = weights.layer_matrix(kW1);
  const auto b1 = weights.segment(kB1);
  Matrix pre = inputs * w1.transpose();
  pre.rowwise() += b1.transpose();
  return pre;
}

}  // namespace

Matrix forward(const WeightVector& weights, const Matrix& inputs) {
  check_inputs(weights, inputs);
  const Matrix hidden = preactivation(weights, inputs).cwiseMax(0.0);
  Matrix logits = hidden * weights.layer_matrix(kW2).transpose();
  logits.rowwise() += weights.segment(kB2).transpose();
  return logits;
}

JacobianBlock jacobian(const WeightVector& weights, const Matrix& inputs, ClientId owner) {
  check_inputs(weights, inputs);
  const auto& arch = weights.architecture();
  const auto n_samples = inputs.rows();
  const auto in = static_cast<Eigen::Index>(arch.input_dim);
  const auto hid = static_cast<Eigen::Index>(arch.hidden_dim);
  const auto classes = static_cast<Eigen::Index>(arch.num_classes);
  const auto rows = n_samples * classes;

  const Matrix pre = preactivation(weights, inputs);
  const Matrix act = pre.cwiseMax(0.0);
  const auto w2 = weights.layer_matrix(kW2);

  JacobianBlock jac;
  jac.owner = owner;
  jac.sample_count = static_cast<std::size_t>(n_samples);
  jac.num_classes = arch.num_classes;
  for (const auto& info : weights.layers()) {
    jac.layer_names.push_back(info.name);
    jac.layers.emplace_back(Matrix::Zero(rows, static_cast<Eigen::Index>(info.size())));
  }
  Matrix& j_w1 = jac.layers[kW1];
  Matrix& j_b1 = jac.layers[kB1];
  Matrix& j_w2 = jac.layers[kW2];
  Matrix& j_b2 = jac.layers[kB2];

  for (Eigen::Index n = 0; n < n_samples; ++n) {
    for (Eigen::Index c = 0; c < classes; ++c) {
      const Eigen::Index row = n * classes + c;
      j_b2(row, c) = 1.0;
      j_w2.row(row).segment(c * hid, hid) = act.row(n);
      for (Eigen::Index h = 0; h < hid; ++h) {
        if (pre(n, h) <= 0.0) continue;  // relu'(0) = 0
        const double g = w2(c, h);
        j_b1(row, h) = g;
        j_w1.row(row).segment(h * in, in) = g * inputs.row(n);
      }
    }
  }
  return jac;
}

Vector loss_gradient(const WeightVector& weights, const Matrix& inputs, const Matrix& targets) {
  check_inputs(weights, inputs);
  const auto n = static_cast<double>(inputs.rows());
  const Matrix pre = preactivation(weights, inputs);
  const Matrix act = pre.cwiseMax(0.0);
  Matrix logits = act * weights.layer_matrix(kW2).transpose();
  logits.rowwise() += weights.segment(kB2).transpose();

  const Matrix d_logits = (softmax_rows(logits) - targets) / n;
  Matrix d_pre = d_logits * weights.layer_matrix(kW2);
  d_pre = d_pre.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());

  WeightVector grad(weights.architecture());
  grad.layer_matrix(kW2) = d_logits.transpose() * act;
  grad.segment(kB2) = d_logits.colwise().sum().transpose();
  grad.layer_matrix(kW1) = d_pre.transpose() * inputs;
  grad.segment(kB1) = d_pre.colwise().sum().transpose();
  return grad.values();
}

namespace {

// log sum_c exp(z_c) with max subtraction.
double log_sum_exp(const auto& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

}  // namespace

double cross_entropy(const Matrix& logits, const Matrix& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw ContractViolation("cross_entropy: logits and targets differ in shape");
  }
  if (logits.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const double row_sum = targets.row(n).sum();
    if (std::abs(row_sum - 1.0) > 1e-9) {
      throw ContractViolation("cross_entropy: target row " + std::to_string(n) + " sums to " +
                              std::to_string(row_sum));
    }
    const double lse = log_sum_exp(logits.row(n));
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const double t = targets(n, c);
      if (t != 0.0) total -= t * (logits(n, c) - lse);
    }
  }
  return total / static_cast<double>(logits.rows());
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ContractViolation("cross_entropy: label count differs from logit rows");
  }
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= logits.cols()) throw ContractViolation("cross_entropy: label out of range");
    total += log_sum_exp(logits.row(n)) - logits(n, y);
  }
  return total / static_cast<double>(logits.rows());
}

Matrix softmax_rows(const Matrix& logits, double temperature) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    const auto scaled = (logits.row(n) / temperature).eval();
    const double m = scaled.maxCoeff();
    const auto e = (scaled.array() - m).exp().eval();
    out.row(n) = e / e.sum();
  }
  return out;
}

Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(num_classes));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= num_classes) {
      throw ContractViolation("label " + std::to_string(labels[n]) + " outside [0, " + std::to_string(num_classes) +
                              ")");
    }
    out(static_cast<Eigen::Index>(n), labels[n]) = 1.0;
  }
  return out;
}

std::vector<int> predict(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index n = 0; n < logits.rows(); ++n) {
    Eigen::Index best = 0;
    logits.row(n).maxCoeff(&best);
    out[static_cast<std::size_t>(n)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace spark::model
