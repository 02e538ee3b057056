#include "spark/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "spark/errors.hpp"
#include "spark/model.hpp"
#include "spark/rng.hpp"

namespace spark::kernel {

Matrix AggregatedSketch::gather(std::size_t layer, std::span<const std::size_t> samples) const {
  const auto classes = static_cast<Eigen::Index>(num_classes);
  const Matrix& src = layers.at(layer);
  Matrix out(static_cast<Eigen::Index>(samples.size()) * classes, src.cols());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.middleRows(static_cast<Eigen::Index>(i) * classes, classes) =
        src.middleRows(static_cast<Eigen::Index>(samples[i]) * classes, classes);
  }
  return out;
}

Matrix AggregatedSketch::gather_logits(std::span<const std::size_t> samples) const {
  Matrix out(static_cast<Eigen::Index>(samples.size()), logits.cols());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = logits.row(static_cast<Eigen::Index>(samples[i]));
  }
  return out;
}

std::vector<int> AggregatedSketch::gather_labels(std::span<const std::size_t> samples) const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto s : samples) out.push_back(labels.at(s));
  return out;
}

namespace {

void check_batch(const PeerBatch& b) {
  const auto& s = b.sketch;
  if (static_cast<std::size_t>(b.logits.rows()) != s.sample_count || b.labels.size() != s.sample_count ||
      static_cast<std::size_t>(b.logits.cols()) != s.num_classes || s.sample_indices.size() != s.sample_count) {
    throw ProtocolError("client " + std::to_string(s.owner) + " sent inconsistent sketch/logit/label row counts");
  }
}

void check_compatible(const proj::CompressedJacobian& ref, const proj::CompressedJacobian& other) {
  const auto fail = [&](const std::string& what) {
    throw ProtocolError("sketch from client " + std::to_string(other.owner) + " disagrees with client " +
                        std::to_string(ref.owner) + " on " + what);
  };
  if (other.layer_names != ref.layer_names || other.layer_dims != ref.layer_dims) fail("the layer table");
  if (other.num_classes != ref.num_classes) fail("the class count");
  for (std::size_t l = 0; l < ref.layers.size(); ++l) {
    if (other.layers[l].cols() != ref.layers[l].cols()) fail("sketch width k of layer '" + ref.layer_names[l] + "'");
  }
}

}  // namespace

AggregatedSketch aggregate(const PeerBatch& self, std::span<const PeerBatch> neighbors) {
  check_batch(self);
  std::vector<const PeerBatch*> order;
  order.push_back(&self);
  std::vector<const PeerBatch*> rest;
  for (const auto& n : neighbors) {
    check_batch(n);
    check_compatible(self.sketch, n.sketch);
    rest.push_back(&n);
  }
  std::stable_sort(rest.begin(), rest.end(),
                   [](const PeerBatch* a, const PeerBatch* b) { return a->sketch.owner < b->sketch.owner; });
  order.insert(order.end(), rest.begin(), rest.end());

  AggregatedSketch agg;
  agg.layer_names = self.sketch.layer_names;
  agg.num_classes = self.sketch.num_classes;
  agg.own_count = self.sketch.sample_count;

  std::size_t total = 0;
  for (const auto* b : order) total += b->sketch.sample_count;
  const auto classes = static_cast<Eigen::Index>(agg.num_classes);
  const auto total_rows = static_cast<Eigen::Index>(total) * classes;
  for (const auto& layer : self.sketch.layers) agg.layers.emplace_back(total_rows, layer.cols());
  agg.logits.resize(static_cast<Eigen::Index>(total), classes);

  Eigen::Index sample_at = 0;
  for (const auto* b : order) {
    const auto n = static_cast<Eigen::Index>(b->sketch.sample_count);
    for (std::size_t l = 0; l < agg.layers.size(); ++l) {
      agg.layers[l].middleRows(sample_at * classes, n * classes) = b->sketch.layers[l];
    }
    agg.logits.middleRows(sample_at, n) = b->logits;
    agg.labels.insert(agg.labels.end(), b->labels.begin(), b->labels.end());
    for (const auto idx : b->sketch.sample_indices) agg.provenance.push_back({b->sketch.owner, idx});
    sample_at += n;
  }
  agg.train_rows.resize(total);
  std::iota(agg.train_rows.begin(), agg.train_rows.end(), std::size_t{0});
  return agg;
}

void split_validation(AggregatedSketch& agg, double val_fraction, std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must lie in [0, 1)");
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(agg.own_count)));
  if (val_fraction > 0.0 && n_val == 0 && agg.own_count >= 2) n_val = 1;
  if (n_val >= agg.sample_count()) n_val = agg.sample_count() - 1;
  n_val = std::min(n_val, agg.own_count);

  Rng rng(seed);
  agg.val_rows = sample_without_replacement(agg.own_count, n_val, rng);
  agg.train_rows.clear();
  std::size_t v = 0;
  for (std::size_t s = 0; s < agg.sample_count(); ++s) {
    if (v < agg.val_rows.size() && agg.val_rows[v] == s) {
      ++v;
      continue;
    }
    agg.train_rows.push_back(s);
  }
}

Vector KernelMatrix::apply_train(const Vector& r) const {
  if (factored) return train_factor * (train_factor.transpose() * r);
  return train.selfadjointView<Eigen::Lower>() * r;
}

Vector KernelMatrix::apply_cross(const Vector& r) const {
  if (factored) return val_factor * (train_factor.transpose() * r);
  return cross * r;
}

Matrix KernelMatrix::dense_train() const {
  if (!factored) return train;
  Matrix k = Matrix::Zero(train_factor.rows(), train_factor.rows());
  k.selfadjointView<Eigen::Lower>().rankUpdate(train_factor);
  k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
  return k;
}

KernelMatrix build_kernel(const AggregatedSketch& agg, std::size_t cap_bytes, KernelForm form) {
  const auto classes = static_cast<Eigen::Index>(agg.num_classes);
  const auto n_train = static_cast<Eigen::Index>(agg.train_rows.size()) * classes;
  const auto n_val = static_cast<Eigen::Index>(agg.val_rows.size()) * classes;
  Eigen::Index width = 0;
  for (const auto& l : agg.layers) width += l.cols();
  const bool factored =
      form == KernelForm::factored || (form == KernelForm::automatic && width < n_train);

  const double rows = static_cast<double>(n_train + n_val);
  const double need = factored ? 8.0 * rows * static_cast<double>(width) : 8.0 * rows * static_cast<double>(n_train);
  if (need > static_cast<double>(cap_bytes)) {
    throw ResourceError(std::string(factored ? "factored" : "dense") + " kernel needs " +
                        std::to_string(static_cast<std::size_t>(need)) + " bytes, cap is " +
                        std::to_string(cap_bytes) +
                        "; lower batch_size or sample_fraction, or raise kernel_cap_bytes");
  }

  KernelMatrix k;
  k.factored = factored;
  if (factored) {
    k.train_factor.resize(n_train, width);
    k.val_factor.resize(n_val, width);
    Eigen::Index col = 0;
    for (std::size_t l = 0; l < agg.layers.size(); ++l) {
      const auto w = agg.layers[l].cols();
      k.train_factor.middleCols(col, w) = agg.gather(l, agg.train_rows);
      if (n_val > 0) k.val_factor.middleCols(col, w) = agg.gather(l, agg.val_rows);
      col += w;
    }
    return k;
  }
  k.train = Matrix::Zero(n_train, n_train);
  k.cross = Matrix::Zero(n_val, n_train);
  for (std::size_t l = 0; l < agg.layers.size(); ++l) {
    const Matrix jt = agg.gather(l, agg.train_rows);
    k.train.selfadjointView<Eigen::Lower>().rankUpdate(jt);
    if (n_val > 0) k.cross.noalias() += agg.gather(l, agg.val_rows) * jt.transpose();
  }
  k.train.triangularView<Eigen::StrictlyUpper>() = k.train.transpose();
  return k;
}

namespace {

// Row-wise softmax on a flattened (rows x C) vector.
void softmax_flat(const Vector& f, Eigen::Index classes, Vector& out) {
  out.resize(f.size());
  for (Eigen::Index r = 0; r < f.size(); r += classes) {
    const auto seg = f.segment(r, classes);
    const double m = seg.maxCoeff();
    auto o = out.segment(r, classes);
    o = (seg.array() - m).exp().matrix();
    o /= o.sum();
  }
}

double val_cross_entropy(const Vector& g, Eigen::Index classes, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto seg = g.segment(static_cast<Eigen::Index>(n) * classes, classes);
    const double m = seg.maxCoeff();
    const double lse = m + std::log((seg.array() - m).exp().sum());
    total += lse - seg[labels[n]];
  }
  return total / static_cast<double>(labels.size());
}

bool within_bound(const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]) || std::abs(v[i]) > kDivergenceBound) return false;
  }
  return true;
}

Matrix unflatten(const Vector& v, Eigen::Index classes) {
  return Eigen::Map<const Matrix>(v.data(), v.size() / classes, classes);
}

}  // namespace

EvolutionResult evolve(const KernelMatrix& kernel, const Matrix& f0_train, const Matrix& f0_val,
                       const Matrix& y_target, std::span<const int> val_labels, const EvolutionOptions& opts) {
  if (!(opts.eta > 0.0)) throw ConfigError("eta must be positive");
  if (opts.steps == 0) throw ConfigError("T_evolve must be >= 1");
  const Eigen::Index classes = f0_train.cols();
  const Eigen::Index n_train = f0_train.size();
  const Eigen::Index n_val = f0_val.size();
  if (kernel.train_rows() != n_train || y_target.size() != n_train || kernel.val_rows() != n_val ||
      static_cast<std::size_t>(f0_val.rows()) != val_labels.size()) {
    throw ContractViolation("evolve: kernel, predictions and targets disagree in size");
  }

  Vector f = Eigen::Map<const Vector>(f0_train.data(), n_train);
  Vector g = Eigen::Map<const Vector>(f0_val.data(), n_val);
  const Vector y = Eigen::Map<const Vector>(y_target.data(), n_train);
  if (!within_bound(f) || !within_bound(g)) throw DivergenceError("evolve: initial predictions are not finite");

  EvolutionResult res;
  if (opts.store_trajectory) {
    res.train_trajectory.push_back(f0_train);
    res.val_trajectory.push_back(f0_val);
  }
  Vector soft;
  Vector residual(n_train);
  Vector running = Vector::Zero(n_train);  // sum_{s<t} softmax(f_s)
  Vector best_sum;
  double best_loss = std::numeric_limits<double>::infinity();
  Vector f_next;
  Vector g_next;

  for (std::size_t t = 1; t <= opts.steps; ++t) {
    softmax_flat(f, classes, soft);
    residual = y - soft;
    f_next.noalias() = f + opts.eta * kernel.apply_train(residual);
    if (n_val > 0) {
      g_next.noalias() = g + opts.eta * kernel.apply_cross(residual);
    } else {
      g_next = g;
    }
    if (!within_bound(f_next) || !within_bound(g_next)) {
      res.truncated = true;
      break;
    }
    running += soft;
    f.swap(f_next);
    g.swap(g_next);
    res.steps_taken = t;
    if (opts.store_trajectory) {
      res.train_trajectory.push_back(unflatten(f, classes));
      res.val_trajectory.push_back(unflatten(g, classes));
    }
    if (n_val > 0) {
      const double loss = val_cross_entropy(g, classes, val_labels);
      res.val_loss.push_back(loss);
      if (loss < best_loss) {
        best_loss = loss;
        res.t_star = t;
        best_sum = running;
      }
    } else {
      res.t_star = t;
      best_sum = running;
    }
  }
  if (res.steps_taken == 0) {
    throw DivergenceError("evolve: the first kernel step already exceeds |f| <= 1e6; lower eta");
  }
  const Vector r = best_sum - static_cast<double>(res.t_star) * y;
  res.residual_sum = unflatten(r, classes);
  return res;
}

std::vector<Vector> compressed_update(const AggregatedSketch& agg, const EvolutionResult& evo, double eta) {
  if (evo.t_star == 0) throw ContractViolation("compressed_update: evolution has no selected step");
  const auto n_train = agg.train_rows.size();
  const Eigen::Map<const Vector> r(evo.residual_sum.data(), evo.residual_sum.size());
  if (static_cast<std::size_t>(r.size()) != n_train * agg.num_classes) {
    throw ContractViolation("compressed_update: residual does not match the training rows");
  }
  const double scale = -eta / static_cast<double>(n_train);
  std::vector<Vector> out;
  out.reserve(agg.layers.size());
  for (std::size_t l = 0; l < agg.layers.size(); ++l) {
    const Matrix jt = agg.gather(l, agg.train_rows);
    out.emplace_back(scale * (jt.transpose() * r));
  }
  return out;
}

}  // namespace spark::kernel
