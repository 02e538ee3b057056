#pragma once

// Empirical NTK over aggregated sketches and cross-entropy prediction
// evolution.
//
// Rows of every sketch are flattened sample-major, class-minor. The kernel is
// K = sum_l J~_l J~_l^T over training rows; validation rows (held out from
// the evolving client's own batch) only see K_cross = J~_val J~_train^T.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spark/projection.hpp"
#include "spark/types.hpp"

namespace spark::kernel {

inline constexpr std::size_t kDefaultKernelCapBytes = std::size_t{2} << 30;
inline constexpr double kDivergenceBound = 1e6;

struct RowOrigin {
  ClientId client = 0;
  std::uint32_t sample = 0;
  friend bool operator==(const RowOrigin&, const RowOrigin&) = default;
};

/// One client's contribution to a round: sketch plus the logits and labels of
/// the same rows.
struct PeerBatch {
  proj::CompressedJacobian sketch;
  Matrix logits;  // rows x C
  std::vector<int> labels;
};

struct AggregatedSketch {
  std::vector<std::string> layer_names;
  std::vector<Matrix> layers;  // N_agg*C x k_l
  std::size_t num_classes = 0;
  std::vector<RowOrigin> provenance;  // one per sample
  std::size_t own_count = 0;          // leading rows that belong to the evolving client
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;

  Matrix logits;  // N_agg x C, aligned with provenance
  std::vector<int> labels;

  std::size_t sample_count() const noexcept { return provenance.size(); }
  /// Sketch rows of the given samples, per layer.
  Matrix gather(std::size_t layer, std::span<const std::size_t> samples) const;
  Matrix gather_logits(std::span<const std::size_t> samples) const;
  std::vector<int> gather_labels(std::span<const std::size_t> samples) const;
};

/// Stacks self first, then neighbors ascending by client id. All rows start in
/// train_rows. Throws ProtocolError when sketch widths or layer tables differ.
AggregatedSketch aggregate(const PeerBatch& self, std::span<const PeerBatch> neighbors);

/// Moves round(val_fraction * own_count) of the evolving client's own rows into
/// val_rows (chosen by seed), keeping at least one training row.
void split_validation(AggregatedSketch& agg, double val_fraction, std::uint64_t seed);

/// Dense: `train` and `cross` hold K and K_cross. Factored: K = F F^T and
/// K_cross = F_val F^T with F the column-stacked training sketch, which is
/// cheaper to apply whenever the total sketch width is below the row count.
enum class KernelForm { automatic, dense, factored };

struct KernelMatrix {
  Matrix train;         // (N_train*C)^2, symmetric PSD; dense form only
  Matrix cross;         // (N_val*C) x (N_train*C); dense form only
  Matrix train_factor;  // (N_train*C) x k; factored form only
  Matrix val_factor;    // (N_val*C) x k; factored form only
  bool factored = false;

  Eigen::Index train_rows() const noexcept { return factored ? train_factor.rows() : train.rows(); }
  Eigen::Index val_rows() const noexcept { return factored ? val_factor.rows() : cross.rows(); }
  Vector apply_train(const Vector& r) const;
  Vector apply_cross(const Vector& r) const;
  /// K as a dense matrix, whichever the form.
  Matrix dense_train() const;
};

/// Throws ResourceError if the chosen form would exceed cap_bytes.
/// `automatic` picks factored when sum_l k_l < N_train*C.
KernelMatrix build_kernel(const AggregatedSketch& agg, std::size_t cap_bytes = kDefaultKernelCapBytes,
                          KernelForm form = KernelForm::automatic);

struct EvolutionOptions {
  double eta = 1e-4;
  std::size_t steps = 100;  // T_evolve
  bool store_trajectory = true;
};

struct EvolutionResult {
  std::vector<Matrix> train_trajectory;  // f_0 .. f_T (when stored)
  std::vector<Matrix> val_trajectory;
  std::vector<double> val_loss;  // val_loss[t-1] is the loss of f_t, t = 1..steps_taken
  std::size_t steps_taken = 0;
  std::size_t t_star = 0;
  bool truncated = false;
  /// sum_{s < t*} softmax(f_s) - t* * Y_target, train rows x C.
  Matrix residual_sum;
};

/// f_{t+1} = f_t + eta K (Y - softmax(f_t)) on train rows; validation rows
/// advance with K_cross and the same residual. t* minimizes validation
/// cross-entropy against `val_labels` (ties to the smallest t); without
/// validation rows t* is the last step. A step with |f| > 1e6 or a non-finite
/// entry ends the trajectory at the previous step.
EvolutionResult evolve(const KernelMatrix& kernel, const Matrix& f0_train, const Matrix& f0_val,
                       const Matrix& y_target, std::span<const int> val_labels, const EvolutionOptions& opts);

/// dw~_l = -(eta / N_train) J~_l^T (sum_{s<t*} softmax(f_s) - t* Y), contracted
/// over training rows.
std::vector<Vector> compressed_update(const AggregatedSketch& agg, const EvolutionResult& evo, double eta);

}  // namespace spark::kernel
