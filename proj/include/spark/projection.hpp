#pragma once

// Layer-seeded Gaussian sketches of per-layer Jacobians.
//
// Every client derives the same P_l (d_l x k_l) from the shared global seed,
// so no projection matrices are ever exchanged. In identity mode P_l = I and
// the pipeline reduces to the uncompressed kernel update.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spark/model.hpp"
#include "spark/types.hpp"

namespace spark::proj {

enum class Mode { gaussian, identity };

/// How the total sketch width k is split between layers.
///   proportional: k_l proportional to d_l (largest remainder, each k_l >= 1),
///                 so that sum_l k_l == k and the payload ratio is k / d.
///   per_layer:    every layer gets width k (total L * k).
enum class Allocation { proportional, per_layer };

enum class Codec : std::uint8_t { f64 = 0, f32 = 1, f16 = 2, i8 = 3 };

std::string_view to_string(Mode m) noexcept;
std::string_view to_string(Allocation a) noexcept;
std::string_view to_string(Codec c) noexcept;
Mode parse_mode(std::string_view s);
Allocation parse_allocation(std::string_view s);
Codec parse_codec(std::string_view s);
std::size_t bytes_per_entry(Codec c) noexcept;

/// First 8 bytes (little-endian) of SHA-256(le64(global_seed) || utf8(layer_name)).
std::uint64_t layer_seed(std::uint64_t global_seed, std::string_view layer_name);

struct LayerSketch {
  std::string name;
  std::size_t input_dim = 0;  // d_l
  std::size_t width = 0;      // k_l
  std::uint64_t seed = 0;
};

struct ProjectionSpec {
  std::uint64_t global_seed = 0;
  std::size_t k = 1000;
  Mode mode = Mode::gaussian;
  Allocation allocation = Allocation::proportional;
  std::vector<LayerSketch> layers;

  /// Resolves per-layer seeds and widths for a layer table of (name, d_l).
  static ProjectionSpec make(std::uint64_t global_seed, std::size_t k, Mode mode, Allocation allocation,
                             const std::vector<model::LayerInfo>& layer_table);

  std::size_t total_width() const noexcept;
  std::size_t total_input_dim() const noexcept;
  const LayerSketch& layer(std::string_view name) const;
};

/// Splits k across layers by largest remainder with a floor of one per layer.
std::vector<std::size_t> allocate_widths(std::size_t k, std::span<const std::size_t> layer_dims);

/// d_l x k matrix. Gaussian mode: i.i.d. N(0, 1/k) entries drawn row-major from
/// xoshiro256++ seeded with the layer seed, normals by Box-Muller. Identity
/// mode returns I_{d_l} regardless of k.
Matrix generate_projection(const ProjectionSpec& spec, std::string_view layer, std::size_t input_dim,
                           std::size_t width);

struct CompressedJacobian {
  std::vector<std::string> layer_names;
  std::vector<std::size_t> layer_dims;  // d_l, carried so receivers can check the layer table
  std::vector<Matrix> layers;           // N*C x k_l, rows sample-major
  std::size_t sample_count = 0;
  std::size_t num_classes = 0;
  ClientId owner = 0;
  std::vector<std::uint32_t> sample_indices;
  Codec codec = Codec::f64;

  std::size_t width() const noexcept;
};

/// Holds the materialized P_l for one layer table; read-only after construction.
class Projector {
 public:
  explicit Projector(ProjectionSpec spec);

  const ProjectionSpec& spec() const noexcept { return spec_; }
  /// P_l; empty in identity mode.
  const Matrix& matrix(std::size_t layer) const { return mats_.at(layer); }

  /// J~_l = J_l P_l per layer.
  CompressedJacobian compress(const model::JacobianBlock& jac) const;
  /// dw_l = P_l dw~_l per layer (plain P, not a pseudo-inverse).
  std::vector<Vector> back_project(const std::vector<Vector>& delta) const;
  Vector back_project_flat(const std::vector<Vector>& delta) const;

 private:
  ProjectionSpec spec_;
  std::vector<Matrix> mats_;
};

CompressedJacobian compress(const model::JacobianBlock& jac, const ProjectionSpec& spec);
std::vector<Vector> back_project(const std::vector<Vector>& delta, const ProjectionSpec& spec);

struct SampledRows {
  model::JacobianBlock jacobian;
  Matrix logits;
  std::vector<std::uint32_t> indices;  // strictly increasing positions in the original batch
};

/// Batch positions kept for a batch of n: ceil(fraction * n) of them, uniform
/// without replacement, sorted. fraction = 1 keeps every row.
std::vector<std::size_t> choose_rows(std::size_t n, double fraction, std::uint64_t rng_seed);

/// Keeps ceil(fraction * N) rows chosen uniformly without replacement; the same
/// subset is applied to Jacobian rows and logit rows.
SampledRows sample_rows(const model::JacobianBlock& jac, const Matrix& logits, double fraction,
                        std::uint64_t rng_seed);

/// Restriction of a sketch to strictly increasing batch positions. Equal to
/// compressing the same rows of the uncompressed block.
CompressedJacobian take_rows(const CompressedJacobian& cj, std::span<const std::size_t> samples);

/// Orthogonal projector onto Range(P): P (P^T P)^{-1} P^T. Diagnostic only.
Matrix orthogonal_projector(const Matrix& p);
/// P P^T, the operator the back-projected update actually applies to a gradient.
Matrix sketch_operator(const Matrix& p);

/// 1 - (sum_l k_l) / d: the Jacobian payload saving against the full-rank block.
double payload_reduction(const ProjectionSpec& spec);

}  // namespace spark::proj
