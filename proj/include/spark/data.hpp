#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spark/types.hpp"

namespace spark::data {

struct Dataset {
  std::string name;
  Matrix images;  // N x input_dim, values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(images.cols()); }
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Throws ContractViolation when row counts or label ranges are inconsistent.
  void validate() const;
};

/// Big-endian IDX pair (images magic 0x00000803, labels 0x00000801). Pixels
/// are divided by 255. Files ending in ".gz" are read through zlib.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes = 10);

/// Parses already-loaded IDX bytes; exposed for tests.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  std::size_t num_classes = 10);

struct Partition {
  std::vector<std::vector<std::size_t>> clients;  // sorted, disjoint sample indices
  std::vector<std::vector<double>> proportions;   // q_i drawn from Dir(alpha)
  double alpha = 0.0;
  std::uint64_t seed = 0;
};

/// Label-skewed split: q_i ~ Dir(alpha 1) per client, each class pool is
/// shared out in proportion to the clients' q_i[c] (largest remainder). Empty
/// clients take one sample from the largest client.
Partition dirichlet_partition(const Dataset& ds, std::size_t clients, double alpha, std::uint64_t seed);

/// Class c ~ N(mu_c, spread^2 I), mu_c = 0.25 + 0.5 e_c (random corners of
/// [0.25, 0.75]^dim when dim < C), clamped to [0, 1]. Rows are grouped by class.
/// The means depend on `seed` only; `stream` selects an independent draw of
/// samples around them (training and holdout use different streams).
Dataset synth_gaussians(std::size_t num_classes, std::size_t n_per_class, std::size_t dim, double spread,
                        std::uint64_t seed, std::uint64_t stream = 0);

/// Class means used by synth_gaussians; exposed for oracle checks.
Matrix synth_means(std::size_t num_classes, std::size_t dim, std::uint64_t seed);

}  // namespace spark::data
