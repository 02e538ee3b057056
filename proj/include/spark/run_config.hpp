#pragma once

// RunConfig and its flat key registry ("projection.k", "rounds", ...). The
// registry is the single source for config files, --set overrides, manifests
// and checkpoint headers.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spark/model.hpp"
#include "spark/projection.hpp"

namespace spark::sim {

enum class DataSource { synthetic, idx };

struct RunConfig {
  model::MlpArchitecture arch{};

  std::size_t clients = 300;
  std::size_t degree = 5;
  std::size_t rounds = 40;
  std::size_t batch_size = 64;
  bool static_topology = false;
  double eta = 1e-4;
  std::size_t t_evolve = 100;
  double val_fraction = 0.1;
  bool shared_init = false;
  std::size_t workers = 1;
  std::size_t kernel_cap_bytes = std::size_t{2} << 30;
  std::uint64_t seed = 1;

  DataSource source = DataSource::synthetic;
  double dirichlet_alpha = 0.1;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_subset = 0;  // 0 keeps the full training split
  std::size_t synth_per_class = 200;
  std::size_t synth_test_per_class = 100;
  double synth_spread = 0.1;

  bool projection_enabled = true;
  proj::Mode projection_mode = proj::Mode::gaussian;
  std::size_t projection_k = 1000;
  proj::Allocation projection_allocation = proj::Allocation::proportional;
  proj::Codec codec = proj::Codec::f32;
  double sample_fraction = 1.0;
  std::optional<std::uint64_t> projection_seed;  // defaults to a stream of `seed`

  bool distill_enabled = true;
  bool warm_forever = false;
  std::optional<std::size_t> warm_rounds;  // defaults to ceil(0.2 R)
  double alpha_init = 1.0;
  double alpha_final = 0.3;
  double tau_init = 1.0;
  double tau_final = 3.0;

  bool momentum_enabled = true;
  double mu = 0.9;

  bool diag_grad_norm = false;
  bool diag_step_norm = false;
  std::size_t probe_size = 256;
  std::string graph_dump_dir;

  /// Identity projection when the projection ablation flag is off.
  proj::Mode effective_mode() const noexcept {
    return projection_enabled ? projection_mode : proj::Mode::identity;
  }
  double effective_mu() const noexcept { return momentum_enabled ? mu : 0.0; }
  bool distillation_active() const noexcept { return distill_enabled && !warm_forever; }
  std::uint64_t effective_projection_seed() const noexcept;
  std::size_t effective_warm_rounds() const noexcept;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
};

/// Every accepted key, in canonical order.
const std::vector<ConfigKey>& run_config_keys();
bool is_run_config_key(std::string_view key);

/// Throws ConfigError for unknown keys or unparsable values.
void set_key(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_key(const RunConfig& cfg, std::string_view key);
std::vector<std::pair<std::string, std::string>> to_pairs(const RunConfig& cfg);

}  // namespace spark::sim
