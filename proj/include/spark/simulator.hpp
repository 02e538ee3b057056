#pragma once

// Synchronous round loop. Each round every client draws a minibatch, computes
// logits and its Jacobian sketch, and sends (sketch, logits, labels) to its
// neighbors on that round's graph. Each client then aggregates what it
// received, evolves its predictions under the empirical kernel, back-projects
// the sketch-space update and applies it with Nesterov momentum.
//
// Every random draw is derived from (seed, purpose, round, client), so a run
// is reproducible from its config alone and independent of the worker count.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spark/data.hpp"
#include "spark/model.hpp"
#include "spark/optimizer.hpp"
#include "spark/projection.hpp"
#include "spark/run_config.hpp"

namespace spark::sim {

struct RoundMetrics {
  std::size_t round = 0;  // 1-based
  double agg_accuracy = 0.0;
  double agg_loss = 0.0;
  double client_accuracy = 0.0;  // mean of each client's own holdout accuracy
  double train_loss = 0.0;       // mean CE of each client's batch before its update
  std::uint64_t bytes_sent = 0;
  std::vector<std::uint64_t> client_bytes;
  std::size_t messages = 0;  // directed messages delivered
  double mean_t_star = 0.0;
  std::size_t truncated = 0;  // clients whose evolution hit the divergence guard
  std::size_t components = 0;
  double wall_seconds = 0.0;
  std::optional<double> grad_norm_sq;
  std::optional<double> step_norm;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Accuracy and mean cross-entropy on a nonempty holdout.
EvalResult evaluate(const model::WeightVector& weights, const data::Dataset& holdout);

/// Uniform average of the clients' weight vectors.
model::WeightVector average_weights(std::span<const model::WeightVector> weights);

struct Workload {
  data::Dataset train;
  data::Dataset holdout;
  data::Partition partition;
};

/// Loads or synthesizes the data named by the config and partitions it.
Workload load_workload(const RunConfig& cfg);

struct ClientState {
  model::WeightVector weights;
  optim::MomentumState momentum;
  std::uint64_t epoch = 0;   // current pass over the shard
  std::size_t cursor = 0;    // position inside that pass's permutation
};

/// Per-client record of the most recent round, kept for tests and diagnostics.
struct ClientTrace {
  std::vector<std::size_t> batch;  // shard-local sample ids
  Vector step;                     // applied w' - w
  Vector delta;                    // back-projected update before momentum
  std::size_t t_star = 0;
  bool truncated = false;
  std::size_t aggregated_samples = 0;
};

class Simulator {
 public:
  explicit Simulator(RunConfig cfg);
  Simulator(RunConfig cfg, Workload workload);

  const RunConfig& config() const noexcept { return cfg_; }
  const Workload& workload() const noexcept { return work_; }
  const proj::ProjectionSpec& projection() const noexcept { return projector_.spec(); }
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  const std::vector<RoundMetrics>& history() const noexcept { return history_; }
  const std::vector<ClientTrace>& last_trace() const noexcept { return trace_; }
  std::size_t rounds_done() const noexcept { return history_.size(); }
  bool finished() const noexcept { return rounds_done() >= cfg_.rounds; }

  /// Runs one round. Errors are rethrown with round and client context.
  const RoundMetrics& step();
  /// Runs the remaining rounds, calling `on_round` after each.
  void run(const std::function<void(const RoundMetrics&)>& on_round = {});

  model::WeightVector averaged_weights() const;

  /// Round-boundary snapshot ("SPKC" container).
  void save_checkpoint(const std::filesystem::path& path) const;
  static Simulator restore(const std::filesystem::path& path);
  /// As restore, with the data supplied by the caller instead of reloaded.
  static Simulator restore(const std::filesystem::path& path, Workload workload);

 private:
  struct Outgoing;

  std::vector<std::size_t> next_batch(std::size_t client);
  void init_clients();

  RunConfig cfg_;
  Workload work_;
  proj::Projector projector_;
  std::vector<ClientState> clients_;
  std::vector<RoundMetrics> history_;
  std::vector<ClientTrace> trace_;
  Matrix probe_inputs_;
  Matrix probe_targets_;
};

/// Runs `body(i)` for i in [0, count) on up to `workers` threads. The first
/// failing index (lowest i) is rethrown with `context(i)` prefixed.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& body,
                  const std::function<std::string(std::size_t)>& context);

}  // namespace spark::sim
