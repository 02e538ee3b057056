#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "spark/types.hpp"

namespace spark::topo {

/// Simple undirected kappa-regular graph for one round.
struct RoundGraph {
  std::size_t round = 0;
  std::size_t degree = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<ClientId>> adjacency;  // sorted ascending

  std::size_t client_count() const noexcept { return adjacency.size(); }
  std::size_t edge_count() const noexcept;
  std::size_t component_count() const;
  bool connected() const { return component_count() <= 1; }
  /// One "u v" line per undirected edge, u < v.
  void write_edge_list(std::ostream& os) const;
};

/// Random kappa-regular simple graph via the pairing model: stubs are shuffled
/// and paired; attempts containing self-loops or multi-edges are retried a
/// bounded number of times, then repaired with double-edge swaps.
/// Deterministic in (clients, degree, round, base_seed).
RoundGraph generate(std::size_t clients, std::size_t degree, std::size_t round, std::uint64_t base_seed);

/// Sorted neighbor ids of client i.
const std::vector<ClientId>& neighbors(const RoundGraph& g, ClientId i);

}  // namespace spark::topo
