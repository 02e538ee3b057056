#include "spark/topology.hpp"

#include <algorithm>
#include <set>
#include <string>
#include <utility>

#include "spark/errors.hpp"
#include "spark/rng.hpp"

namespace spark::topo {

std::size_t RoundGraph::edge_count() const noexcept {
  std::size_t twice = 0;
  for (const auto& n : adjacency) twice += n.size();
  return twice / 2;
}

std::size_t RoundGraph::component_count() const {
  std::vector<bool> seen(adjacency.size(), false);
  std::size_t components = 0;
  std::vector<ClientId> stack;
  for (std::size_t start = 0; start < adjacency.size(); ++start) {
    if (seen[start]) continue;
    ++components;
    seen[start] = true;
    stack.push_back(static_cast<ClientId>(start));
    while (!stack.empty()) {
      const ClientId u = stack.back();
      stack.pop_back();
      for (const ClientId v : adjacency[u]) {
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
      }
    }
  }
  return components;
}

void RoundGraph::write_edge_list(std::ostream& os) const {
  for (std::size_t u = 0; u < adjacency.size(); ++u) {
    for (const ClientId v : adjacency[u]) {
      if (u < v) os << u << ' ' << v << '\n';
    }
  }
}

namespace {

using Edge = std::pair<ClientId, ClientId>;

Edge ordered(ClientId a, ClientId b) { return a < b ? Edge{a, b} : Edge{b, a}; }

// Pairs consecutive stubs; returns the number of bad pairs (loops or repeats).
std::size_t pair_stubs(const std::vector<ClientId>& stubs, std::vector<Edge>& edges) {
  edges.clear();
  std::set<Edge> seen;
  std::size_t bad = 0;
  for (std::size_t i = 0; i + 1 < stubs.size(); i += 2) {
    const Edge e = ordered(stubs[i], stubs[i + 1]);
    if (e.first == e.second || !seen.insert(e).second) ++bad;
    edges.push_back(e);
  }
  return bad;
}

// Double-edge swaps until every edge is simple. Degrees are preserved.
bool repair(std::vector<Edge>& edges, Rng& rng) {
  const std::size_t max_swaps = 1000 * (edges.size() + 1);
  std::multiset<Edge> multi(edges.begin(), edges.end());
  const auto is_bad = [&](const Edge& e) { return e.first == e.second || multi.count(e) > 1; };

  for (std::size_t attempt = 0; attempt < max_swaps; ++attempt) {
    std::size_t bad_index = edges.size();
    for (std::size_t i = 0; i < edges.size(); ++i) {
      if (is_bad(edges[i])) {
        bad_index = i;
        break;
      }
    }
    if (bad_index == edges.size()) return true;

    const auto other = static_cast<std::size_t>(rng.below(edges.size()));
    if (other == bad_index) continue;
    const auto [a, b] = edges[bad_index];
    const auto [c, d] = edges[other];
    // Rewire (a,b),(c,d) -> (a,c),(b,d) or (a,d),(b,c).
    const bool flip = rng.below(2) == 1;
    const Edge e1 = flip ? ordered(a, d) : ordered(a, c);
    const Edge e2 = flip ? ordered(b, c) : ordered(b, d);
    if (e1.first == e1.second || e2.first == e2.second || e1 == e2) continue;
    if (multi.count(e1) > 0 || multi.count(e2) > 0) continue;
    multi.erase(multi.find(edges[bad_index]));
    multi.erase(multi.find(edges[other]));
    multi.insert(e1);
    multi.insert(e2);
    edges[bad_index] = e1;
    edges[other] = e2;
  }
  return false;
}

}  // namespace

RoundGraph generate(std::size_t clients, std::size_t degree, std::size_t round, std::uint64_t base_seed) {
  if (clients == 0) throw ConfigError("graph needs at least one client");
  if (degree > 0 && degree >= clients) {
    throw ConfigError("degree " + std::to_string(degree) + " must be < client count " + std::to_string(clients));
  }
  if ((clients * degree) % 2 != 0) {
    throw ConfigError("no " + std::to_string(degree) + "-regular graph on " + std::to_string(clients) +
                      " vertices: clients * degree is odd");
  }

  RoundGraph g;
  g.round = round;
  g.degree = degree;
  g.seed = base_seed;
  g.adjacency.assign(clients, {});
  if (degree == 0) return g;

  // Pairing rarely yields a simple graph when the degree is close to M - 1;
  // build the sparse complement instead.
  if (2 * degree > clients - 1) {
    const auto comp = generate(clients, clients - 1 - degree, round, base_seed);
    for (std::size_t v = 0; v < clients; ++v) {
      const auto& skip = comp.adjacency[v];
      for (std::size_t u = 0; u < clients; ++u) {
        if (u != v && !std::binary_search(skip.begin(), skip.end(), static_cast<ClientId>(u))) {
          g.adjacency[v].push_back(static_cast<ClientId>(u));
        }
      }
    }
    return g;
  }

  Rng rng(derive_seed(base_seed, {tag("topology"), round}));
  std::vector<ClientId> stubs;
  stubs.reserve(clients * degree);
  for (std::size_t v = 0; v < clients; ++v) {
    for (std::size_t s = 0; s < degree; ++s) stubs.push_back(static_cast<ClientId>(v));
  }

  constexpr int kRetries = 64;
  std::vector<Edge> edges;
  bool simple = false;
  for (int attempt = 0; attempt < kRetries && !simple; ++attempt) {
    rng.shuffle(std::span<ClientId>(stubs));
    simple = pair_stubs(stubs, edges) == 0;
  }
  if (!simple && !repair(edges, rng)) {
    throw Error("failed to build a simple " + std::to_string(degree) + "-regular graph on " +
                std::to_string(clients) + " vertices");
  }
  for (const auto& [u, v] : edges) {
    g.adjacency[u].push_back(v);
    g.adjacency[v].push_back(u);
  }
  for (auto& n : g.adjacency) std::sort(n.begin(), n.end());
  return g;
}

const std::vector<ClientId>& neighbors(const RoundGraph& g, ClientId i) {
  if (i >= g.adjacency.size()) {
    throw ContractViolation("client " + std::to_string(i) + " is not in the graph (" +
                            std::to_string(g.adjacency.size()) + " clients)");
  }
  return g.adjacency[i];
}

}  // namespace spark::topo
