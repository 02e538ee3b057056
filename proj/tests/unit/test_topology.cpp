#include <set>
#include <sstream>

#include "doctest.h"
#include "spark/errors.hpp"
#include "spark/rng.hpp"
#include "spark/topology.hpp"

using namespace spark;

namespace {

void check_regular_simple(const topo::RoundGraph& g, std::size_t degree) {
  for (std::size_t u = 0; u < g.client_count(); ++u) {
    const auto& n = g.adjacency[u];
    REQUIRE(n.size() == degree);
    REQUIRE(std::set<ClientId>(n.begin(), n.end()).size() == degree);
    for (const auto v : n) {
      REQUIRE(v != u);
      const auto& back = g.adjacency[v];
      REQUIRE(std::find(back.begin(), back.end(), static_cast<ClientId>(u)) != back.end());
    }
  }
  CHECK(g.edge_count() * 2 == g.client_count() * degree);
}

}  // namespace

TEST_CASE("random regular graphs are regular, symmetric and simple") {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    std::size_t m = 2 + rng.below(60);
    std::size_t k = rng.below(std::min<std::size_t>(m, 12));
    if ((m * k) % 2 == 1) ++m;
    const auto g = topo::generate(m, k, rng.below(100), rng.next());
    check_regular_simple(g, k);
  }
}

TEST_CASE("dense cases that the pairing model rarely hits directly") {
  check_regular_simple(topo::generate(6, 5, 0, 1), 5);  // complete graph
  check_regular_simple(topo::generate(10, 8, 3, 2), 8);
  check_regular_simple(topo::generate(300, 5, 0, 3), 5);
}

TEST_CASE("graphs are deterministic in (seed, round) and differ across rounds") {
  const auto a = topo::generate(16, 3, 4, 99);
  const auto b = topo::generate(16, 3, 4, 99);
  CHECK(a.adjacency == b.adjacency);
  CHECK(topo::generate(16, 3, 5, 99).adjacency != a.adjacency);
  CHECK(topo::generate(16, 3, 4, 98).adjacency != a.adjacency);
}

TEST_CASE("invalid shapes are configuration errors") {
  CHECK_THROWS_AS(topo::generate(5, 3, 0, 1), ConfigError);  // odd stub count
  CHECK_THROWS_AS(topo::generate(4, 4, 0, 1), ConfigError);
  CHECK_THROWS_AS(topo::generate(0, 0, 0, 1), ConfigError);
  const auto g = topo::generate(4, 0, 0, 1);
  CHECK(g.edge_count() == 0);
  CHECK(g.component_count() == 4);
  CHECK_THROWS_AS(topo::neighbors(g, 4), ContractViolation);
}

TEST_CASE("components and edge list") {
  topo::RoundGraph g;
  g.adjacency = {{1}, {0}, {3}, {2}};
  CHECK(g.component_count() == 2);
  CHECK_FALSE(g.connected());
  std::ostringstream os;
  g.write_edge_list(os);
  CHECK(os.str() == "0 1\n2 3\n");
  CHECK(topo::generate(20, 4, 0, 5).connected());
}
