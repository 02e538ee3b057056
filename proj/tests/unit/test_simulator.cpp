#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracle.hpp"
#include "spark/errors.hpp"
#include "spark/simulator.hpp"
#include "spark/wire.hpp"

using namespace spark;
namespace fs = std::filesystem;

namespace {

sim::RunConfig small_config() {
  sim::RunConfig c;
  c.arch = {6, 5, 3};
  c.clients = 6;
  c.degree = 2;
  c.rounds = 3;
  c.batch_size = 4;
  c.eta = 0.01;
  c.t_evolve = 5;
  c.synth_per_class = 20;
  c.synth_test_per_class = 5;
  c.dirichlet_alpha = 0.5;
  c.projection_k = 12;
  c.seed = 21;
  return c;
}

void check_same_state(const sim::Simulator& a, const sim::Simulator& b) {
  REQUIRE(a.rounds_done() == b.rounds_done());
  for (std::size_t i = 0; i < a.clients().size(); ++i) {
    CHECK((a.clients()[i].weights.values() - b.clients()[i].weights.values()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.clients()[i].momentum.velocity - b.clients()[i].momentum.velocity).cwiseAbs().maxCoeff() == 0.0);
  }
  for (std::size_t r = 0; r < a.rounds_done(); ++r) {
    CHECK(a.history()[r].agg_accuracy == b.history()[r].agg_accuracy);
    CHECK(a.history()[r].bytes_sent == b.history()[r].bytes_sent);
    CHECK(a.history()[r].mean_t_star == b.history()[r].mean_t_star);
  }
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("spark_sim_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("zero rounds produce an empty history") {
  auto c = small_config();
  c.rounds = 0;
  sim::Simulator s(c);
  s.run();
  CHECK(s.history().empty());
  CHECK(s.finished());
  CHECK_THROWS_AS(s.step(), ContractViolation);
}

TEST_CASE("bytes are message size times degree") {
  for (const auto codec : {proj::Codec::f32, proj::Codec::f16, proj::Codec::i8}) {
    auto c = small_config();
    c.codec = codec;
    sim::Simulator s(c);
    const auto& met = s.step();
    CHECK(met.messages == c.clients * c.degree);
    CHECK(met.components >= 1);

    // Every shard holds at least batch_size samples here, so all messages match.
    const auto& spec = s.projection();
    proj::CompressedJacobian cj;
    cj.sample_count = c.batch_size;
    cj.num_classes = c.arch.num_classes;
    for (const auto& l : spec.layers) {
      cj.layer_names.push_back(l.name);
      cj.layer_dims.push_back(l.input_dim);
      cj.layers.push_back(Matrix::Zero(static_cast<Eigen::Index>(c.batch_size * c.arch.num_classes),
                                       static_cast<Eigen::Index>(l.width)));
    }
    cj.sample_indices.assign(c.batch_size, 0);
    const auto message = proj::frame_bytes(cj, codec) + proj::logits_bytes(c.batch_size, c.arch.num_classes, codec);
    std::uint64_t total = 0;
    for (const auto b : met.client_bytes) {
      CHECK(b == message * c.degree);
      total += b;
    }
    CHECK(met.bytes_sent == total);
  }
}

TEST_CASE("runs are reproducible and independent of the worker count") {
  auto c = small_config();
  sim::Simulator a(c);
  a.run();
  c.workers = 3;
  sim::Simulator b(c);
  b.run();
  check_same_state(a, b);
  c.seed = 22;
  sim::Simulator other(c);
  other.run();
  CHECK(other.history().back().agg_loss != a.history().back().agg_loss);
}

TEST_CASE("checkpoint resume matches a straight run") {
  auto c = small_config();
  c.rounds = 4;
  sim::Simulator straight(c);
  straight.run();

  sim::Simulator first(c);
  first.step();
  first.step();
  const auto path = temp_file("resume.spkc");
  first.save_checkpoint(path);
  auto resumed = sim::Simulator::restore(path);
  CHECK(resumed.rounds_done() == 2);
  resumed.run();
  check_same_state(straight, resumed);

  auto with_data = sim::Simulator::restore(path, sim::load_workload(c));
  with_data.run();
  check_same_state(straight, with_data);
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto c = small_config();
  sim::Simulator s(c);
  s.step();
  const auto path = temp_file("corrupt.spkc");
  s.save_checkpoint(path);
  std::vector<char> bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  const auto write = [&](const std::vector<char>& b) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto bad = bytes;
  bad[0] = 'X';
  write(bad);
  CHECK_THROWS_AS(sim::Simulator::restore(path), CheckpointError);
  bad = bytes;
  bad[bad.size() / 2] ^= 0x40;
  write(bad);
  CHECK_THROWS_AS(sim::Simulator::restore(path), CheckpointError);
  bad = bytes;
  bad.resize(bad.size() - 3);
  write(bad);
  CHECK_THROWS_AS(sim::Simulator::restore(path), CheckpointError);
  fs::remove(path);
  CHECK_THROWS_AS(sim::Simulator::restore(path), CheckpointError);
}

TEST_CASE("distillation changes the update after warm-up") {
  auto c = small_config();
  c.warm_forever = true;
  sim::Simulator warm(c);
  c.warm_forever = false;
  sim::Simulator distilled(c);
  warm.step();
  distilled.step();
  check_same_state(warm, distilled);  // round 1 is warm-up in both
  warm.step();
  distilled.step();
  CHECK((warm.clients()[0].weights.values() - distilled.clients()[0].weights.values()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("identity projection equals the direct uncompressed update") {
  auto c = small_config();
  c.projection_mode = proj::Mode::identity;
  c.warm_forever = true;
  c.momentum_enabled = false;
  c.val_fraction = 0.0;
  c.codec = proj::Codec::f64;
  c.eta = 0.05;
  c.t_evolve = 8;
  sim::Simulator s(c);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<model::WeightVector> before;
    for (const auto& st : s.clients()) before.push_back(st.weights);
    s.step();
    std::vector<std::vector<std::size_t>> batches;
    for (const auto& tr : s.last_trace()) batches.push_back(tr.batch);
    const auto oracle = test::direct_round(c, s.workload(), before, batches, r);
    REQUIRE_FALSE(oracle.diverged);
    for (std::size_t i = 0; i < c.clients; ++i) {
      const Vector& delta = oracle.deltas[i];
      const double scale = std::max(1.0, delta.cwiseAbs().maxCoeff());
      CHECK((s.last_trace()[i].delta - delta).cwiseAbs().maxCoeff() <= 1e-9 * scale);
      const Vector moved = s.clients()[i].weights.values() - before[i].values();
      CHECK((moved - delta).cwiseAbs().maxCoeff() <= 1e-9 * scale);
    }
  }
}

TEST_CASE("mu = 0 is bitwise equal to momentum disabled") {
  auto c = small_config();
  c.mu = 0.0;
  sim::Simulator zero(c);
  zero.run();
  c.mu = 0.9;
  c.momentum_enabled = false;
  sim::Simulator off(c);
  off.run();
  for (std::size_t i = 0; i < c.clients; ++i) {
    CHECK((zero.clients()[i].weights.values().array() == off.clients()[i].weights.values().array()).all());
  }
}

TEST_CASE("gaussian sketches send fewer bytes than identity") {
  auto c = small_config();
  sim::Simulator g(c);
  c.projection_mode = proj::Mode::identity;
  sim::Simulator id(c);
  CHECK(g.step().bytes_sent < id.step().bytes_sent);
}

TEST_CASE("parallel_for rethrows the lowest failing index with context") {
  try {
    sim::parallel_for(
        10, 4,
        [](std::size_t i) {
          if (i == 3 || i == 7) throw ConfigError("boom " + std::to_string(i));
        },
        [](std::size_t i) { return "item " + std::to_string(i); });
    FAIL("expected an exception");
  } catch (const Error& e) {
    const std::string what = e.what();
    CHECK(what.find("item 3") != std::string::npos);
    CHECK(what.find("boom 3") != std::string::npos);
  }
}
