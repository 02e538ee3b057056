#include <cmath>
#include <numeric>

#include "doctest.h"
#include "spark/errors.hpp"
#include "spark/projection.hpp"
#include "support.hpp"

using namespace spark;
using spark::test::random_matrix;
using spark::test::tiny_arch;

namespace {

model::JacobianBlock random_block(const model::MlpArchitecture& arch, std::size_t n, Rng& rng) {
  model::JacobianBlock jac;
  jac.sample_count = n;
  jac.num_classes = arch.num_classes;
  for (const auto& info : arch.layers()) {
    jac.layer_names.push_back(info.name);
    jac.layers.push_back(random_matrix(static_cast<Eigen::Index>(n * arch.num_classes),
                                       static_cast<Eigen::Index>(info.size()), rng));
  }
  return jac;
}

}  // namespace

TEST_CASE("layer seeds are the leading bytes of SHA-256(le64(seed) || name)") {
  // reference digests from an independent SHA-256 implementation
  CHECK(proj::layer_seed(0, "W1") == 0xb97bcc09629f4af0ULL);
  CHECK(proj::layer_seed(42, "b2") == 0x76f509544b7686b5ULL);
  CHECK(proj::layer_seed(~std::uint64_t{0}, "layer.weight") == 0xc782a19e3f4dc205ULL);
  CHECK(proj::layer_seed(0, "W1") != proj::layer_seed(0, "W2"));
}

TEST_CASE("proportional allocation") {
  SUBCASE("784-100-10 network, k = 1000") {
    model::MlpArchitecture arch;
    const auto spec =
        proj::ProjectionSpec::make(1, 1000, proj::Mode::gaussian, proj::Allocation::proportional, arch.layers());
    CHECK(spec.total_width() == 1000);
    CHECK(spec.total_input_dim() == 79510);
    CHECK(spec.layers[0].width == 986);
    CHECK(spec.layers[1].width == 1);
    CHECK(spec.layers[2].width == 12);
    CHECK(spec.layers[3].width == 1);
    CHECK(proj::payload_reduction(spec) == doctest::Approx(1.0 - 1000.0 / 79510.0));
  }
  SUBCASE("desk network, k = 64") {
    const auto arch = tiny_arch(32, 32, 10);
    std::vector<std::size_t> dims;
    for (const auto& l : arch.layers()) dims.push_back(l.size());
    CHECK(dims == std::vector<std::size_t>{1024, 32, 320, 10});
    CHECK(proj::allocate_widths(64, dims) == std::vector<std::size_t>{47, 1, 15, 1});
  }
  SUBCASE("floor of one per layer") {
    const std::vector<std::size_t> dims{1000, 1, 1, 1};
    CHECK(proj::allocate_widths(4, dims) == std::vector<std::size_t>{1, 1, 1, 1});
    CHECK(proj::allocate_widths(5, dims) == std::vector<std::size_t>{2, 1, 1, 1});
    CHECK_THROWS_AS(proj::allocate_widths(3, dims), ConfigError);
  }
  SUBCASE("always sums to k") {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
      std::vector<std::size_t> dims(1 + rng.below(6));
      for (auto& d : dims) d = 1 + rng.below(500);
      const std::size_t k = dims.size() + rng.below(300);
      const auto w = proj::allocate_widths(k, dims);
      CHECK(std::accumulate(w.begin(), w.end(), std::size_t{0}) == k);
      for (const auto x : w) CHECK(x >= 1);
    }
  }
  SUBCASE("per-layer and identity") {
    const auto arch = tiny_arch();
    const auto pl = proj::ProjectionSpec::make(1, 3, proj::Mode::gaussian, proj::Allocation::per_layer, arch.layers());
    CHECK(pl.total_width() == 12);
    const auto id = proj::ProjectionSpec::make(1, 3, proj::Mode::identity, proj::Allocation::proportional, arch.layers());
    CHECK(id.total_width() == arch.parameter_count());
    CHECK(proj::payload_reduction(id) == 0.0);
  }
}

TEST_CASE("projection entries come from the layer-seeded stream") {
  const auto arch = tiny_arch(6, 5, 3);
  const auto spec = proj::ProjectionSpec::make(9, 8, proj::Mode::gaussian, proj::Allocation::per_layer, arch.layers());
  const Matrix p = proj::generate_projection(spec, "W1", 30, 8);
  Rng rng(proj::layer_seed(9, "W1"));
  Matrix naive(30, 8);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 8; ++j) naive(i, j) = rng.normal() / std::sqrt(8.0);
  CHECK(test::max_abs(p, naive) <= 1e-15);
  CHECK(test::max_abs(p, proj::generate_projection(spec, "W1", 30, 8)) == 0.0);
  CHECK(test::max_abs(p.topRows(5), proj::generate_projection(spec, "W2", 5, 8)) > 0.0);
}

TEST_CASE("entries have variance 1/k, so E[P P^T] = I") {
  const auto arch = tiny_arch(100, 10, 10);
  const auto spec = proj::ProjectionSpec::make(3, 50, proj::Mode::gaussian, proj::Allocation::per_layer, arch.layers());
  const Matrix p = proj::generate_projection(spec, "W1", 1000, 50);
  const double mean = p.mean();
  const double var = (p.array() - mean).square().mean();
  CHECK(std::abs(mean) < 0.01 / std::sqrt(50.0) * 10);
  CHECK(var * 50.0 == doctest::Approx(1.0).epsilon(0.03));
  const Matrix ppt = proj::sketch_operator(p);
  CHECK(ppt.diagonal().mean() == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("sketches preserve norms and inner products (JL)") {
  Rng rng(8);
  const auto arch = tiny_arch(100, 20, 10);
  const auto spec = proj::ProjectionSpec::make(5, 400, proj::Mode::gaussian, proj::Allocation::per_layer, arch.layers());
  const Matrix p = proj::generate_projection(spec, "W1", 2000, 400);
  const Matrix u = random_matrix(20, 2000, rng);
  const Matrix s = u * p;
  for (int i = 0; i < 20; ++i) {
    const double ratio = s.row(i).squaredNorm() / u.row(i).squaredNorm();
    CHECK(ratio > 0.75);
    CHECK(ratio < 1.25);
  }
  // inner products, relative to the norms
  for (int i = 0; i + 1 < 20; ++i) {
    const double exact = u.row(i).dot(u.row(i + 1));
    const double approx = s.row(i).dot(s.row(i + 1));
    CHECK(std::abs(exact - approx) < 0.25 * u.row(i).norm() * u.row(i + 1).norm());
  }
}

TEST_CASE("compress equals the naive per-layer product") {
  Rng rng(12);
  const auto arch = tiny_arch(6, 4, 3);
  const auto spec = proj::ProjectionSpec::make(2, 9, proj::Mode::gaussian, proj::Allocation::proportional, arch.layers());
  const proj::Projector projector(spec);
  const auto jac = random_block(arch, 4, rng);
  const auto cj = projector.compress(jac);
  REQUIRE(cj.layers.size() == 4);
  CHECK(cj.width() == 9);
  CHECK(cj.sample_indices == std::vector<std::uint32_t>{0, 1, 2, 3});
  for (std::size_t l = 0; l < 4; ++l) {
    const Matrix& j = jac.layers[l];
    const Matrix& p = projector.matrix(l);
    Matrix naive = Matrix::Zero(j.rows(), p.cols());
    for (Eigen::Index r = 0; r < j.rows(); ++r)
      for (Eigen::Index m = 0; m < p.cols(); ++m)
        for (Eigen::Index q = 0; q < j.cols(); ++q) naive(r, m) += j(r, q) * p(q, m);
    CHECK(test::max_abs(cj.layers[l], naive) < 1e-12);
    CHECK(cj.layer_dims[l] == arch.layers()[l].size());
  }
}

TEST_CASE("compress is linear") {
  Rng rng(13);
  const auto arch = tiny_arch(5, 3, 2);
  const auto spec = proj::ProjectionSpec::make(2, 6, proj::Mode::gaussian, proj::Allocation::proportional, arch.layers());
  const proj::Projector projector(spec);
  const auto a = random_block(arch, 3, rng);
  const auto b = random_block(arch, 3, rng);
  auto mix = a;
  for (std::size_t l = 0; l < 4; ++l) mix.layers[l] = 2.0 * a.layers[l] - 0.5 * b.layers[l];
  const auto ca = projector.compress(a), cb = projector.compress(b), cm = projector.compress(mix);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(test::max_abs(cm.layers[l], 2.0 * ca.layers[l] - 0.5 * cb.layers[l]) < 1e-12);
  }
}

TEST_CASE("back-projection applies P, and identity mode is a no-op") {
  Rng rng(14);
  const auto arch = tiny_arch(5, 3, 2);
  const auto spec = proj::ProjectionSpec::make(2, 6, proj::Mode::gaussian, proj::Allocation::proportional, arch.layers());
  const proj::Projector projector(spec);
  std::vector<Vector> delta;
  for (const auto& l : spec.layers) delta.push_back(Vector::Random(static_cast<Eigen::Index>(l.width)));
  const auto back = projector.back_project(delta);
  const Vector flat = projector.back_project_flat(delta);
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK((back[l] - projector.matrix(l) * delta[l]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((flat.segment(off, back[l].size()) - back[l]).cwiseAbs().maxCoeff() == 0.0);
    off += back[l].size();
  }
  CHECK(static_cast<std::size_t>(flat.size()) == arch.parameter_count());
  delta.pop_back();
  CHECK_THROWS_AS(projector.back_project(delta), ConfigError);

  const auto id = proj::ProjectionSpec::make(2, 6, proj::Mode::identity, proj::Allocation::proportional, arch.layers());
  const proj::Projector ident(id);
  const auto jac = random_block(arch, 2, rng);
  const auto cj = ident.compress(jac);
  for (std::size_t l = 0; l < 4; ++l) CHECK(test::max_abs(cj.layers[l], jac.layers[l]) == 0.0);
}

TEST_CASE("orthogonal projector is idempotent; P P^T is not") {
  Rng rng(15);
  const Matrix p = random_matrix(20, 5, rng, 1.0 / std::sqrt(5.0));
  const Matrix q = proj::orthogonal_projector(p);
  CHECK(test::max_abs(q * q, q) < 1e-10);
  CHECK(q.trace() == doctest::Approx(5.0));
  const Matrix s = proj::sketch_operator(p);
  CHECK(test::max_abs(s * s, s) > 1e-3);
}

TEST_CASE("row sampling keeps Jacobian and logit rows aligned") {
  Rng rng(16);
  const auto arch = tiny_arch(4, 3, 3);
  const auto jac = random_block(arch, 10, rng);
  const Matrix logits = random_matrix(10, 3, rng);
  const auto s = proj::sample_rows(jac, logits, 0.35, 77);
  REQUIRE(s.indices.size() == 4);  // ceil(3.5)
  CHECK(s.jacobian.sample_count == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto src = s.indices[i];
    CHECK(test::max_abs(s.logits.row(static_cast<Eigen::Index>(i)), logits.row(src)) == 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(test::max_abs(s.jacobian.layers[0].row(static_cast<Eigen::Index>(i * 3 + c)),
                          jac.layers[0].row(static_cast<Eigen::Index>(src * 3 + c))) == 0.0);
    }
  }
  CHECK(proj::choose_rows(10, 1.0, 1).size() == 10);
  CHECK(proj::choose_rows(10, 0.3, 1).size() == 3);  // no round-up from 3.0000000000000004
  CHECK(proj::choose_rows(10, 0.35, 77) == proj::choose_rows(10, 0.35, 77));
  CHECK_THROWS_AS(proj::choose_rows(10, 0.0, 1), ContractViolation);
  CHECK_THROWS_AS(proj::choose_rows(10, 1.5, 1), ContractViolation);
  CHECK_THROWS_AS(proj::choose_rows(0, 0.5, 1), ContractViolation);
}

TEST_CASE("take_rows of a sketch equals sketching the sampled rows") {
  Rng rng(18);
  const auto arch = tiny_arch(4, 3, 3);
  const auto spec = proj::ProjectionSpec::make(2, 7, proj::Mode::gaussian, proj::Allocation::proportional, arch.layers());
  const proj::Projector projector(spec);
  const auto jac = random_block(arch, 8, rng);
  const auto s = proj::sample_rows(jac, random_matrix(8, 3, rng), 0.5, 5);
  std::vector<std::size_t> rows(s.indices.begin(), s.indices.end());
  const auto a = proj::take_rows(projector.compress(jac), rows);
  const auto b = projector.compress(s.jacobian);
  CHECK(a.sample_indices == s.indices);
  for (std::size_t l = 0; l < 4; ++l) CHECK(test::max_abs(a.layers[l], b.layers[l]) < 1e-12);
  const std::vector<std::size_t> bad{3, 1};
  CHECK_THROWS_AS(proj::take_rows(projector.compress(jac), bad), ContractViolation);
}

TEST_CASE("string round trips") {
  for (const auto c : {proj::Codec::f64, proj::Codec::f32, proj::Codec::f16, proj::Codec::i8}) {
    CHECK(proj::parse_codec(proj::to_string(c)) == c);
  }
  CHECK(proj::bytes_per_entry(proj::Codec::f16) == 2);
  CHECK(proj::parse_mode("identity") == proj::Mode::identity);
  CHECK(proj::parse_allocation("per_layer") == proj::Allocation::per_layer);
  CHECK_THROWS_AS(proj::parse_codec("bf16"), ConfigError);
  CHECK_THROWS_AS(proj::parse_mode("srht"), ConfigError);
}
