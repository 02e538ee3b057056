#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "spark/errors.hpp"
#include "spark/kernel.hpp"
#include "spark/model.hpp"
#include "support.hpp"

using namespace spark;
using namespace spark::kernel;
using spark::test::max_abs;
using spark::test::random_matrix;

namespace {

PeerBatch make_batch(ClientId owner, std::size_t n, std::size_t classes, std::vector<Eigen::Index> widths, Rng& rng) {
  PeerBatch b;
  auto& s = b.sketch;
  s.owner = owner;
  s.sample_count = n;
  s.num_classes = classes;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    s.layer_names.push_back("L" + std::to_string(l));
    s.layer_dims.push_back(100 + l);
    s.layers.push_back(random_matrix(static_cast<Eigen::Index>(n * classes), widths[l], rng));
  }
  for (std::size_t i = 0; i < n; ++i) {
    s.sample_indices.push_back(static_cast<std::uint32_t>(10 * owner + i));
    b.labels.push_back(static_cast<int>(rng.below(classes)));
  }
  b.logits = random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes), rng);
  return b;
}

AggregatedSketch random_agg(Rng& rng, std::size_t classes = 3, double val_fraction = 0.0) {
  const auto self = make_batch(0, 4, classes, {3, 2}, rng);
  const std::vector<PeerBatch> nb{make_batch(2, 3, classes, {3, 2}, rng), make_batch(1, 2, classes, {3, 2}, rng)};
  auto agg = aggregate(self, nb);
  if (val_fraction > 0.0) split_validation(agg, val_fraction, 5);
  return agg;
}

// K[(n,c),(n',c')] = sum_l sum_m J_l[n,c,m] J_l[n',c',m] by explicit loops.
Matrix naive_kernel(const AggregatedSketch& agg, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const auto C = static_cast<Eigen::Index>(agg.num_classes);
  Matrix k = Matrix::Zero(static_cast<Eigen::Index>(a.size()) * C, static_cast<Eigen::Index>(b.size()) * C);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index c = 0; c < C; ++c)
      for (std::size_t j = 0; j < b.size(); ++j)
        for (Eigen::Index d = 0; d < C; ++d) {
          double s = 0.0;
          for (const auto& layer : agg.layers)
            for (Eigen::Index m = 0; m < layer.cols(); ++m)
              s += layer(static_cast<Eigen::Index>(a[i]) * C + c, m) * layer(static_cast<Eigen::Index>(b[j]) * C + d, m);
          k(static_cast<Eigen::Index>(i) * C + c, static_cast<Eigen::Index>(j) * C + d) = s;
        }
  return k;
}

Vector flat(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

TEST_CASE("aggregation stacks self first, then neighbors by id") {
  Rng rng(1);
  const auto self = make_batch(3, 2, 2, {4}, rng);
  const auto n5 = make_batch(5, 1, 2, {4}, rng);
  const auto n1 = make_batch(1, 3, 2, {4}, rng);
  const std::vector<PeerBatch> order_a{n5, n1}, order_b{n1, n5};
  const auto a = aggregate(self, order_a);
  const auto b = aggregate(self, order_b);
  REQUIRE(a.sample_count() == 6);
  CHECK(a.own_count == 2);
  CHECK(a.provenance[0] == RowOrigin{3, 30});
  CHECK(a.provenance[2] == RowOrigin{1, 10});
  CHECK(a.provenance[5] == RowOrigin{5, 50});
  CHECK(a.provenance == b.provenance);
  CHECK(max_abs(a.layers[0], b.layers[0]) == 0.0);
  CHECK(max_abs(a.logits, b.logits) == 0.0);
  CHECK(a.labels == b.labels);
  CHECK(max_abs(a.layers[0].middleRows(4, 6), n1.sketch.layers[0]) == 0.0);
  CHECK(a.train_rows.size() == 6);
  CHECK(a.val_rows.empty());

  const auto alone = aggregate(self, {});
  CHECK(max_abs(alone.layers[0], self.sketch.layers[0]) == 0.0);
}

TEST_CASE("aggregation rejects mismatched layouts") {
  Rng rng(2);
  const auto self = make_batch(0, 2, 2, {4, 2}, rng);
  std::vector<PeerBatch> wide{make_batch(1, 2, 2, {5, 2}, rng)};
  CHECK_THROWS_AS(aggregate(self, wide), ProtocolError);
  std::vector<PeerBatch> renamed{make_batch(1, 2, 2, {4, 2}, rng)};
  renamed[0].sketch.layer_names[1] = "other";
  CHECK_THROWS_AS(aggregate(self, renamed), ProtocolError);
  std::vector<PeerBatch> short_labels{make_batch(1, 2, 2, {4, 2}, rng)};
  short_labels[0].labels.pop_back();
  CHECK_THROWS_AS(aggregate(self, short_labels), ProtocolError);
}

TEST_CASE("validation rows come from the evolving client only") {
  Rng rng(3);
  auto agg = random_agg(rng, 3, 0.5);
  CHECK(agg.val_rows.size() == 2);
  for (const auto v : agg.val_rows) CHECK(v < agg.own_count);
  CHECK(agg.train_rows.size() + agg.val_rows.size() == agg.sample_count());
  std::vector<std::size_t> all = agg.train_rows;
  all.insert(all.end(), agg.val_rows.begin(), agg.val_rows.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

  auto tiny = random_agg(rng);
  split_validation(tiny, 0.1, 1);  // round(0.4) = 0 but a fraction > 0 keeps one
  CHECK(tiny.val_rows.size() == 1);
  auto none = random_agg(rng);
  split_validation(none, 0.0, 1);
  CHECK(none.val_rows.empty());
  CHECK_THROWS_AS(split_validation(none, 1.0, 1), ConfigError);
}

TEST_CASE("kernel hand examples") {
  AggregatedSketch agg;
  agg.num_classes = 1;
  agg.layer_names = {"L"};
  Matrix j(2, 2);
  j << 1, 0, 0, 2;
  agg.layers = {j};
  agg.provenance = {{0, 0}, {0, 1}};
  agg.train_rows = {0, 1};
  const auto k = build_kernel(agg, kDefaultKernelCapBytes, KernelForm::dense);
  Matrix expected(2, 2);
  expected << 1, 0, 0, 4;
  CHECK(max_abs(k.train, expected) == 0.0);

  // orthonormal rows give the identity
  Rng rng(4);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(random_matrix(6, 6, rng)));
  const Matrix q = qr.householderQ();
  agg.layers = {q.topRows(4)};
  agg.provenance.assign(4, {0, 0});
  agg.train_rows = {0, 1, 2, 3};
  CHECK(max_abs(build_kernel(agg).dense_train(), Matrix::Identity(4, 4)) < 1e-14);
}

TEST_CASE("kernel equals the naive double loop, in both forms") {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    auto agg = random_agg(rng, 2 + static_cast<std::size_t>(t % 3), 0.5);
    const auto naive_train = naive_kernel(agg, agg.train_rows, agg.train_rows);
    const auto naive_cross = naive_kernel(agg, agg.val_rows, agg.train_rows);
    const auto dense = build_kernel(agg, kDefaultKernelCapBytes, KernelForm::dense);
    const auto fact = build_kernel(agg, kDefaultKernelCapBytes, KernelForm::factored);
    CHECK_FALSE(dense.factored);
    CHECK(fact.factored);
    CHECK(max_abs(dense.train, naive_train) <= 1e-12);
    CHECK(max_abs(dense.cross, naive_cross) <= 1e-12);
    CHECK(max_abs(fact.dense_train(), naive_train) <= 1e-12);
    const Vector r = Vector::Random(naive_train.rows());
    CHECK((dense.apply_train(r) - naive_train * r).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((fact.apply_train(r) - naive_train * r).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((fact.apply_cross(r) - naive_cross * r).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((dense.apply_cross(r) - naive_cross * r).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("kernel is symmetric positive semidefinite") {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto agg = random_agg(rng, 3);
    const Matrix k = build_kernel(agg, kDefaultKernelCapBytes, KernelForm::dense).train;
    CHECK(max_abs(k, k.transpose()) <= 1e-10);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8 * k.trace());
  }
}

TEST_CASE("automatic form and the memory cap") {
  Rng rng(7);
  const auto agg = random_agg(rng, 3);  // 27 rows, width 5
  CHECK(build_kernel(agg).factored);
  CHECK_THROWS_AS(build_kernel(agg, 100, KernelForm::dense), ResourceError);
  CHECK_THROWS_AS(build_kernel(agg, 100, KernelForm::factored), ResourceError);
  CHECK_NOTHROW(build_kernel(agg, 8 * 27 * 27, KernelForm::dense));
}

TEST_CASE("a fixed point does not move") {
  Rng rng(8);
  auto agg = random_agg(rng, 3, 0.5);
  const auto k = build_kernel(agg);
  const Matrix f0 = agg.gather_logits(agg.train_rows);
  const Matrix g0 = agg.gather_logits(agg.val_rows);
  const auto res = evolve(k, f0, g0, model::softmax_rows(f0), agg.gather_labels(agg.val_rows), {0.1, 15, true});
  CHECK(res.steps_taken == 15);
  for (const auto& f : res.train_trajectory) CHECK(max_abs(f, f0) < 1e-14);
  CHECK(res.residual_sum.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(res.t_star == 1);  // constant validation loss, ties to the smallest t
}

TEST_CASE("K = I, two classes: scalar recurrence by hand") {
  KernelMatrix k;
  k.train = Matrix::Identity(2, 2);
  k.cross = Matrix::Zero(0, 2);
  Matrix f0(1, 2);
  f0 << 0.3, -0.2;
  Matrix y(1, 2);
  y << 1, 0;
  const double eta = 0.5;
  const auto res = evolve(k, f0, Matrix(0, 2), y, {}, {eta, 6, true});
  double a = 0.3, b = -0.2, sum_a = 0.0, sum_b = 0.0;
  for (int t = 1; t <= 6; ++t) {
    const double pa = 1.0 / (1.0 + std::exp(b - a));
    sum_a += pa;
    sum_b += 1.0 - pa;
    a += eta * (1.0 - pa);
    b += eta * (0.0 - (1.0 - pa));
    CHECK(res.train_trajectory[static_cast<std::size_t>(t)](0, 0) == doctest::Approx(a).epsilon(1e-14));
    CHECK(res.train_trajectory[static_cast<std::size_t>(t)](0, 1) == doctest::Approx(b).epsilon(1e-14));
  }
  CHECK(res.t_star == 6);  // no validation rows: last step
  CHECK(res.residual_sum(0, 0) == doctest::Approx(sum_a - 6.0));
  CHECK(res.residual_sum(0, 1) == doctest::Approx(sum_b));
}

TEST_CASE("iterative recurrence equals the unrolled sum") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    auto agg = random_agg(rng, 3, 0.5);
    const auto k = build_kernel(agg, kDefaultKernelCapBytes, t % 2 ? KernelForm::dense : KernelForm::factored);
    const Matrix f0 = agg.gather_logits(agg.train_rows);
    const Matrix g0 = agg.gather_logits(agg.val_rows);
    const Matrix y = model::one_hot(agg.gather_labels(agg.train_rows), 3);
    const double eta = 0.01;
    const auto res = evolve(k, f0, g0, y, agg.gather_labels(agg.val_rows), {eta, 20, true});
    REQUIRE(res.steps_taken == 20);
    const Matrix kd = k.dense_train();
    const Matrix kc = naive_kernel(agg, agg.val_rows, agg.train_rows);
    Vector sum = Vector::Zero(f0.size());
    for (std::size_t s = 0; s < 20; ++s) {
      sum += flat(model::softmax_rows(res.train_trajectory[s]));
      const double steps = static_cast<double>(s + 1);
      const Vector unrolled = flat(f0) + eta * kd * (steps * flat(y) - sum);
      const Vector unrolled_val = flat(g0) + eta * kc * (steps * flat(y) - sum);
      CHECK((unrolled - flat(res.train_trajectory[s + 1])).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK((unrolled_val - flat(res.val_trajectory[s + 1])).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("t* minimizes validation loss; trajectory storage does not change it") {
  Rng rng(10);
  auto agg = random_agg(rng, 3, 0.5);
  const auto k = build_kernel(agg);
  const Matrix f0 = agg.gather_logits(agg.train_rows);
  const Matrix g0 = agg.gather_logits(agg.val_rows);
  const Matrix y = model::one_hot(agg.gather_labels(agg.train_rows), 3);
  const auto labels = agg.gather_labels(agg.val_rows);
  const auto res = evolve(k, f0, g0, y, labels, {0.05, 40, true});
  const auto best = std::min_element(res.val_loss.begin(), res.val_loss.end());
  CHECK(res.t_star == static_cast<std::size_t>(best - res.val_loss.begin()) + 1);
  for (std::size_t t = 0; t < res.val_loss.size(); ++t) {
    CHECK(res.val_loss[t] == doctest::Approx(model::cross_entropy(res.val_trajectory[t + 1], labels)));
  }
  const auto lean = evolve(k, f0, g0, y, labels, {0.05, 40, false});
  CHECK(lean.train_trajectory.empty());
  CHECK(lean.t_star == res.t_star);
  CHECK(max_abs(lean.residual_sum, res.residual_sum) == 0.0);
}

TEST_CASE("divergence guard truncates the trajectory") {
  // One sample, two classes, K = c [[1, -1], [-1, 1]] and a 50/50 target:
  // f_1 <- f_1 + 2 eta c (0.5 - sigmoid(2 f_1)) with f_2 = -f_1. With
  // 2 eta c = 4e6 and f_1 = 0.25 the first step lands near -4.9e5, the second
  // near +1.5e6, past the 1e6 bound.
  KernelMatrix k;
  k.train.resize(2, 2);
  k.train << 2e6, -2e6, -2e6, 2e6;
  k.cross = Matrix::Zero(0, 2);
  Matrix f0(1, 2);
  f0 << 0.25, -0.25;
  Matrix y(1, 2);
  y << 0.5, 0.5;
  const auto res = evolve(k, f0, Matrix(0, 2), y, {}, {1.0, 10, true});
  CHECK(res.truncated);
  CHECK(res.steps_taken == 1);
  CHECK(res.t_star == 1);
  REQUIRE(res.train_trajectory.size() == 2);
  const double s = 1.0 / (1.0 + std::exp(-0.5));
  CHECK(res.train_trajectory[1](0, 0) == doctest::Approx(0.25 + 4e6 * (0.5 - s)));

  Matrix hard(1, 2);
  hard << 1, 0;
  KernelMatrix big;
  big.train = Matrix::Identity(2, 2) * 1e5;
  big.cross = Matrix::Zero(0, 2);
  // first step moves f by eta * 1e5 * 0.5 = 5e6
  CHECK_THROWS_AS(evolve(big, Matrix::Zero(1, 2), Matrix(0, 2), hard, {}, {100.0, 10, false}), DivergenceError);
  CHECK_THROWS_AS(evolve(big, Matrix::Zero(1, 2), Matrix(0, 2), hard, {}, {0.0, 10, false}), ConfigError);
}

TEST_CASE("with t* = 1 the update is one kernel-gradient step") {
  Rng rng(11);
  const auto agg = random_agg(rng, 3);
  const auto k = build_kernel(agg);
  const Matrix f0 = agg.gather_logits(agg.train_rows);
  const Matrix y = model::one_hot(agg.gather_labels(agg.train_rows), 3);
  const auto res = evolve(k, f0, Matrix(0, 3), y, {}, {0.2, 1, false});
  REQUIRE(res.t_star == 1);
  const auto dw = compressed_update(agg, res, 0.2);
  const Vector r = flat(model::softmax_rows(f0) - y);
  const double n = static_cast<double>(agg.train_rows.size());
  for (std::size_t l = 0; l < agg.layers.size(); ++l) {
    const Vector expected = -(0.2 / n) * agg.layers[l].transpose() * r;
    CHECK((dw[l] - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  const auto zero = evolve(k, f0, Matrix(0, 3), model::softmax_rows(f0), {}, {0.2, 5, false});
  for (const auto& v : compressed_update(agg, zero, 0.2)) CHECK(v.cwiseAbs().maxCoeff() < 1e-12);
}
