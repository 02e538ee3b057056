#include "spark/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "spark/errors.hpp"
#include "spark/rng.hpp"

namespace spark::data {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.name = name;
  out.num_classes = num_classes;
  out.images.resize(static_cast<Eigen::Index>(indices.size()), images.cols());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.images.row(static_cast<Eigen::Index>(i)) = images.row(static_cast<Eigen::Index>(indices[i]));
    out.labels.push_back(labels.at(indices[i]));
  }
  return out;
}

void Dataset::validate() const {
  if (static_cast<std::size_t>(images.rows()) != labels.size()) {
    throw ContractViolation("dataset '" + name + "' has " + std::to_string(images.rows()) + " images but " +
                            std::to_string(labels.size()) + " labels");
  }
  for (const int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ContractViolation("dataset '" + name + "' has label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    }
  }
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw ConfigError("cannot open " + path.string());
    std::uint8_t buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw ParseError("gzip stream error in " + path.string(), bytes.size());
    return bytes;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at, const char* what) {
  if (at + 4 > b.size()) throw ParseError(std::string("truncated IDX header in ") + what, b.size());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  std::size_t num_classes) {
  if (be32(images, 0, "images") != 0x00000803) throw ParseError("bad IDX image magic", 0);
  if (be32(labels, 0, "labels") != 0x00000801) throw ParseError("bad IDX label magic", 0);
  const std::size_t n = be32(images, 4, "images");
  const std::size_t rows = be32(images, 8, "images");
  const std::size_t cols = be32(images, 12, "images");
  const std::size_t n_labels = be32(labels, 4, "labels");
  if (n != n_labels) throw ParseError("image count " + std::to_string(n) + " != label count " +
                                          std::to_string(n_labels), 4);
  const std::size_t dim = rows * cols;
  if (images.size() < 16 + n * dim) throw ParseError("truncated IDX image data", images.size());
  if (labels.size() < 8 + n) throw ParseError("truncated IDX label data", labels.size());

  Dataset ds;
  ds.name = "idx";
  ds.num_classes = num_classes;
  ds.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < dim; ++p) {
      ds.images(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
          static_cast<double>(images[16 + i * dim + p]) / 255.0;
    }
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[8 + i];
    if (static_cast<std::size_t>(y) >= num_classes) {
      throw ParseError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")", 8 + i);
    }
    ds.labels[i] = y;
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  Dataset ds = parse_idx(images, labels, num_classes);
  ds.name = images_path.filename().string();
  return ds;
}

namespace {

// Largest-remainder rounding of `total` items by nonnegative weights.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size(), 0);
  if (weights.empty()) return counts;
  std::vector<double> quota(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    quota[i] = sum > 0.0 ? static_cast<double>(total) * weights[i] / sum
                         : static_cast<double>(total) / static_cast<double>(weights.size());
    counts[i] = static_cast<std::size_t>(std::floor(quota[i]));
  }
  std::size_t assigned = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
  });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size(), ++assigned) ++counts[order[i]];
  return counts;
}

}  // namespace

Partition dirichlet_partition(const Dataset& ds, std::size_t clients, double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0)) throw ConfigError("Dirichlet alpha must be > 0");
  if (clients == 0) throw ConfigError("need at least one client");
  if (clients > ds.size()) {
    throw ConfigError("cannot split " + std::to_string(ds.size()) + " samples across " + std::to_string(clients) +
                      " clients");
  }
  const std::size_t classes = ds.num_classes;
  Rng rng(derive_seed(seed, {tag("dirichlet")}));

  Partition part;
  part.alpha = alpha;
  part.seed = seed;
  part.clients.assign(clients, {});
  part.proportions.assign(clients, std::vector<double>(classes, 0.0));
  for (auto& q : part.proportions) {
    double sum = 0.0;
    for (auto& v : q) sum += (v = rng.gamma(alpha));
    if (sum > 0.0) {
      for (auto& v : q) v /= sum;
    } else {
      q[static_cast<std::size_t>(rng.below(classes))] = 1.0;  // every gamma underflowed
    }
  }

  std::vector<std::vector<std::size_t>> pools(classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& pool = pools[c];
    rng.shuffle(std::span<std::size_t>(pool));
    std::vector<double> weights(clients);
    for (std::size_t i = 0; i < clients; ++i) weights[i] = part.proportions[i][c];
    const auto counts = apportion(pool.size(), weights);
    std::size_t at = 0;
    for (std::size_t i = 0; i < clients; ++i) {
      part.clients[i].insert(part.clients[i].end(), pool.begin() + static_cast<std::ptrdiff_t>(at),
                             pool.begin() + static_cast<std::ptrdiff_t>(at + counts[i]));
      at += counts[i];
    }
  }

  for (auto& shard : part.clients) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(part.clients.begin(), part.clients.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    shard.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& shard : part.clients) std::sort(shard.begin(), shard.end());
  return part;
}

Matrix synth_means(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
  Matrix means = Matrix::Constant(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(dim), 0.25);
  Rng rng(derive_seed(seed, {tag("synth-means")}));
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto row = static_cast<Eigen::Index>(c);
    if (c < dim) {
      means(row, row) = 0.75;
    } else {
      for (Eigen::Index p = 0; p < means.cols(); ++p) means(row, p) = rng.below(2) == 1 ? 0.75 : 0.25;
    }
  }
  return means;
}

Dataset synth_gaussians(std::size_t num_classes, std::size_t n_per_class, std::size_t dim, double spread,
                        std::uint64_t seed, std::uint64_t stream) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (dim == 0) throw ConfigError("synthetic data needs dim >= 1");
  if (spread < 0.0) throw ConfigError("spread must be >= 0");
  const Matrix means = synth_means(num_classes, dim, seed);
  Rng rng(derive_seed(seed, {tag("synth-samples"), stream}));

  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = num_classes;
  ds.images.resize(static_cast<Eigen::Index>(num_classes * n_per_class), static_cast<Eigen::Index>(dim));
  ds.labels.reserve(num_classes * n_per_class);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t j = 0; j < n_per_class; ++j, ++row) {
      for (Eigen::Index p = 0; p < ds.images.cols(); ++p) {
        const double noise = spread > 0.0 ? spread * rng.normal() : 0.0;
        ds.images(row, p) = std::clamp(means(static_cast<Eigen::Index>(c), p) + noise, 0.0, 1.0);
      }
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

}  // namespace spark::data
