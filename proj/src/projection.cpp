#include "spark/projection.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "spark/errors.hpp"
#include "spark/rng.hpp"

namespace spark::proj {

std::string_view to_string(Mode m) noexcept { return m == Mode::identity ? "identity" : "gaussian"; }

std::string_view to_string(Allocation a) noexcept {
  return a == Allocation::per_layer ? "per_layer" : "proportional";
}

std::string_view to_string(Codec c) noexcept {
  switch (c) {
    case Codec::f64: return "f64";
    case Codec::f32: return "f32";
    case Codec::f16: return "f16";
    case Codec::i8: return "i8";
  }
  return "?";
}

Mode parse_mode(std::string_view s) {
  if (s == "gaussian") return Mode::gaussian;
  if (s == "identity") return Mode::identity;
  throw ConfigError("unknown projection mode '" + std::string(s) + "' (expected gaussian|identity)");
}

Allocation parse_allocation(std::string_view s) {
  if (s == "proportional") return Allocation::proportional;
  if (s == "per_layer") return Allocation::per_layer;
  throw ConfigError("unknown allocation '" + std::string(s) + "' (expected proportional|per_layer)");
}

Codec parse_codec(std::string_view s) {
  if (s == "f64") return Codec::f64;
  if (s == "f32") return Codec::f32;
  if (s == "f16") return Codec::f16;
  if (s == "i8") return Codec::i8;
  throw ConfigError("unknown codec '" + std::string(s) + "' (expected f64|f32|f16|i8)");
}

std::size_t bytes_per_entry(Codec c) noexcept {
  switch (c) {
    case Codec::f64: return 8;
    case Codec::f32: return 4;
    case Codec::f16: return 2;
    case Codec::i8: return 1;
  }
  return 0;
}

std::uint64_t layer_seed(std::uint64_t global_seed, std::string_view layer_name) {
  std::vector<unsigned char> msg(8 + layer_name.size());
  for (int i = 0; i < 8; ++i) msg[static_cast<std::size_t>(i)] = static_cast<unsigned char>(global_seed >> (8 * i));
  std::copy(layer_name.begin(), layer_name.end(), msg.begin() + 8);

  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(msg.data(), msg.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1 || len < 8) {
    throw Error("SHA-256 digest failed");
  }
  std::uint64_t seed = 0;
  for (int i = 7; i >= 0; --i) seed = (seed << 8) | digest[static_cast<std::size_t>(i)];
  return seed;
}

std::vector<std::size_t> allocate_widths(std::size_t k, std::span<const std::size_t> layer_dims) {
  const std::size_t layers = layer_dims.size();
  if (layers == 0) return {};
  if (k < layers) {
    throw ConfigError("projection k = " + std::to_string(k) + " is smaller than the layer count " +
                      std::to_string(layers));
  }
  const double total = static_cast<double>(std::accumulate(layer_dims.begin(), layer_dims.end(), std::size_t{0}));
  std::vector<double> quota(layers);
  std::vector<std::size_t> width(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    quota[l] = static_cast<double>(k) * static_cast<double>(layer_dims[l]) / total;
    width[l] = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(quota[l])));
  }
  std::size_t assigned = std::accumulate(width.begin(), width.end(), std::size_t{0});

  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (assigned < k) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
    });
    for (std::size_t i = 0; assigned < k; i = (i + 1) % layers, ++assigned) ++width[order[i]];
  } else {
    // The floor of one per layer overshot; trim the widest layers.
    while (assigned > k) {
      const auto widest = std::max_element(width.begin(), width.end());
      --*widest;
      --assigned;
    }
  }
  return width;
}

ProjectionSpec ProjectionSpec::make(std::uint64_t global_seed, std::size_t k, Mode mode, Allocation allocation,
                                    const std::vector<model::LayerInfo>& layer_table) {
  if (k == 0) throw ConfigError("projection k must be >= 1");
  ProjectionSpec spec;
  spec.global_seed = global_seed;
  spec.k = k;
  spec.mode = mode;
  spec.allocation = allocation;

  std::vector<std::size_t> dims;
  for (const auto& info : layer_table) dims.push_back(info.size());
  std::vector<std::size_t> widths;
  if (mode == Mode::identity) {
    widths = dims;
  } else if (allocation == Allocation::per_layer) {
    widths.assign(dims.size(), k);
  } else {
    widths = allocate_widths(k, dims);
  }
  for (std::size_t l = 0; l < layer_table.size(); ++l) {
    spec.layers.push_back({layer_table[l].name, dims[l], widths[l], layer_seed(global_seed, layer_table[l].name)});
  }
  return spec;
}

std::size_t ProjectionSpec::total_width() const noexcept {
  std::size_t w = 0;
  for (const auto& l : layers) w += l.width;
  return w;
}

std::size_t ProjectionSpec::total_input_dim() const noexcept {
  std::size_t d = 0;
  for (const auto& l : layers) d += l.input_dim;
  return d;
}

const LayerSketch& ProjectionSpec::layer(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw ConfigError("projection spec has no layer '" + std::string(name) + "'");
}

Matrix generate_projection(const ProjectionSpec& spec, std::string_view layer, std::size_t input_dim,
                           std::size_t width) {
  const auto d = static_cast<Eigen::Index>(input_dim);
  if (spec.mode == Mode::identity) return Matrix::Identity(d, d);
  if (width == 0) throw ConfigError("projection width must be >= 1");

  const auto k = static_cast<Eigen::Index>(width);
  Rng rng(layer_seed(spec.global_seed, layer));
  const double scale = 1.0 / std::sqrt(static_cast<double>(width));
  Matrix p(d, k);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) p(i, j) = scale * rng.normal();
  }
  return p;
}

std::size_t CompressedJacobian::width() const noexcept {
  std::size_t w = 0;
  for (const auto& l : layers) w += static_cast<std::size_t>(l.cols());
  return w;
}

Projector::Projector(ProjectionSpec spec) : spec_(std::move(spec)) {
  mats_.resize(spec_.layers.size());
  if (spec_.mode == Mode::identity) return;
  for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
    const auto& info = spec_.layers[l];
    mats_[l] = generate_projection(spec_, info.name, info.input_dim, info.width);
  }
}

CompressedJacobian Projector::compress(const model::JacobianBlock& jac) const {
  if (jac.layers.size() != spec_.layers.size()) {
    throw ConfigError("compress: Jacobian has " + std::to_string(jac.layers.size()) + " layers, spec has " +
                      std::to_string(spec_.layers.size()));
  }
  CompressedJacobian out;
  out.owner = jac.owner;
  out.sample_count = jac.sample_count;
  out.num_classes = jac.num_classes;
  out.codec = Codec::f64;
  out.sample_indices.resize(jac.sample_count);
  std::iota(out.sample_indices.begin(), out.sample_indices.end(), std::uint32_t{0});

  for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
    const auto& info = spec_.layers[l];
    if (jac.layer_names.at(l) != info.name || static_cast<std::size_t>(jac.layers[l].cols()) != info.input_dim) {
      throw ConfigError("compress: layer " + std::to_string(l) + " ('" + jac.layer_names.at(l) +
                        "') does not match the projection spec ('" + info.name + "')");
    }
    out.layer_names.push_back(info.name);
    out.layer_dims.push_back(info.input_dim);
    if (spec_.mode == Mode::identity) {
      out.layers.push_back(jac.layers[l]);
    } else {
      out.layers.emplace_back(jac.layers[l] * mats_[l]);
    }
  }
  return out;
}

std::vector<Vector> Projector::back_project(const std::vector<Vector>& delta) const {
  if (delta.size() != spec_.layers.size()) throw ConfigError("back_project: layer count mismatch");
  std::vector<Vector> out;
  out.reserve(delta.size());
  for (std::size_t l = 0; l < delta.size(); ++l) {
    if (static_cast<std::size_t>(delta[l].size()) != spec_.layers[l].width) {
      throw ConfigError("back_project: layer '" + spec_.layers[l].name + "' expects width " +
                        std::to_string(spec_.layers[l].width));
    }
    if (spec_.mode == Mode::identity) {
      out.push_back(delta[l]);
    } else {
      out.emplace_back(mats_[l] * delta[l]);
    }
  }
  return out;
}

Vector Projector::back_project_flat(const std::vector<Vector>& delta) const {
  const auto parts = back_project(delta);
  Vector flat(static_cast<Eigen::Index>(spec_.total_input_dim()));
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    flat.segment(offset, p.size()) = p;
    offset += p.size();
  }
  return flat;
}

CompressedJacobian compress(const model::JacobianBlock& jac, const ProjectionSpec& spec) {
  return Projector(spec).compress(jac);
}

std::vector<Vector> back_project(const std::vector<Vector>& delta, const ProjectionSpec& spec) {
  return Projector(spec).back_project(delta);
}

std::vector<std::size_t> choose_rows(std::size_t n, double fraction, std::uint64_t rng_seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ContractViolation("sample fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  if (n == 0) throw ContractViolation("sample_rows: empty batch");
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> chosen;
  if (keep >= n) {
    chosen.resize(n);
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
  } else {
    Rng rng(rng_seed);
    chosen = sample_without_replacement(n, keep, rng);
  }
  return chosen;
}

namespace {

std::vector<Eigen::Index> expand_rows(std::span<const std::size_t> samples, std::size_t classes) {
  std::vector<Eigen::Index> rows;
  rows.reserve(samples.size() * classes);
  for (const std::size_t s : samples) {
    for (std::size_t c = 0; c < classes; ++c) rows.push_back(static_cast<Eigen::Index>(s * classes + c));
  }
  return rows;
}

}  // namespace

SampledRows sample_rows(const model::JacobianBlock& jac, const Matrix& logits, double fraction,
                        std::uint64_t rng_seed) {
  const std::size_t n = jac.sample_count;
  if (static_cast<std::size_t>(logits.rows()) != n) throw ContractViolation("sample_rows: logits rows != N");
  const auto chosen = choose_rows(n, fraction, rng_seed);

  SampledRows out;
  out.jacobian.layer_names = jac.layer_names;
  out.jacobian.sample_count = chosen.size();
  out.jacobian.num_classes = jac.num_classes;
  out.jacobian.owner = jac.owner;
  std::vector<Eigen::Index> logit_rows;
  for (const std::size_t s : chosen) {
    out.indices.push_back(static_cast<std::uint32_t>(s));
    logit_rows.push_back(static_cast<Eigen::Index>(s));
  }
  const auto jac_rows = expand_rows(chosen, jac.num_classes);
  for (const auto& layer : jac.layers) out.jacobian.layers.emplace_back(layer(jac_rows, Eigen::all));
  out.logits = logits(logit_rows, Eigen::all);
  return out;
}

CompressedJacobian take_rows(const CompressedJacobian& cj, std::span<const std::size_t> samples) {
  CompressedJacobian out;
  out.layer_names = cj.layer_names;
  out.layer_dims = cj.layer_dims;
  out.num_classes = cj.num_classes;
  out.owner = cj.owner;
  out.codec = cj.codec;
  out.sample_count = samples.size();
  std::size_t prev = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i] >= cj.sample_count || (i > 0 && samples[i] <= prev)) {
      throw ContractViolation("take_rows: positions must be strictly increasing and within the batch");
    }
    prev = samples[i];
    out.sample_indices.push_back(cj.sample_indices.at(samples[i]));
  }
  const auto rows = expand_rows(samples, cj.num_classes);
  for (const auto& layer : cj.layers) out.layers.emplace_back(layer(rows, Eigen::all));
  return out;
}

Matrix orthogonal_projector(const Matrix& p) {
  const Matrix gram = p.transpose() * p;
  return p * gram.ldlt().solve(p.transpose());
}

Matrix sketch_operator(const Matrix& p) { return p * p.transpose(); }

double payload_reduction(const ProjectionSpec& spec) {
  return 1.0 - static_cast<double>(spec.total_width()) / static_cast<double>(spec.total_input_dim());
}

}  // namespace spark::proj
