#include "spark/run_config.hpp"

#include <charconv>
#include <functional>
#include <limits>

#include "spark/distillation.hpp"
#include "spark/errors.hpp"
#include "spark/rng.hpp"

namespace spark::sim {

std::uint64_t RunConfig::effective_projection_seed() const noexcept {
  return projection_seed ? *projection_seed : derive_seed(seed, {tag("projection")});
}

std::size_t RunConfig::effective_warm_rounds() const noexcept {
  return warm_rounds ? *warm_rounds : distill::DistillSchedule::default_warm_rounds(rounds);
}

void RunConfig::validate() const {
  const auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("invalid " + key + ": " + why);
  };
  if (arch.input_dim == 0) fail("model.input_dim", "must be >= 1");
  if (arch.hidden_dim == 0) fail("model.hidden_dim", "must be >= 1");
  if (arch.num_classes < 2) fail("model.num_classes", "must be >= 2");
  if (clients == 0) fail("clients", "must be >= 1");
  if (degree > 0 && degree >= clients) fail("degree", "must be < clients");
  if ((clients * degree) % 2 != 0) fail("degree", "clients * degree must be even");
  if (batch_size == 0) fail("batch_size", "must be >= 1");
  if (!(eta > 0.0)) fail("eta", "must be > 0");
  if (t_evolve == 0) fail("t_evolve", "must be >= 1");
  if (val_fraction < 0.0 || val_fraction >= 1.0) fail("val_fraction", "must lie in [0, 1)");
  if (workers == 0) fail("workers", "must be >= 1");
  if (!(dirichlet_alpha > 0.0)) fail("data.dirichlet_alpha", "must be > 0");
  if (source == DataSource::idx && (train_images.empty() || train_labels.empty() || test_images.empty() ||
                                    test_labels.empty())) {
    fail("data.source", "idx needs data.train_images, data.train_labels, data.test_images, data.test_labels");
  }
  if (source == DataSource::synthetic && (synth_per_class == 0 || synth_test_per_class == 0)) {
    fail("data.per_class", "synthetic data needs samples per class");
  }
  if (synth_spread < 0.0) fail("data.spread", "must be >= 0");
  if (projection_k == 0) fail("projection.k", "must be >= 1");
  if (effective_mode() == proj::Mode::gaussian && projection_allocation == proj::Allocation::proportional &&
      projection_k < 4) {
    fail("projection.k", "proportional allocation needs at least one column per layer (k >= 4)");
  }
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) fail("projection.sample_fraction", "must lie in (0, 1]");
  if (mu < 0.0 || mu >= 1.0) fail("momentum.mu", "must lie in [0, 1)");
  if (distillation_active() && rounds > 0) {
    distill::DistillSchedule s{alpha_init, alpha_final, tau_init, tau_final, effective_warm_rounds(), rounds};
    try {
      s.validate();
    } catch (const ConfigError& e) {
      fail("distill", e.what());
    }
  }
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

template <typename T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw ConfigError("invalid " + std::string(key) + ": cannot parse '" + std::string(s) + "'");
  }
  return v;
}

std::size_t parse_size(std::string_view key, std::string_view s) { return parse_number<std::size_t>(key, s); }
double parse_double(std::string_view key, std::string_view s) { return parse_number<double>(key, s); }

bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("invalid " + std::string(key) + ": expected true|false, got '" + std::string(s) + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <typename E, typename Parse>
E parse_enum(std::string_view key, std::string_view s, Parse parse) {
  try {
    return parse(s);
  } catch (const ConfigError& e) {
    throw ConfigError("invalid " + std::string(key) + ": " + e.what());
  }
}

struct Entry {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define SPARK_SIZE(NAME, FIELD, HELP)                                                         \
  Entry {                                                                                     \
    {NAME, HELP}, [](const RunConfig& c) { return std::to_string(c.FIELD); },                 \
        [](RunConfig& c, std::string_view v) { c.FIELD = parse_size(NAME, v); }               \
  }
#define SPARK_DOUBLE(NAME, FIELD, HELP)                                                       \
  Entry {                                                                                     \
    {NAME, HELP}, [](const RunConfig& c) { return fmt_double(c.FIELD); },                     \
        [](RunConfig& c, std::string_view v) { c.FIELD = parse_double(NAME, v); }             \
  }
#define SPARK_BOOL(NAME, FIELD, HELP)                                                         \
  Entry {                                                                                     \
    {NAME, HELP}, [](const RunConfig& c) { return fmt_bool(c.FIELD); },                       \
        [](RunConfig& c, std::string_view v) { c.FIELD = parse_bool(NAME, v); }               \
  }
#define SPARK_STRING(NAME, FIELD, HELP)                                                       \
  Entry {                                                                                     \
    {NAME, HELP}, [](const RunConfig& c) { return c.FIELD; },                                 \
        [](RunConfig& c, std::string_view v) { c.FIELD = std::string(v); }                    \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      SPARK_SIZE("seed", seed, "master seed for data, init, graphs and sampling"),
      SPARK_SIZE("clients", clients, "number of clients M"),
      SPARK_SIZE("degree", degree, "graph degree kappa"),
      SPARK_SIZE("rounds", rounds, "communication rounds R"),
      SPARK_SIZE("batch_size", batch_size, "local minibatch size per round"),
      SPARK_BOOL("static_topology", static_topology, "reuse the round-0 graph every round"),
      SPARK_DOUBLE("eta", eta, "kernel evolution learning rate"),
      SPARK_SIZE("t_evolve", t_evolve, "kernel evolution steps T"),
      SPARK_DOUBLE("val_fraction", val_fraction, "share of the own batch held out to pick t*"),
      SPARK_BOOL("shared_init", shared_init, "all clients start from the same weights"),
      SPARK_SIZE("workers", workers, "worker threads for per-client phases"),
      SPARK_SIZE("kernel_cap_bytes", kernel_cap_bytes, "memory cap for one dense kernel"),

      SPARK_SIZE("model.input_dim", arch.input_dim, "input features"),
      SPARK_SIZE("model.hidden_dim", arch.hidden_dim, "hidden units"),
      SPARK_SIZE("model.num_classes", arch.num_classes, "output classes C"),
      Entry{{"model.activation", "hidden activation (relu)"},
            [](const RunConfig&) { return std::string("relu"); },
            [](RunConfig& c, std::string_view v) {
              if (v != "relu") throw ConfigError("invalid model.activation: only relu is supported");
              c.arch.activation = model::Activation::relu;
            }},

      Entry{{"data.source", "synthetic | idx"},
            [](const RunConfig& c) { return std::string(c.source == DataSource::idx ? "idx" : "synthetic"); },
            [](RunConfig& c, std::string_view v) {
              if (v == "synthetic") {
                c.source = DataSource::synthetic;
              } else if (v == "idx") {
                c.source = DataSource::idx;
              } else {
                throw ConfigError("invalid data.source: expected synthetic|idx");
              }
            }},
      SPARK_DOUBLE("data.dirichlet_alpha", dirichlet_alpha, "Dirichlet concentration alpha"),
      SPARK_STRING("data.train_images", train_images, "IDX training images (.gz accepted)"),
      SPARK_STRING("data.train_labels", train_labels, "IDX training labels"),
      SPARK_STRING("data.test_images", test_images, "IDX holdout images"),
      SPARK_STRING("data.test_labels", test_labels, "IDX holdout labels"),
      SPARK_SIZE("data.train_subset", train_subset, "use only the first n training samples (0 = all)"),
      SPARK_SIZE("data.per_class", synth_per_class, "synthetic training samples per class"),
      SPARK_SIZE("data.test_per_class", synth_test_per_class, "synthetic holdout samples per class"),
      SPARK_DOUBLE("data.spread", synth_spread, "synthetic class standard deviation"),

      SPARK_BOOL("projection.enabled", projection_enabled, "false forces the identity projection"),
      Entry{{"projection.mode", "gaussian | identity"},
            [](const RunConfig& c) { return std::string(proj::to_string(c.projection_mode)); },
            [](RunConfig& c, std::string_view v) {
              c.projection_mode = parse_enum<proj::Mode>("projection.mode", v, proj::parse_mode);
            }},
      SPARK_SIZE("projection.k", projection_k, "total sketch width k"),
      Entry{{"projection.allocation", "proportional | per_layer"},
            [](const RunConfig& c) { return std::string(proj::to_string(c.projection_allocation)); },
            [](RunConfig& c, std::string_view v) {
              c.projection_allocation = parse_enum<proj::Allocation>("projection.allocation", v, proj::parse_allocation);
            }},
      Entry{{"projection.codec", "wire codec f64 | f32 | f16 | i8"},
            [](const RunConfig& c) { return std::string(proj::to_string(c.codec)); },
            [](RunConfig& c, std::string_view v) {
              c.codec = parse_enum<proj::Codec>("projection.codec", v, proj::parse_codec);
            }},
      SPARK_DOUBLE("projection.sample_fraction", sample_fraction, "share of batch rows sent to neighbors"),
      Entry{{"projection.seed", "global projection seed (auto = derived from seed)"},
            [](const RunConfig& c) {
              return c.projection_seed ? std::to_string(*c.projection_seed) : std::string("auto");
            },
            [](RunConfig& c, std::string_view v) {
              if (v == "auto") {
                c.projection_seed.reset();
              } else {
                c.projection_seed = parse_number<std::uint64_t>("projection.seed", v);
              }
            }},

      SPARK_BOOL("distill.enabled", distill_enabled, "false keeps pure hard-label targets"),
      SPARK_BOOL("distill.warm_forever", warm_forever, "stay in the warm-up phase every round"),
      Entry{{"distill.warm_rounds", "warm-up rounds (auto = ceil(0.2 R))"},
            [](const RunConfig& c) { return c.warm_rounds ? std::to_string(*c.warm_rounds) : std::string("auto"); },
            [](RunConfig& c, std::string_view v) {
              if (v == "auto") {
                c.warm_rounds.reset();
              } else {
                c.warm_rounds = parse_size("distill.warm_rounds", v);
              }
            }},
      SPARK_DOUBLE("distill.alpha_init", alpha_init, "mixing weight at the end of warm-up"),
      SPARK_DOUBLE("distill.alpha_final", alpha_final, "mixing weight at round R"),
      SPARK_DOUBLE("distill.tau_init", tau_init, "temperature at the end of warm-up"),
      SPARK_DOUBLE("distill.tau_final", tau_final, "temperature at round R"),

      SPARK_BOOL("momentum.enabled", momentum_enabled, "false applies plain updates"),
      SPARK_DOUBLE("momentum.mu", mu, "Nesterov coefficient"),

      SPARK_BOOL("diagnostics.grad_norm", diag_grad_norm, "log |grad L(w_avg)|^2 on a fixed probe batch"),
      SPARK_BOOL("diagnostics.step_norm", diag_step_norm, "log the mean applied step norm"),
      SPARK_SIZE("diagnostics.probe_size", probe_size, "probe batch size for grad_norm"),
      SPARK_STRING("diagnostics.graph_dump", graph_dump_dir, "directory for per-round edge lists"),
  };
  return table;
}

#undef SPARK_SIZE
#undef SPARK_DOUBLE
#undef SPARK_BOOL
#undef SPARK_STRING

const Entry& find(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

const std::vector<ConfigKey>& run_config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

bool is_run_config_key(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return true;
  }
  return false;
}

void set_key(RunConfig& cfg, std::string_view key, std::string_view value) { find(key).set(cfg, value); }

std::string get_key(const RunConfig& cfg, std::string_view key) { return find(key).get(cfg); }

std::vector<std::pair<std::string, std::string>> to_pairs(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries()) out.emplace_back(e.key.name, e.get(cfg));
  return out;
}

}  // namespace spark::sim
