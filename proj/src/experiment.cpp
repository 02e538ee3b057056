#include "spark/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "spark/projection.hpp"

#ifndef SPARK_GIT_DESCRIBE
#define SPARK_GIT_DESCRIBE "unknown"
#endif

namespace spark::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

std::vector<std::uint64_t> parse_seed_list(std::string_view s) {
  std::vector<std::uint64_t> out;
  std::size_t at = 0;
  while (at < s.size()) {
    const auto end = s.find_first_of(", ", at);
    const auto tok = trim(s.substr(at, end == std::string_view::npos ? std::string_view::npos : end - at));
    if (!tok.empty()) {
      std::uint64_t v = 0;
      const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
        throw ConfigError("invalid experiment.seeds: cannot parse '" + std::string(tok) + "'");
      }
      out.push_back(v);
    }
    if (end == std::string_view::npos) break;
    at = end + 1;
  }
  return out;
}

bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("invalid " + std::string(key) + ": expected true|false, got '" + std::string(v) + "'");
}

const std::vector<sim::ConfigKey>& extra_keys() {
  static const std::vector<sim::ConfigKey> keys = {
      {"experiment.name", "run name; output goes to <output.dir>/<name>/seed_<s>"},
      {"experiment.seeds", "comma-separated seeds, one run each (empty: use seed)"},
      {"experiment.threshold", "accuracy threshold for rounds-to-threshold"},
      {"output.dir", "output root (SPARK_OUT overrides)"},
      {"output.overwrite", "replace an existing run directory"},
      {"output.checkpoint_every", "rounds between checkpoints (0 disables)"},
  };
  return keys;
}

bool is_extra_key(std::string_view key) {
  return std::any_of(extra_keys().begin(), extra_keys().end(), [&](const auto& k) { return k.name == key; });
}

bool known_section(std::string_view section) {
  for (const auto& k : experiment_keys()) {
    if (k.name.size() > section.size() && k.name.compare(0, section.size(), section) == 0 &&
        k.name[section.size()] == '.') {
      return true;
    }
  }
  return false;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<std::uint64_t> Experiment::effective_seeds() const {
  return seeds.empty() ? std::vector<std::uint64_t>{run.seed} : seeds;
}

std::vector<sim::ConfigKey> experiment_keys() {
  auto keys = sim::run_config_keys();
  keys.insert(keys.end(), extra_keys().begin(), extra_keys().end());
  return keys;
}

void set_key(Experiment& ex, std::string_view key, std::string_view value) {
  if (key == "experiment.name") {
    if (value.empty() || value.find('/') != std::string_view::npos) {
      throw ConfigError("invalid experiment.name: must be a nonempty name without '/'");
    }
    ex.name = std::string(value);
  } else if (key == "experiment.seeds") {
    ex.seeds = parse_seed_list(value);
  } else if (key == "experiment.threshold") {
    double v = 0.0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size() || v < 0.0 || v > 1.0) {
      throw ConfigError("invalid experiment.threshold: expected a number in [0, 1]");
    }
    ex.threshold = v;
  } else if (key == "output.dir") {
    ex.output_dir = std::string(value);
  } else if (key == "output.overwrite") {
    ex.overwrite = parse_flag(key, value);
  } else if (key == "output.checkpoint_every") {
    std::size_t v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
      throw ConfigError("invalid output.checkpoint_every: expected a count");
    }
    ex.checkpoint_every = v;
  } else {
    sim::set_key(ex.run, key, value);
  }
}

std::string get_key(const Experiment& ex, std::string_view key) {
  if (key == "experiment.name") return ex.name;
  if (key == "experiment.seeds") {
    std::string s;
    for (std::size_t i = 0; i < ex.seeds.size(); ++i) s += (i ? ", " : "") + std::to_string(ex.seeds[i]);
    return s;
  }
  if (key == "experiment.threshold") return fmt(ex.threshold);
  if (key == "output.dir") return ex.output_dir.string();
  if (key == "output.overwrite") return ex.overwrite ? "true" : "false";
  if (key == "output.checkpoint_every") return std::to_string(ex.checkpoint_every);
  return sim::get_key(ex.run, key);
}

Experiment parse_config_text(std::string_view text, const std::string& origin) {
  Experiment ex;
  std::string section;
  std::vector<std::string> seen;
  std::size_t line_no = 0;
  std::size_t at = 0;
  while (at <= text.size()) {
    const auto nl = text.find('\n', at);
    const auto raw = text.substr(at, nl == std::string_view::npos ? std::string_view::npos : nl - at);
    at = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    // Comments: whole-line '#' / ';', or inline after whitespace.
    std::string_view line = raw;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if ((line[i] == '#' || line[i] == ';') && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
        line = line.substr(0, i);
        break;
      }
    }
    const auto body = trim(line);
    if (body.empty()) continue;
    const std::size_t col0 = static_cast<std::size_t>(body.data() - raw.data()) + 1;

    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigFileError(origin, line_no, col0, "expected ']' to close the section header");
      const auto name = trim(body.substr(1, body.size() - 2));
      if (!known_section(name)) {
        throw ConfigFileError(origin, line_no, col0 + 1, "unknown section [" + std::string(name) + "]");
      }
      section = std::string(name);
      continue;
    }

    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ConfigFileError(origin, line_no, col0, "expected 'key = value'");
    const auto key = trim(body.substr(0, eq));
    const auto value_raw = body.substr(eq + 1);
    const auto value = trim(value_raw);
    if (key.empty()) throw ConfigFileError(origin, line_no, col0, "missing key before '='");
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (!sim::is_run_config_key(full) && !is_extra_key(full)) {
      throw ConfigFileError(origin, line_no, col0, "unknown key '" + full + "'");
    }
    if (std::find(seen.begin(), seen.end(), full) != seen.end()) {
      throw ConfigFileError(origin, line_no, col0, "duplicate key '" + full + "'");
    }
    seen.push_back(full);
    std::size_t value_col = col0 + eq + 1;
    if (!value.empty()) value_col = static_cast<std::size_t>(value.data() - raw.data()) + 1;
    try {
      set_key(ex, full, value);
    } catch (const ConfigError& e) {
      throw ConfigFileError(origin, line_no, value_col, e.what());
    }
  }
  return ex;
}

Experiment parse_manifest_text(std::string_view text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("config") || !doc["config"].is_object()) {
    throw ConfigError(origin + ": not a run manifest (no \"config\" object)");
  }
  Experiment ex;
  for (const auto& [key, value] : doc["config"].items()) {
    if (!value.is_string()) throw ConfigError(origin + ": config value for '" + key + "' must be a string");
    try {
      sim::set_key(ex.run, key, value.get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
  if (doc.contains("experiment")) {
    const auto& e = doc["experiment"];
    if (e.contains("name")) ex.name = e["name"].get<std::string>();
    if (e.contains("threshold")) ex.threshold = e["threshold"].get<double>();
    if (e.contains("checkpoint_every")) ex.checkpoint_every = e["checkpoint_every"].get<std::size_t>();
  }
  ex.seeds = {ex.run.seed};
  return ex;
}

Experiment load_config(const fs::path& path) {
  const auto text = read_file(path);
  if (path.extension() == ".json") return parse_manifest_text(text, path.string());
  return parse_config_text(text, path.string());
}

void apply_override(Experiment& ex, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("--set expects key=value, got '" + std::string(assignment) + "'");
  }
  const auto key = trim(assignment.substr(0, eq));
  if (!sim::is_run_config_key(key) && !is_extra_key(key)) {
    throw ConfigError("--set: unknown key '" + std::string(key) + "'");
  }
  set_key(ex, key, trim(assignment.substr(eq + 1)));
}

std::string defaults_text() {
  const Experiment ex;
  std::ostringstream os;
  os << "# spark defaults. Any key may go in a config file or in --set key=value;\n"
     << "# dotted keys map to [section] blocks.\n";
  std::string current;
  for (const auto& k : experiment_keys()) {
    const auto dot = k.name.find('.');
    const std::string section = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (section != current) {
      os << "\n[" << section << "]\n";
      current = section;
    }
    os << "# " << k.help << "\n" << leaf << " = " << get_key(ex, k.name) << "\n";
  }
  return os.str();
}

std::string metrics_header() {
  return "round,agg_acc,agg_loss,client_acc,train_loss,bytes,cum_bytes,messages,mean_t_star,truncated,components,"
         "wall_s,grad_norm_sq,step_norm";
}

std::string metrics_row(const sim::RoundMetrics& m, std::uint64_t cumulative_bytes) {
  std::ostringstream os;
  os << m.round << ',' << fmt(m.agg_accuracy) << ',' << fmt(m.agg_loss) << ',' << fmt(m.client_accuracy) << ','
     << fmt(m.train_loss) << ',' << m.bytes_sent << ',' << cumulative_bytes << ',' << m.messages << ','
     << fmt(m.mean_t_star) << ',' << m.truncated << ',' << m.components << ',' << fmt(m.wall_seconds) << ','
     << (m.grad_norm_sq ? fmt(*m.grad_norm_sq) : "") << ',' << (m.step_norm ? fmt(*m.step_norm) : "");
  return os.str();
}

void write_metrics_csv(std::ostream& os, const std::vector<sim::RoundMetrics>& history) {
  os << metrics_header() << '\n';
  std::uint64_t cum = 0;
  for (const auto& m : history) {
    cum += m.bytes_sent;
    os << metrics_row(m, cum) << '\n';
  }
}

std::string compression_label(const sim::RunConfig& cfg) {
  const auto spec = proj::ProjectionSpec::make(cfg.effective_projection_seed(), cfg.projection_k, cfg.effective_mode(),
                                               cfg.projection_allocation, cfg.arch.layers());
  char buf[64];
  std::snprintf(buf, sizeof(buf), "compression %.1f%%", 100.0 * proj::payload_reduction(spec));
  return buf;
}

std::string git_describe() { return SPARK_GIT_DESCRIBE; }

std::string manifest_json(const Experiment& ex, const sim::Simulator& sim, std::string_view status) {
  const auto& cfg = sim.config();
  json doc;
  doc["format"] = "spark-run-manifest";
  doc["version"] = 1;
  doc["status"] = std::string(status);
  doc["git"] = git_describe();
  doc["experiment"] = {{"name", ex.name},
                       {"seed", cfg.seed},
                       {"threshold", ex.threshold},
                       {"checkpoint_every", ex.checkpoint_every}};
  json conf = json::object();
  for (const auto& [k, v] : sim::to_pairs(cfg)) conf[k] = v;
  doc["config"] = conf;

  const auto& spec = sim.projection();
  json layers = json::array();
  for (const auto& l : spec.layers) {
    layers.push_back({{"name", l.name}, {"d", l.input_dim}, {"k", l.width}, {"seed", l.seed}});
  }
  doc["projection"] = {{"mode", proj::to_string(spec.mode)},
                       {"allocation", proj::to_string(spec.allocation)},
                       {"global_seed", spec.global_seed},
                       {"parameter_dim", spec.total_input_dim()},
                       {"sketch_width", spec.total_width()},
                       {"layers", layers},
                       {"payload_reduction", proj::payload_reduction(spec)},
                       {"summary", compression_label(cfg)}};

  json shards = json::array();
  for (const auto& s : sim.workload().partition.clients) shards.push_back(s.size());
  doc["data"] = {{"source", cfg.source == sim::DataSource::idx ? "idx" : "synthetic"},
                 {"train_samples", sim.workload().train.size()},
                 {"holdout_samples", sim.workload().holdout.size()},
                 {"shard_sizes", shards}};
  doc["evaluation"] =
      "aggregated-model and mean-client accuracy on the global holdout after every round (not only at the end)";
  doc["metrics_columns"] = metrics_header();
  doc["rounds_completed"] = sim.rounds_done();

  std::vector<MetricsRow> rows;
  for (const auto& m : sim.history()) rows.push_back({m.round, m.agg_accuracy, m.client_accuracy, m.bytes_sent});
  const auto rep = summarize(rows, ex.threshold);
  doc["results"] = {{"final_agg_accuracy", rep.final_agg_accuracy},
                    {"final_client_accuracy", rep.final_client_accuracy},
                    {"rounds_to_threshold", rep.rounds_to_threshold ? json(*rep.rounds_to_threshold) : json(nullptr)},
                    {"total_bytes", rep.total_bytes}};
  return doc.dump(2) + "\n";
}

std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& origin) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigFileError(origin, 1, 1, "empty file, expected a header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.emplace_back(trim(c));
  }
  const auto col = [&](const char* name) {
    const auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw ConfigFileError(origin, 1, 1, std::string("missing column '") + name + "'");
    return static_cast<std::size_t>(it - cols.begin());
  };
  const auto c_round = col("round");
  const auto c_agg = col("agg_acc");
  const auto c_client = col("client_acc");
  const auto c_bytes = col("bytes");

  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    const auto cell = [&](std::size_t i) -> std::string_view {
      if (i >= cells.size()) throw ConfigFileError(origin, line_no, 1, "row has too few columns");
      return trim(cells[i]);
    };
    const auto num = [&](std::size_t i, auto& out) {
      const auto s = cell(i);
      const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
      if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ConfigFileError(origin, line_no, 1, "cannot parse '" + std::string(s) + "' in column " + cols[i]);
      }
    };
    MetricsRow r;
    num(c_round, r.round);
    num(c_agg, r.agg_accuracy);
    num(c_client, r.client_accuracy);
    num(c_bytes, r.bytes);
    rows.push_back(r);
  }
  return rows;
}

Report summarize(const std::vector<MetricsRow>& rows, double threshold) {
  Report r;
  r.rounds = rows.size();
  for (const auto& row : rows) {
    r.total_bytes += row.bytes;
    if (!r.rounds_to_threshold && row.agg_accuracy >= threshold) r.rounds_to_threshold = row.round;
  }
  if (!rows.empty()) {
    r.final_agg_accuracy = rows.back().agg_accuracy;
    r.final_client_accuracy = rows.back().client_accuracy;
  }
  return r;
}

std::string threshold_text(const Report& r) {
  if (r.rounds_to_threshold) return std::to_string(*r.rounds_to_threshold);
  return "not reached (" + std::to_string(r.rounds) + " rounds)";
}

std::string sparkline(const std::vector<MetricsRow>& rows) {
  static constexpr std::string_view ramp = " .:-=+*#%@";
  std::string out;
  for (const auto& r : rows) {
    const double a = std::clamp(r.agg_accuracy, 0.0, 1.0);
    const auto i = std::min<std::size_t>(ramp.size() - 1, static_cast<std::size_t>(a * static_cast<double>(ramp.size())));
    out += ramp[i];
  }
  return out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os << text;
  }
  fs::rename(tmp, path);
}

SeedOutcome drive(const Experiment& ex, sim::Simulator& sim, const fs::path& dir, std::ostream* log) {
  const auto& cfg = sim.config();
  write_text(dir / kManifestFile, manifest_json(ex, sim, "running"));
  std::ofstream csv(dir / kMetricsFile, std::ios::trunc);
  if (!csv) throw Error("cannot write " + (dir / kMetricsFile).string());
  write_metrics_csv(csv, sim.history());
  csv.flush();
  std::uint64_t cum = 0;
  for (const auto& m : sim.history()) cum += m.bytes_sent;

  const auto ckpt = dir / kCheckpointFile;
  if (ex.checkpoint_every > 0 && sim.rounds_done() == 0) sim.save_checkpoint(ckpt);
  try {
    sim.run([&](const sim::RoundMetrics& m) {
      cum += m.bytes_sent;
      csv << metrics_row(m, cum) << '\n';
      csv.flush();
      if (ex.checkpoint_every > 0 && (m.round % ex.checkpoint_every == 0 || m.round == cfg.rounds)) {
        sim.save_checkpoint(ckpt);
      }
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "[%s seed %llu] round %zu/%zu agg %.4f client %.4f loss %.4f (%.2fs)\n",
                      ex.name.c_str(), static_cast<unsigned long long>(cfg.seed), m.round, cfg.rounds,
                      m.agg_accuracy, m.client_accuracy, m.train_loss, m.wall_seconds);
        *log << buf << std::flush;
      }
    });
  } catch (const std::exception& e) {
    write_text(dir / kManifestFile, manifest_json(ex, sim, std::string("failed: ") + e.what()));
    throw;
  }
  write_text(dir / kManifestFile, manifest_json(ex, sim, "complete"));

  std::vector<MetricsRow> rows;
  for (const auto& m : sim.history()) rows.push_back({m.round, m.agg_accuracy, m.client_accuracy, m.bytes_sent});
  return {dir, summarize(rows, ex.threshold)};
}

}  // namespace

SeedOutcome run_seed(const Experiment& ex, std::uint64_t seed, const fs::path& dir, std::ostream* log) {
  Experiment one = ex;
  one.run.seed = seed;
  one.seeds = {seed};
  if (fs::exists(dir / kMetricsFile) && !ex.overwrite) {
    throw ConfigError(dir.string() + " already holds a run; pass --set output.overwrite=true or use resume");
  }
  one.run.validate();
  fs::create_directories(dir);
  fs::remove(dir / kCheckpointFile);
  sim::Simulator sim(one.run);
  return drive(one, sim, dir, log);
}

SeedOutcome resume_dir(const fs::path& dir, std::ostream* log) {
  if (!fs::exists(dir / kManifestFile) || !fs::exists(dir / kCheckpointFile)) {
    throw ConfigError(dir.string() + " has no " + kManifestFile + " and " + kCheckpointFile + " to resume from");
  }
  auto ex = parse_manifest_text(read_file(dir / kManifestFile), (dir / kManifestFile).string());
  auto sim = sim::Simulator::restore(dir / kCheckpointFile);
  if (sim::to_pairs(sim.config()) != sim::to_pairs(ex.run)) {
    throw CheckpointError("checkpoint config differs from " + (dir / kManifestFile).string());
  }
  if (log) *log << "resuming " << dir.string() << " after round " << sim.rounds_done() << "\n";
  return drive(ex, sim, dir, log);
}

}  // namespace spark::cli
