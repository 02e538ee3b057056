#pragma once

// Experiment files, run directories and reports for the spark tool.
//
// Config files are INI-like:
//
//   # comment
//   rounds = 40              ; keys before any section are RunConfig root keys
//   [projection]
//   k = 64                   ; same as projection.k = 64
//   [experiment]
//   name = desk
//   seeds = 1, 2, 3
//   threshold = 0.85
//   [output]
//   dir = runs
//   overwrite = false
//   checkpoint_every = 1
//
// A JSON run manifest written by a previous run is accepted in place of a
// config file and reproduces that run.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spark/errors.hpp"
#include "spark/run_config.hpp"
#include "spark/simulator.hpp"

namespace spark::cli {

/// Config text that cannot be used; carries a 1-based line and column.
class ConfigFileError : public ConfigError {
 public:
  ConfigFileError(const std::string& origin, std::size_t line, std::size_t column, const std::string& what)
      : ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
        line_(line),
        column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

struct Experiment {
  std::string name = "spark";
  std::vector<std::uint64_t> seeds;  // empty: the run config's seed
  double threshold = 0.85;
  std::filesystem::path output_dir = "runs";
  bool overwrite = false;
  std::size_t checkpoint_every = 1;  // rounds between checkpoints, 0 disables
  sim::RunConfig run;

  std::vector<std::uint64_t> effective_seeds() const;
};

/// Every key accepted by set_key: RunConfig keys plus experiment.* and output.*.
std::vector<sim::ConfigKey> experiment_keys();
void set_key(Experiment& ex, std::string_view key, std::string_view value);
std::string get_key(const Experiment& ex, std::string_view key);

/// Parses INI text; `origin` names the source in error messages.
Experiment parse_config_text(std::string_view text, const std::string& origin = "<config>");
/// INI file or JSON manifest (chosen by the .json extension).
Experiment load_config(const std::filesystem::path& path);
Experiment parse_manifest_text(std::string_view text, const std::string& origin = "<manifest>");

/// Applies "key=value".
void apply_override(Experiment& ex, std::string_view assignment);

/// The default config as INI text that parses back to the defaults.
std::string defaults_text();

/// round,agg_acc,... header line of metrics.csv.
std::string metrics_header();
std::string metrics_row(const sim::RoundMetrics& m, std::uint64_t cumulative_bytes);
void write_metrics_csv(std::ostream& os, const std::vector<sim::RoundMetrics>& history);

/// "compression 98.7%" for the configured projection.
std::string compression_label(const sim::RunConfig& cfg);
/// Build-time `git describe` string, or "unknown".
std::string git_describe();

/// JSON manifest of one seed's run. `sim` supplies shard sizes and results.
std::string manifest_json(const Experiment& ex, const sim::Simulator& sim, std::string_view status);

struct MetricsRow {
  std::size_t round = 0;
  double agg_accuracy = 0.0;
  double client_accuracy = 0.0;
  std::uint64_t bytes = 0;
};

/// Reads the round, agg_acc, client_acc and bytes columns of metrics.csv.
std::vector<MetricsRow> read_metrics_csv(std::istream& is, const std::string& origin = "metrics.csv");

struct Report {
  std::size_t rounds = 0;
  double final_agg_accuracy = 0.0;
  double final_client_accuracy = 0.0;
  std::optional<std::size_t> rounds_to_threshold;  // first round with agg_acc >= threshold
  std::uint64_t total_bytes = 0;
  double total_gib() const noexcept { return static_cast<double>(total_bytes) / 1073741824.0; }
};

Report summarize(const std::vector<MetricsRow>& rows, double threshold);
/// "6" or "not reached (R rounds)".
std::string threshold_text(const Report& r);
/// One ASCII character per round, height proportional to agg_acc in [0, 1].
std::string sparkline(const std::vector<MetricsRow>& rows);

struct SeedOutcome {
  std::filesystem::path dir;
  Report report;
};

/// Runs (or resumes) one seed into `dir`: metrics.csv, manifest.json and a
/// checkpoint. Progress lines go to `log` when non-null.
SeedOutcome run_seed(const Experiment& ex, std::uint64_t seed, const std::filesystem::path& dir, std::ostream* log);
/// Continues the run in `dir` from its checkpoint and manifest.
SeedOutcome resume_dir(const std::filesystem::path& dir, std::ostream* log);

inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kCheckpointFile = "checkpoint.spkc";

}  // namespace spark::cli
