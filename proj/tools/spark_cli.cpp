// spark: run, sweep, resume and report decentralized training experiments.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "spark/errors.hpp"
#include "spark/experiment.hpp"

namespace fs = std::filesystem;
using namespace spark;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct RunArgs {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t workers = 0;
  bool quiet = false;
};

void add_run_args(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("config", a.config, "INI config file or a manifest.json from an earlier run")->required();
  cmd->add_option("--set", a.sets, "override one key (key=value); repeatable")->take_all();
  cmd->add_option("--seed", a.seeds, "run this seed; repeatable (replaces experiment.seeds)")->take_all();
  cmd->add_option("--out", a.out, "output root (overrides SPARK_OUT and output.dir)");
  cmd->add_option("--workers", a.workers, "worker threads per run");
  cmd->add_flag("--quiet", a.quiet, "no per-round progress lines");
}

// defaults < file < SPARK_OUT < --set < dedicated flags
cli::Experiment resolve(const RunArgs& a) {
  auto ex = cli::load_config(a.config);
  if (const char* env = std::getenv("SPARK_OUT"); env != nullptr && *env != '\0') ex.output_dir = env;
  for (const auto& s : a.sets) cli::apply_override(ex, s);
  if (!a.seeds.empty()) ex.seeds = a.seeds;
  if (!a.out.empty()) ex.output_dir = a.out;
  if (a.workers > 0) ex.run.workers = a.workers;
  ex.run.validate();
  return ex;
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

void print_outcome(const cli::Experiment& ex, std::uint64_t seed, const cli::SeedOutcome& o) {
  std::printf("%s seed %llu: final agg %.4f, client %.4f, rounds to %g%%: %s, %.6f GiB -> %s\n", ex.name.c_str(),
              static_cast<unsigned long long>(seed), o.report.final_agg_accuracy, o.report.final_client_accuracy,
              100.0 * ex.threshold, cli::threshold_text(o.report).c_str(), o.report.total_gib(), o.dir.c_str());
}

int cmd_run(const RunArgs& a) {
  const auto ex = resolve(a);
  const auto root = ex.output_dir / ex.name;
  std::cout << "config resolved; " << cli::compression_label(ex.run) << "\n";
  for (const auto seed : ex.effective_seeds()) {
    const auto o = cli::run_seed(ex, seed, root / seed_dir(seed), a.quiet ? nullptr : &std::cout);
    print_outcome(ex, seed, o);
  }
  return kOk;
}

struct SweepArgs {
  RunArgs run;
  std::string axis;
  std::string values;
  std::size_t jobs = 1;
};

std::vector<std::string> split_values(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string v;
  while (std::getline(ss, v, ',')) {
    const auto b = v.find_first_not_of(" \t");
    const auto e = v.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(v.substr(b, e - b + 1));
  }
  return out;
}

struct Job {
  cli::Experiment ex;
  std::string value;
  std::uint64_t seed = 0;
  fs::path dir;
};

int run_job(const Job& j, bool quiet) {
  try {
    cli::run_seed(j.ex, j.seed, j.dir, quiet ? nullptr : &std::cout);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << j.ex.name << " " << j.value << " seed " << j.seed << ": " << e.what() << "\n";
    return kRuntime;
  }
}

int cmd_sweep(const SweepArgs& a) {
  const auto base = resolve(a.run);
  const auto values = split_values(a.values);
  if (values.empty()) {
    std::cerr << "error: --values is empty\n";
    return kUsage;
  }
  bool known = false;
  for (const auto& k : cli::experiment_keys()) known = known || k.name == a.axis;
  if (!known) {
    std::cerr << "error: unknown sweep axis '" << a.axis << "'\n";
    return kUsage;
  }

  const auto root = base.output_dir / base.name;
  std::vector<Job> jobs;
  for (const auto& v : values) {
    cli::Experiment ex = base;
    cli::set_key(ex, a.axis, v);
    ex.run.validate();
    for (const auto seed : ex.effective_seeds()) {
      jobs.push_back({ex, v, seed, root / (a.axis + "=" + v) / seed_dir(seed)});
    }
  }

  int worst = kOk;
  if (a.jobs <= 1) {
    for (const auto& j : jobs) worst = std::max(worst, run_job(j, a.run.quiet));
  } else {
    std::cout.flush();
    std::map<pid_t, std::size_t> live;
    std::size_t next = 0;
    while (next < jobs.size() || !live.empty()) {
      while (next < jobs.size() && live.size() < a.jobs) {
        const pid_t pid = fork();
        if (pid < 0) throw Error("fork failed");
        if (pid == 0) {
          const int rc = run_job(jobs[next], a.run.quiet);
          std::cout.flush();
          std::_Exit(rc);
        }
        live[pid] = next++;
      }
      int status = 0;
      const pid_t done = wait(&status);
      if (done < 0) throw Error("wait failed");
      live.erase(done);
      const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : kRuntime;
      worst = std::max(worst, rc);
    }
  }

  fs::create_directories(root);
  std::ofstream summary(root / "summary.csv");
  summary << "axis,value,seed,final_agg_acc,final_client_acc,rounds_to_threshold,total_gib,dir\n";
  for (const auto& j : jobs) {
    std::ifstream is(j.dir / cli::kMetricsFile);
    if (!is) continue;
    const auto rep = cli::summarize(cli::read_metrics_csv(is, (j.dir / cli::kMetricsFile).string()), j.ex.threshold);
    char line[512];
    std::snprintf(line, sizeof(line), "%s,%s,%llu,%.6f,%.6f,%s,%.9f,%s\n", a.axis.c_str(), j.value.c_str(),
                  static_cast<unsigned long long>(j.seed), rep.final_agg_accuracy, rep.final_client_accuracy,
                  rep.rounds_to_threshold ? std::to_string(*rep.rounds_to_threshold).c_str() : "",
                  rep.total_gib(), j.dir.c_str());
    summary << line;
    std::cout << line;
  }
  std::cout << "summary: " << (root / "summary.csv").string() << "\n";
  return worst;
}

int cmd_report(const std::string& dir, std::optional<double> threshold, bool spark) {
  const fs::path d(dir);
  const auto csv_path = d / cli::kMetricsFile;
  const auto man_path = d / cli::kManifestFile;
  if (!fs::exists(csv_path) || !fs::exists(man_path)) {
    std::cerr << "error: " << dir << " needs " << cli::kMetricsFile << " and " << cli::kManifestFile << "\n";
    return kUsage;
  }
  std::ifstream ms(man_path);
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << man_path.string() << ": " << e.what() << "\n";
    return kUsage;
  }
  const auto exp = man.value("experiment", nlohmann::json::object());
  const double thr = threshold.value_or(exp.value("threshold", 0.85));

  std::ifstream is(csv_path);
  const auto rows = cli::read_metrics_csv(is, csv_path.string());
  const auto rep = cli::summarize(rows, thr);
  std::printf("run                        %s (seed %llu)\n", exp.value("name", std::string("?")).c_str(),
              static_cast<unsigned long long>(exp.value("seed", std::uint64_t{0})));
  std::printf("status                     %s\n", man.value("status", std::string("?")).c_str());
  std::printf("rounds                     %zu\n", rep.rounds);
  std::printf("final aggregated accuracy  %.4f\n", rep.final_agg_accuracy);
  std::printf("final client accuracy      %.4f\n", rep.final_client_accuracy);
  char label[64];
  std::snprintf(label, sizeof(label), "rounds to %g%%", 100.0 * thr);
  std::printf("%-27s%s\n", label, cli::threshold_text(rep).c_str());
  std::printf("communicated               %.6f GiB (%llu bytes)\n", rep.total_gib(),
              static_cast<unsigned long long>(rep.total_bytes));
  if (man.contains("projection")) {
    std::printf("projection                 %s\n", man["projection"].value("summary", std::string("?")).c_str());
  }
  if (spark) std::printf("accuracy                   |%s|\n", cli::sparkline(rows).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Projected-kernel decentralized learning simulator"};
  app.name("spark");
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "run one experiment (every seed in experiment.seeds)");
  add_run_args(run, run_args);

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "run a grid over one key; writes summary.csv");
  add_run_args(sweep, sweep_args.run);
  sweep->add_option("--axis", sweep_args.axis, "config key to vary, e.g. projection.k")->required();
  sweep->add_option("--values", sweep_args.values, "comma-separated values")->required();
  sweep->add_option("--jobs", sweep_args.jobs, "concurrent runs (separate processes)")->check(CLI::PositiveNumber);

  std::string report_dir;
  std::optional<double> report_threshold;
  bool report_spark = false;
  auto* report = app.add_subcommand("report", "summarize a finished run directory");
  report->add_option("run_dir", report_dir, "directory with metrics.csv and manifest.json")->required();
  report->add_option("--threshold", report_threshold, "accuracy threshold (default: the run's, else 0.85)")
      ->check(CLI::Range(0.0, 1.0));
  report->add_flag("--sparkline", report_spark, "print an ASCII accuracy curve");

  auto* defaults = app.add_subcommand("defaults", "print every config key with its default");

  std::string resume_dir;
  bool resume_quiet = false;
  auto* resume = app.add_subcommand("resume", "continue a run from its last checkpoint");
  resume->add_option("run_dir", resume_dir, "directory of an interrupted run")->required();
  resume->add_flag("--quiet", resume_quiet, "no per-round progress lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*run) return cmd_run(run_args);
    if (*sweep) return cmd_sweep(sweep_args);
    if (*report) return cmd_report(report_dir, report_threshold, report_spark);
    if (*defaults) {
      std::cout << cli::defaults_text();
      return kOk;
    }
    if (*resume) {
      const auto o = cli::resume_dir(resume_dir, resume_quiet ? nullptr : &std::cout);
      std::printf("resumed run finished: final agg %.4f, %s\n", o.report.final_agg_accuracy,
                  cli::threshold_text(o.report).c_str());
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
