#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "espo/config.hpp"
#include "espo/trainer.hpp"

namespace espo {

extern const char* const kVersion;

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

const std::vector<std::string>& metrics_columns();
std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);
MetricsRow parse_metrics_row(const std::string& line);

/// Appends rows and flushes after each one.
class MetricsWriter {
 public:
  /// Truncates (or creates) the file and writes the header.
  static MetricsWriter create(const std::filesystem::path& path);
  /// Keeps the header and the first `rows` data rows, drops the rest, and
  /// continues appending after them.
  static MetricsWriter resume(const std::filesystem::path& path, std::size_t rows);

  void write(const MetricsRow& row);

 private:
  explicit MetricsWriter(std::ofstream out) : out_(std::move(out)) {}
  std::ofstream out_;
};

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

struct RunSummary {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string env_fingerprint;
  int steps = 0;
  double cumulative_tokens = 0.0;
  EvalResult eval;
  std::size_t stop_events = 0;
  std::optional<double> median_stop_value;
  std::optional<double> median_stop_score;
  double wall_seconds = 0.0;
};

void write_summary(const std::filesystem::path& path, const RunSummary& s);
RunSummary read_summary(const std::filesystem::path& path);

/// Per-step progress callback; may be empty.
using ProgressFn = std::function<void(const MetricsRow&)>;

/// Trains one run into cfg.out_dir: config.txt, manifest.json, metrics.csv,
/// checkpoint.txt (every cfg.checkpoint_every steps and at the end) and
/// summary.json. With `resume`, continues from the directory's checkpoint.
/// The output directory is checked for writability before any training.
RunSummary run_training(const RunConfig& cfg, bool resume = false, const ProgressFn& progress = {});

/// Loads the config and checkpoint saved in `run_dir` and re-evaluates.
EvalResult evaluate_run(const std::filesystem::path& run_dir, std::size_t episodes,
                        std::uint64_t seed);

double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationPlan {
  RunConfig base;
  std::vector<Variant> variants;  // empty means all
  std::vector<std::uint64_t> seeds;
};

struct AblationRun {
  Variant variant;
  std::uint64_t seed;
  std::filesystem::path dir;
  RunSummary summary;
};

/// Sets the single-signal thresholds to the reference run's median V and z at
/// stop events and points the random-stop variant at its stop-rate trace.
/// The keys touched are read only by the variants they calibrate.
RunConfig calibrated(const RunConfig& base, const RunSummary& reference,
                     const std::filesystem::path& reference_metrics);

/// Per seed: an ESPO reference run, then every requested variant from the
/// calibrated base, each in <base.out_dir>/<variant>/seed_<n>.
std::vector<AblationRun> run_ablation(const AblationPlan& plan, const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// 100 * (1 - tokens / baseline_tokens).
double token_saving_percent(double tokens, double baseline_tokens);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for one value
  std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

struct MethodRow {
  std::string method;
  MeanStd greedy_success;
  MeanStd sampled_success;
  MeanStd cumulative_tokens;
  double token_saving_percent = 0.0;
};

struct Comparison {
  std::string baseline;
  std::vector<MethodRow> rows;
};

/// Groups summaries by method and aggregates over seeds. Throws InvalidInput
/// for fewer than two runs, mismatched environment fingerprints, or a
/// baseline method that is not present.
Comparison compare_summaries(const std::vector<RunSummary>& runs, const std::string& baseline);
Comparison compare_runs(const std::vector<std::filesystem::path>& run_dirs, const std::string& baseline);

std::string format_comparison(const Comparison& c);

// ---------------------------------------------------------------------------
// False-positive measurement
// ---------------------------------------------------------------------------

/// Per-batch false-positive rates for a fixed actor and critic under a fixed
/// snapshot, batches collected in counterfactual mode (or with stopping
/// disabled when `disabled` is set).
std::vector<double> false_positive_trace(const TabularActor& actor, const TabularCritic& critic,
                                         const Environment& env, const StopperSnapshot& snapshot,
                                         const RolloutSettings& base, std::size_t batches,
                                         std::size_t batch_size, bool disabled = false);

}  // namespace espo
