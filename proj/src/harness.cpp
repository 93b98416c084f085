#include "espo/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

namespace espo {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "step",          "cumulative_tokens", "avg_trajectory_length_actual",
      "avg_trajectory_length_original",    "stop_rate",  "false_positive_rate",
      "mean_entropy",  "success_rate",      "beta",       "mu_g",
      "var_g",         "critic_loss",       "clip_fraction", "warmup_active"};
  return cols;
}

std::string metrics_header() {
  std::string out;
  for (const auto& c : metrics_columns()) {
    if (!out.empty()) out += ',';
    out += c;
  }
  return out;
}

std::string format_metrics_row(const MetricsRow& r) {
  std::string out;
  out += std::to_string(r.step);
  out += ',' + std::to_string(r.cumulative_tokens);
  for (double v : {r.avg_trajectory_length_actual, r.avg_trajectory_length_original, r.stop_rate,
                   r.false_positive_rate, r.mean_entropy, r.success_rate, r.beta, r.mu_g, r.var_g,
                   r.critic_loss, r.clip_fraction}) {
    out += ',' + format_double(v);
  }
  out += r.warmup_active ? ",1" : ",0";
  return out;
}

MetricsRow parse_metrics_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (cells.size() != metrics_columns().size()) {
    throw InvalidInput("metrics row has " + std::to_string(cells.size()) + " fields, expected " +
                       std::to_string(metrics_columns().size()));
  }
  MetricsRow r;
  r.step = std::stoi(cells[0]);
  r.cumulative_tokens = std::stoull(cells[1]);
  double* fields[] = {&r.avg_trajectory_length_actual, &r.avg_trajectory_length_original,
                      &r.stop_rate, &r.false_positive_rate, &r.mean_entropy, &r.success_rate,
                      &r.beta, &r.mu_g, &r.var_g, &r.critic_loss, &r.clip_fraction};
  for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = parse_double(cells[2 + i]);
  r.warmup_active = cells[13] == "1";
  return r;
}

MetricsWriter MetricsWriter::create(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write metrics file '" + path.string() + "'");
  out << metrics_header() << '\n' << std::flush;
  return MetricsWriter(std::move(out));
}

MetricsWriter MetricsWriter::resume(const fs::path& path, std::size_t rows) {
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    if (!in) throw Error("cannot read metrics file '" + path.string() + "' to resume");
    std::string line;
    while (keep.size() < rows + 1 && std::getline(in, line)) keep.push_back(line);
  }
  if (keep.empty() || keep.front() != metrics_header()) {
    throw InvalidInput("metrics file '" + path.string() + "' has an unexpected header");
  }
  if (keep.size() != rows + 1) {
    throw InvalidInput("metrics file '" + path.string() + "' has fewer rows than the checkpoint");
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to metrics file '" + path.string() + "'");
  return MetricsWriter(std::move(out));
}

void MetricsWriter::write(const MetricsRow& row) {
  out_ << format_metrics_row(row) << '\n' << std::flush;
  if (!out_) throw Error("metrics write failed");
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read metrics file '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != metrics_header()) throw InvalidInput("unexpected metrics header in " + path.string());
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

double median(std::vector<double> v) {
  if (v.empty()) throw InvalidInput("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const fs::path& dir, const RunConfig& cfg, const std::string& started,
                    std::optional<double> wall_seconds, int resumed_from) {
  json m;
  m["config_hash"] = config_hash(cfg);
  m["method"] = to_string(cfg.variant);
  m["seeds"] = {{"run", cfg.seed}, {"env", cfg.env.seed}};
  m["code_version"] = kVersion;
  m["started_utc"] = started;
  m["wall_seconds"] = optional_json(wall_seconds);
  m["resumed_from_step"] = resumed_from;
  m["config"] = json::object();
  for (const auto& [k, v] : to_key_values(cfg)) m["config"][k] = v;
  write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace

void write_summary(const fs::path& path, const RunSummary& s) {
  json j;
  j["method"] = s.method;
  j["seed"] = s.seed;
  j["config_hash"] = s.config_hash;
  j["env_fingerprint"] = s.env_fingerprint;
  j["steps"] = s.steps;
  j["cumulative_tokens"] = s.cumulative_tokens;
  j["greedy_success"] = s.eval.greedy_success;
  j["greedy_length"] = s.eval.greedy_length;
  j["sampled_success"] = s.eval.sampled_success;
  j["sampled_mean_length"] = s.eval.sampled_mean_length;
  j["stop_events"] = s.stop_events;
  j["median_stop_value"] = optional_json(s.median_stop_value);
  j["median_stop_score"] = optional_json(s.median_stop_score);
  j["wall_seconds"] = s.wall_seconds;
  write_text_atomic(path, j.dump(2) + "\n");
}

RunSummary read_summary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read summary '" + path.string() + "'");
  json j;
  try {
    in >> j;
    RunSummary s;
    s.method = j.at("method").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.config_hash = j.value("config_hash", "");
    s.env_fingerprint = j.at("env_fingerprint").get<std::string>();
    s.steps = j.value("steps", 0);
    s.cumulative_tokens = j.at("cumulative_tokens").get<double>();
    s.eval.greedy_success = j.value("greedy_success", false);
    s.eval.greedy_length = j.value("greedy_length", std::size_t{0});
    s.eval.sampled_success = j.value("sampled_success", 0.0);
    s.eval.sampled_mean_length = j.value("sampled_mean_length", 0.0);
    s.stop_events = j.value("stop_events", std::size_t{0});
    if (j.contains("median_stop_value")) s.median_stop_value = optional_from(j["median_stop_value"]);
    if (j.contains("median_stop_score")) s.median_stop_score = optional_from(j["median_stop_score"]);
    s.wall_seconds = j.value("wall_seconds", 0.0);
    return s;
  } catch (const json::exception& e) {
    throw InvalidInput("malformed summary '" + path.string() + "': " + e.what());
  }
}

RunSummary run_training(const RunConfig& cfg, bool resume, const ProgressFn& progress) {
  validate_or_throw(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const fs::path dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());

  Trainer trainer(cfg);
  const fs::path metrics_path = dir / "metrics.csv";
  const fs::path ckpt_path = dir / "checkpoint.txt";
  int resumed_from = 0;
  std::optional<MetricsWriter> writer;
  if (resume) {
    std::ifstream ck(ckpt_path);
    if (!ck) throw Error("no checkpoint to resume from in '" + dir.string() + "'");
    trainer.load_checkpoint(ck);
    resumed_from = trainer.completed_steps();
    writer.emplace(MetricsWriter::resume(metrics_path, static_cast<std::size_t>(resumed_from)));
  } else {
    writer.emplace(MetricsWriter::create(metrics_path));
  }
  write_text_atomic(dir / "config.txt", serialize_config(cfg));
  write_manifest(dir, cfg, started, std::nullopt, resumed_from);

  auto checkpoint = [&] {
    std::ostringstream os;
    trainer.save_checkpoint(os);
    write_text_atomic(ckpt_path, os.str());
  };

  while (!trainer.done()) {
    const auto out = trainer.step();
    writer->write(out.metrics);
    if (progress) progress(out.metrics);
    if (cfg.checkpoint_every > 0 && trainer.completed_steps() % cfg.checkpoint_every == 0) checkpoint();
  }
  checkpoint();

  RunSummary s;
  s.method = to_string(cfg.variant);
  s.seed = cfg.seed;
  s.config_hash = config_hash(cfg);
  s.env_fingerprint = trainer.env().fingerprint();
  s.steps = trainer.completed_steps();
  s.cumulative_tokens = static_cast<double>(trainer.cumulative_tokens());
  s.eval = evaluate(trainer.actor(), trainer.env(), cfg.t_max, cfg.eval_episodes, cfg.seed);
  s.stop_events = trainer.stop_values().size();
  if (!trainer.stop_values().empty()) {
    s.median_stop_value = median(trainer.stop_values());
    s.median_stop_score = median(trainer.stop_scores());
  }
  s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_summary(dir / "summary.json", s);
  write_manifest(dir, cfg, started, s.wall_seconds, resumed_from);
  return s;
}

EvalResult evaluate_run(const fs::path& run_dir, std::size_t episodes, std::uint64_t seed) {
  const RunConfig cfg = load_config((run_dir / "config.txt").string(), {}, false);
  Trainer trainer(cfg);
  std::ifstream ck(run_dir / "checkpoint.txt");
  if (!ck) throw InvalidInput("no checkpoint in '" + run_dir.string() + "'");
  trainer.load_checkpoint(ck);
  return evaluate(trainer.actor(), trainer.env(), cfg.t_max, episodes, seed);
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

RunConfig calibrated(const RunConfig& base, const RunSummary& reference,
                     const fs::path& reference_metrics) {
  RunConfig c = base;
  if (reference.median_stop_value && reference.median_stop_score) {
    c.value_only_threshold = *reference.median_stop_value;
    c.regret_only_threshold = *reference.median_stop_score;
  } else {
    warn("reference run has no stop events; single-signal thresholds keep their configured values");
  }
  c.random_stop_trace = reference_metrics.string();
  return c;
}

std::vector<AblationRun> run_ablation(const AblationPlan& plan, const ProgressFn& progress) {
  const auto variants = plan.variants.empty() ? all_variants() : plan.variants;
  const auto seeds = plan.seeds.empty() ? std::vector<std::uint64_t>{plan.base.seed} : plan.seeds;
  const fs::path root = plan.base.out_dir;
  std::vector<AblationRun> out;
  for (std::uint64_t seed : seeds) {
    const std::string seed_dir = "seed_" + std::to_string(seed);
    RunConfig ref = plan.base;
    ref.variant = Variant::Espo;
    ref.seed = seed;
    ref.out_dir = (root / "reference" / seed_dir).string();
    const RunSummary ref_summary = run_training(ref, false, progress);

    RunConfig base = calibrated(plan.base, ref_summary, fs::path(ref.out_dir) / "metrics.csv");
    base.seed = seed;
    for (Variant v : variants) {
      RunConfig c = base;
      c.variant = v;
      c.out_dir = (root / to_string(v) / seed_dir).string();
      out.push_back({v, seed, c.out_dir, run_training(c, false, progress)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

double token_saving_percent(double tokens, double baseline_tokens) {
  if (!(baseline_tokens > 0.0)) throw InvalidInput("baseline token count must be positive");
  return 100.0 * (1.0 - tokens / baseline_tokens);
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  double sum = 0.0;
  for (double x : v) sum += x;
  m.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double sq = 0.0;
    for (double x : v) sq += (x - m.mean) * (x - m.mean);
    m.stddev = std::sqrt(sq / static_cast<double>(v.size() - 1));
  }
  return m;
}

Comparison compare_summaries(const std::vector<RunSummary>& runs, const std::string& baseline) {
  if (runs.size() < 2) throw InvalidInput("compare needs at least two runs");
  for (const auto& r : runs) {
    if (r.env_fingerprint != runs.front().env_fingerprint) {
      throw InvalidInput("runs use different environments: '" + runs.front().env_fingerprint +
                         "' vs '" + r.env_fingerprint + "'");
    }
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunSummary*>> groups;
  for (const auto& r : runs) {
    if (!groups.count(r.method)) order.push_back(r.method);
    groups[r.method].push_back(&r);
  }
  if (!groups.count(baseline)) throw InvalidInput("baseline method '" + baseline + "' not among runs");

  Comparison c;
  c.baseline = baseline;
  for (const auto& method : order) {
    std::vector<double> greedy, sampled, tokens;
    for (const auto* r : groups[method]) {
      greedy.push_back(r->eval.greedy_success ? 1.0 : 0.0);
      sampled.push_back(r->eval.sampled_success);
      tokens.push_back(r->cumulative_tokens);
    }
    c.rows.push_back({method, mean_std(greedy), mean_std(sampled), mean_std(tokens), 0.0});
  }
  double base_tokens = 0.0;
  for (const auto& row : c.rows) {
    if (row.method == baseline) base_tokens = row.cumulative_tokens.mean;
  }
  for (auto& row : c.rows) row.token_saving_percent = token_saving_percent(row.cumulative_tokens.mean, base_tokens);
  return c;
}

Comparison compare_runs(const std::vector<fs::path>& run_dirs, const std::string& baseline) {
  std::vector<RunSummary> runs;
  for (const auto& p : run_dirs) {
    runs.push_back(read_summary(fs::is_directory(p) ? p / "summary.json" : p));
  }
  return compare_summaries(runs, baseline);
}

std::string format_comparison(const Comparison& c) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "method" << std::right << std::setw(4) << "n" << std::setw(20)
     << "greedy_success" << std::setw(20) << "sampled_success" << std::setw(26) << "cumulative_tokens"
     << std::setw(12) << "saving_%" << '\n';
  os << std::fixed;
  for (const auto& r : c.rows) {
    std::ostringstream g, s, t;
    g << std::fixed << std::setprecision(3) << r.greedy_success.mean << " +- " << r.greedy_success.stddev;
    s << std::fixed << std::setprecision(3) << r.sampled_success.mean << " +- " << r.sampled_success.stddev;
    t << std::fixed << std::setprecision(2) << r.cumulative_tokens.mean << " +- " << r.cumulative_tokens.stddev;
    os << std::left << std::setw(18) << (r.method == c.baseline ? r.method + "*" : r.method) << std::right
       << std::setw(4) << r.greedy_success.n << std::setw(20) << g.str() << std::setw(20) << s.str()
       << std::setw(26) << t.str() << std::setw(12) << std::setprecision(1) << r.token_saving_percent
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// False-positive measurement
// ---------------------------------------------------------------------------

std::vector<double> false_positive_trace(const TabularActor& actor, const TabularCritic& critic,
                                         const Environment& env, const StopperSnapshot& snapshot,
                                         const RolloutSettings& base, std::size_t batches,
                                         std::size_t batch_size, bool disabled) {
  RolloutSettings settings = base;
  settings.mode = disabled ? CollectionMode::disabled() : CollectionMode::counterfactual();
  std::vector<double> out;
  out.reserve(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto batch = collect_batch(actor, critic, snapshot, env, settings, b, batch_size);
    out.push_back(false_positive_rate(batch, settings.mode));
  }
  return out;
}

}  // namespace espo
