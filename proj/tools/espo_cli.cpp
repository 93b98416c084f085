// Command-line front end: train, ablate, eval, compare, keys.
//
// Any config key can be given as a flag of the same name, e.g.
//   espo_cli train --config runs/base.cfg --variant ppo --env.vocab=8

#include <CLI11.hpp>

#include <iostream>
#include <set>
#include <sstream>

#include "espo/harness.hpp"

namespace {

using namespace espo;

std::map<std::string, std::string> key_overrides(const std::vector<std::string>& extras) {
  std::set<std::string> known;
  for (const auto& [k, help] : config_keys()) known.insert(k);
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.erase(eq);
    } else if (i + 1 < extras.size()) {
      value = extras[++i];
    } else {
      throw ConfigError("flag --" + key + " needs a value");
    }
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    out[key] = value;
  }
  return out;
}

void print_row(const MetricsRow& r) {
  if (r.step % 25 != 0) return;
  std::cerr << "step " << r.step << " tokens " << r.cumulative_tokens << " success "
            << format_double(r.success_rate) << " stop " << format_double(r.stop_rate) << " beta "
            << format_double(r.beta) << (r.warmup_active ? " (warmup)" : "") << '\n';
}

void print_summary(const RunSummary& s) {
  std::cout << s.method << " seed " << s.seed << ": tokens " << format_double(s.cumulative_tokens)
            << ", greedy " << (s.eval.greedy_success ? "success" : "failure") << ", sampled success "
            << format_double(s.eval.sampled_success) << ", stop events " << s.stop_events << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-stopping PPO on synthetic token MDPs"};
  app.require_subcommand(1);

  std::string config_path;
  bool resume = false, quiet = false;
  auto* train = app.add_subcommand("train", "Train one run");
  train->add_option("--config", config_path, "Config file (key = value lines)");
  train->add_flag("--resume", resume, "Continue from the checkpoint in out_dir");
  train->add_flag("--quiet", quiet, "No progress output");
  train->allow_extras();

  std::string seeds_text, variants_text;
  auto* ablate = app.add_subcommand("ablate", "Run the variant matrix from one base config");
  ablate->add_option("--config", config_path, "Base config file");
  ablate->add_option("--seeds", seeds_text, "Comma-separated seeds (default: the config seed)");
  ablate->add_option("--variants", variants_text, "Comma-separated variant ids (default: all)");
  ablate->add_flag("--quiet", quiet, "No progress output");
  ablate->allow_extras();

  std::string run_dir;
  std::size_t episodes = 1024;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Evaluate the checkpoint of a finished run");
  eval->add_option("run_dir", run_dir, "Run directory")->required();
  eval->add_option("--episodes", episodes, "Sampled episodes");
  eval->add_option("--seed", eval_seed, "Evaluation seed");

  std::vector<std::string> runs;
  std::string baseline = "ppo";
  auto* compare = app.add_subcommand("compare", "Summary table over run directories");
  compare->add_option("runs", runs, "Run directories or summary.json files")->required();
  compare->add_option("--baseline", baseline, "Baseline method for token savings");

  auto* keys = app.add_subcommand("keys", "List config keys and defaults");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto cfg = load_config(config_path, key_overrides(train->remaining()));
      const auto s = run_training(cfg, resume, quiet ? ProgressFn{} : ProgressFn{print_row});
      print_summary(s);
    } else if (ablate->parsed()) {
      AblationPlan plan;
      plan.base = load_config(config_path, key_overrides(ablate->remaining()));
      std::stringstream ss(seeds_text);
      for (std::string tok; std::getline(ss, tok, ',');) plan.seeds.push_back(std::stoull(tok));
      std::stringstream vs(variants_text);
      for (std::string tok; std::getline(vs, tok, ',');) plan.variants.push_back(parse_variant(tok));
      std::vector<std::filesystem::path> dirs;
      for (const auto& r : run_ablation(plan, quiet ? ProgressFn{} : ProgressFn{print_row})) {
        print_summary(r.summary);
        dirs.push_back(r.dir);
      }
      const bool has_ppo = std::any_of(dirs.begin(), dirs.end(), [](const auto& d) {
        return d.parent_path().filename() == "ppo";
      });
      if (dirs.size() >= 2) std::cout << format_comparison(compare_runs(dirs, has_ppo ? "ppo" : "espo"));
    } else if (eval->parsed()) {
      const auto r = evaluate_run(run_dir, episodes, eval_seed);
      std::cout << "greedy_success " << (r.greedy_success ? 1 : 0) << "\ngreedy_length "
                << r.greedy_length << "\nsampled_success " << format_double(r.sampled_success)
                << "\nsampled_mean_length " << format_double(r.sampled_mean_length) << '\n';
    } else if (compare->parsed()) {
      std::vector<std::filesystem::path> paths(runs.begin(), runs.end());
      std::cout << format_comparison(compare_runs(paths, baseline));
    } else if (keys->parsed()) {
      const auto defaults = to_key_values(RunConfig{});
      std::map<std::string, std::string> dv(defaults.begin(), defaults.end());
      for (const auto& [k, help] : config_keys()) {
        std::cout << k << " = " << dv[k] << "    # " << help << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
