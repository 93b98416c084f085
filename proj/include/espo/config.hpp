#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "espo/core.hpp"
#include "espo/envs.hpp"

namespace espo {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class Variant { Ppo, Espo, EspoNoWarmup, EspoNoPenalty, ValueOnly, RegretOnly, RandomStop };

const char* to_string(Variant v);
Variant parse_variant(const std::string& id);
const std::vector<Variant>& all_variants();

enum class ActorInit { Zero, Prior };

struct PpoConfig {
  double clip_ratio = 0.2;
  double gamma = 1.0;
  double lambda = 1.0;
  int epochs_per_batch = 1;
  double lr_actor = 0.05;
  double lr_critic = 0.1;
  bool advantage_normalize = false;
};

/// Complete description of one training run. Every field has a flat key
/// (see config_keys()); defaults follow the reference hyperparameters
/// where it applies and desk-scale choices elsewhere.
struct RunConfig {
  Variant variant = Variant::Espo;
  EnvSpec env;
  ActorInit actor_init = ActorInit::Zero;

  std::size_t t_max = 64;
  std::size_t batch_size = 64;
  int total_steps = 300;
  std::uint64_t seed = 1;
  std::size_t workers = 1;

  // Stopper.
  double r_fail = -1.0;
  double alpha_ema = 0.99;
  double alpha_s = 0.9;
  double beta_init = 7.0;
  double beta_min = 0.0;
  double beta_max = 10.0;
  double eta_beta = 0.1;
  double target_rate = 0.25;
  double value_floor = 0.2;
  double clip_bound = 5.0;
  double stabilizer = 1e-8;
  double warmup_abs_threshold = 0.5;
  double warmup_delta_threshold = 0.1;
  int warmup_consecutive = 3;
  double warmup_cap_fraction = 0.10;
  double anneal_fraction = 0.10;
  bool stopping_disabled = false;
  bool counterfactual = false;

  // Single-signal ablation thresholds and random-stop calibration.
  double value_only_threshold = 0.0;
  double regret_only_threshold = 1.0;
  double random_stop_rate = 0.25;
  std::string random_stop_trace;
  double random_stop_gain = 2.0;

  PpoConfig ppo;
  /// Learning rate typical of large-model training with this method.
  /// Recorded for reference only; tabular learning uses ppo.lr_actor/lr_critic.
  double lr_reference = 1e-6;

  std::string out_dir = "runs/default";
  int checkpoint_every = 0;
  std::size_t eval_episodes = 1024;
};

/// Flat key -> canonical text value, in a fixed order.
std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& cfg);

/// Every accepted key with a one-line description.
const std::vector<std::pair<std::string, std::string>>& config_keys();

/// Sets one key. Throws ConfigError for unknown keys or unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);

/// "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// Defaults, then ESPO_* environment variables, then the file, then explicit
/// overrides (highest precedence).
RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& overrides,
                      bool read_environment = true);

/// All problems with the config; empty when it is valid.
std::vector<std::string> validate(const RunConfig& cfg);
void validate_or_throw(const RunConfig& cfg);

/// FNV-1a over the canonical key/value text, excluding output location and
/// scheduling keys that do not affect results.
std::string config_hash(const RunConfig& cfg);

/// Keys whose values differ between the two configs.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

std::string serialize_config(const RunConfig& cfg);

/// Name of the environment variable that overrides `key` (ESPO_ prefix,
/// upper case, '.' -> '_').
std::string env_var_name(const std::string& key);

}  // namespace espo
