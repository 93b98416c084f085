#include "espo/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace espo {

namespace {

struct KeySpec {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool affects_results = true;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) { return parse_double(trim(v)); }

std::uint64_t to_u64(const std::string& v) {
  const auto t = trim(v);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
    throw InvalidInput("not a non-negative integer: '" + v + "'");
  }
  return std::stoull(t);
}

int to_int(const std::string& v) {
  const auto t = trim(v);
  std::size_t pos = 0;
  const int out = std::stoi(t, &pos);
  if (pos != t.size()) throw InvalidInput("not an integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw InvalidInput("not a boolean: '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

std::vector<TokenId> to_tokens(const std::string& v) {
  std::vector<TokenId> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(TokenId{static_cast<std::uint32_t>(to_u64(item))});
  }
  return out;
}

std::string from_tokens(const std::vector<TokenId>& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seq[i].index);
  }
  return out;
}

#define DOUBLE_KEY(key, field, help)                                             \
  KeySpec {                                                                      \
    key, help, [](const RunConfig& c) { return format_double(c.field); },        \
        [](RunConfig& c, const std::string& v) { c.field = to_double(v); }       \
  }
#define INT_KEY(key, field, help)                                                \
  KeySpec {                                                                      \
    key, help, [](const RunConfig& c) { return std::to_string(c.field); },       \
        [](RunConfig& c, const std::string& v) { c.field = to_int(v); }          \
  }
#define SIZE_KEY(key, field, help)                                               \
  KeySpec {                                                                      \
    key, help, [](const RunConfig& c) { return std::to_string(c.field); },       \
        [](RunConfig& c, const std::string& v) { c.field = to_u64(v); }          \
  }
#define BOOL_KEY(key, field, help)                                               \
  KeySpec {                                                                      \
    key, help, [](const RunConfig& c) { return from_bool(c.field); },            \
        [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }         \
  }

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> keys = [] {
    std::vector<KeySpec> k;
    k.push_back({"variant", "ppo | espo | espo_no_warmup | espo_no_penalty | value_only | regret_only | random_stop",
                 [](const RunConfig& c) { return std::string(to_string(c.variant)); },
                 [](RunConfig& c, const std::string& v) { c.variant = parse_variant(trim(v)); }});
    k.push_back({"env.kind", "trap_chain | recoverable_branch",
                 [](const RunConfig& c) {
                   return std::string(c.env.kind == EnvKind::TrapChain ? "trap_chain"
                                                                       : "recoverable_branch");
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto t = trim(v);
                   if (t == "trap_chain") c.env.kind = EnvKind::TrapChain;
                   else if (t == "recoverable_branch") c.env.kind = EnvKind::RecoverableBranch;
                   else throw InvalidInput("unknown environment kind '" + t + "'");
                 }});
    k.push_back(SIZE_KEY("env.vocab", env.vocab, "vocabulary size K"));
    k.push_back(SIZE_KEY("env.length", env.length, "number of correct tokens L"));
    k.push_back({"env.padding", "doomed-branch length; 'horizon' pads to t_max",
                 [](const RunConfig& c) {
                   return c.env.padding ? std::to_string(*c.env.padding) : std::string("horizon");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (trim(v) == "horizon") c.env.padding.reset();
                   else c.env.padding = to_u64(v);
                 }});
    k.push_back(SIZE_KEY("env.repair_window", env.repair_window, "recoverable branch: repair window m"));
    k.push_back(SIZE_KEY("env.seed", env.seed, "seed for generated target/repair sequences and prior"));
    k.push_back({"env.target", "explicit comma-separated target tokens (empty: generated)",
                 [](const RunConfig& c) { return from_tokens(c.env.target); },
                 [](RunConfig& c, const std::string& v) { c.env.target = to_tokens(v); }});
    k.push_back(DOUBLE_KEY("env.prior.correct_bonus", env.prior.correct_bonus, "prior logit bonus of the correct chain token"));
    k.push_back(DOUBLE_KEY("env.prior.hard_fraction", env.prior.hard_fraction, "share of chain positions with a distractor token"));
    k.push_back(DOUBLE_KEY("env.prior.distractor_bonus", env.prior.distractor_bonus, "prior logit bonus of the distractor token"));
    k.push_back(DOUBLE_KEY("env.prior.doom_spread", env.prior.doom_spread, "stddev of prior logits off the chain"));
    k.push_back(DOUBLE_KEY("env.prior.repair_bonus", env.prior.repair_bonus, "prior logit bonus of the repair token"));
    k.push_back({"actor_init", "zero | prior",
                 [](const RunConfig& c) {
                   return std::string(c.actor_init == ActorInit::Zero ? "zero" : "prior");
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto t = trim(v);
                   if (t == "zero") c.actor_init = ActorInit::Zero;
                   else if (t == "prior") c.actor_init = ActorInit::Prior;
                   else throw InvalidInput("unknown actor_init '" + t + "'");
                 }});
    k.push_back(SIZE_KEY("t_max", t_max, "rollout horizon"));
    k.push_back(SIZE_KEY("batch_size", batch_size, "trajectories per batch"));
    k.push_back(INT_KEY("total_steps", total_steps, "training steps"));
    k.push_back(SIZE_KEY("seed", seed, "master seed"));
    {
      auto w = SIZE_KEY("workers", workers, "rollout threads (results do not depend on it)");
      w.affects_results = false;
      k.push_back(w);
    }
    k.push_back(DOUBLE_KEY("r_fail", r_fail, "reward at an early stop"));
    k.push_back(DOUBLE_KEY("alpha_ema", alpha_ema, "EMA coefficient for regret statistics"));
    k.push_back(DOUBLE_KEY("alpha_s", alpha_s, "smoothing coefficient of the stopping score"));
    k.push_back(DOUBLE_KEY("beta_init", beta_init, "initial threshold multiplier"));
    k.push_back(DOUBLE_KEY("beta_min", beta_min, "lower clip of beta"));
    k.push_back(DOUBLE_KEY("beta_max", beta_max, "upper clip of beta and anneal start"));
    k.push_back(DOUBLE_KEY("eta_beta", eta_beta, "controller gain"));
    k.push_back(DOUBLE_KEY("target_rate", target_rate, "target stop rate"));
    k.push_back(DOUBLE_KEY("value_floor", value_floor, "value floor epsilon in the gate"));
    k.push_back(DOUBLE_KEY("clip_bound", clip_bound, "clip bound c of normalized regret"));
    k.push_back(DOUBLE_KEY("stabilizer", stabilizer, "variance stabilizer delta"));
    k.push_back(DOUBLE_KEY("warmup.abs_threshold", warmup_abs_threshold, "warmup: |critic loss| threshold"));
    k.push_back(DOUBLE_KEY("warmup.delta_threshold", warmup_delta_threshold, "warmup: |loss change| threshold"));
    k.push_back(INT_KEY("warmup.consecutive", warmup_consecutive, "warmup: consecutive hits required"));
    k.push_back(DOUBLE_KEY("warmup.cap_fraction", warmup_cap_fraction, "warmup: unconditional exit fraction of total steps"));
    k.push_back(DOUBLE_KEY("anneal_fraction", anneal_fraction, "anneal length as a fraction of post-warmup steps"));
    k.push_back(BOOL_KEY("stopping_disabled", stopping_disabled, "never stop (reduces to full-horizon collection)"));
    k.push_back(BOOL_KEY("counterfactual", counterfactual, "simulate truncation by masking, keep generating"));
    k.push_back(DOUBLE_KEY("value_only.threshold", value_only_threshold, "value_only: stop when V < threshold"));
    k.push_back(DOUBLE_KEY("regret_only.threshold", regret_only_threshold, "regret_only: stop when z > threshold"));
    k.push_back(DOUBLE_KEY("random_stop.rate", random_stop_rate, "random_stop: target trajectory stop rate"));
    k.push_back({"random_stop.trace", "random_stop: metrics CSV whose stop_rate column is replayed",
                 [](const RunConfig& c) { return c.random_stop_trace; },
                 [](RunConfig& c, const std::string& v) { c.random_stop_trace = trim(v); }});
    k.push_back(DOUBLE_KEY("random_stop.gain", random_stop_gain, "random_stop: calibration gain on log hazard"));
    k.push_back(DOUBLE_KEY("ppo.clip", ppo.clip_ratio, "PPO clip ratio"));
    k.push_back(DOUBLE_KEY("gamma", ppo.gamma, "discount"));
    k.push_back(DOUBLE_KEY("lambda", ppo.lambda, "GAE lambda"));
    k.push_back(INT_KEY("ppo.epochs", ppo.epochs_per_batch, "PPO epochs per batch"));
    k.push_back(DOUBLE_KEY("lr_actor", ppo.lr_actor, "actor step size"));
    k.push_back(DOUBLE_KEY("lr_critic", ppo.lr_critic, "critic step size"));
    k.push_back(BOOL_KEY("adv_normalize", ppo.advantage_normalize, "whiten advantages per batch"));
    k.push_back(DOUBLE_KEY("lr_reference", lr_reference, "reference learning rate for large-model training (unused)"));
    {
      KeySpec out{"out_dir", "output directory",
                  [](const RunConfig& c) { return c.out_dir; },
                  [](RunConfig& c, const std::string& v) { c.out_dir = trim(v); }};
      out.affects_results = false;
      k.push_back(out);
    }
    {
      auto ck = INT_KEY("checkpoint_every", checkpoint_every, "checkpoint interval in steps (0: end only)");
      ck.affects_results = false;
      k.push_back(ck);
    }
    k.push_back(SIZE_KEY("eval_episodes", eval_episodes, "sampled episodes in the final evaluation"));
    return k;
  }();
  return keys;
}

#undef DOUBLE_KEY
#undef INT_KEY
#undef SIZE_KEY
#undef BOOL_KEY

const KeySpec& find_key(const std::string& key) {
  for (const auto& k : registry()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const char* to_string(Variant v) {
  switch (v) {
    case Variant::Ppo: return "ppo";
    case Variant::Espo: return "espo";
    case Variant::EspoNoWarmup: return "espo_no_warmup";
    case Variant::EspoNoPenalty: return "espo_no_penalty";
    case Variant::ValueOnly: return "value_only";
    case Variant::RegretOnly: return "regret_only";
    case Variant::RandomStop: return "random_stop";
  }
  return "unknown";
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Ppo,        Variant::Espo,     Variant::EspoNoWarmup,
                                      Variant::EspoNoPenalty, Variant::ValueOnly, Variant::RegretOnly,
                                      Variant::RandomStop};
  return v;
}

Variant parse_variant(const std::string& id) {
  for (auto v : all_variants()) {
    if (id == to_string(v)) return v;
  }
  // Single-letter aliases: A is full espo, B to F the ablations in README order.
  if (id == "A") return Variant::Espo;
  if (id == "B") return Variant::EspoNoWarmup;
  if (id == "C") return Variant::EspoNoPenalty;
  if (id == "D") return Variant::ValueOnly;
  if (id == "E") return Variant::RegretOnly;
  if (id == "F") return Variant::RandomStop;
  throw ConfigError("unknown variant '" + id + "'");
}

std::vector<std::pair<std::string, std::string>> to_key_values(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : registry()) out.emplace_back(k.name, k.get(cfg));
  return out;
}

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const auto keys = [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : registry()) out.emplace_back(k.name, k.help);
    return out;
  }();
  return keys;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& spec = find_key(key);
  try {
    spec.set(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

std::string env_var_name(const std::string& key) {
  std::string out = "ESPO_";
  for (char c : key) {
    out += (c == '.') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return out;
}

RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& overrides,
                      bool read_environment) {
  RunConfig cfg;
  std::vector<std::string> errors;
  auto apply = [&](const std::string& k, const std::string& v, const std::string& origin) {
    try {
      set_key(cfg, k, v);
    } catch (const ConfigError& e) {
      errors.push_back(origin + ": " + e.what());
    }
  };
  if (read_environment) {
    for (const auto& [name, help] : config_keys()) {
      if (const char* v = std::getenv(env_var_name(name).c_str())) apply(name, v, "environment");
    }
  }
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [k, v] : parse_config_text(ss.str())) apply(k, v, path);
  }
  for (const auto& [k, v] : overrides) apply(k, v, "command line");
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> e;
  auto in_open01 = [](double x) { return x > 0.0 && x < 1.0; };
  if (c.env.vocab < 2) e.push_back("env.vocab must be >= 2");
  if (c.env.length < 1) e.push_back("env.length must be >= 1");
  if (!c.env.target.empty()) {
    if (c.env.target.size() != c.env.length) e.push_back("env.target must have env.length tokens");
    for (auto t : c.env.target) {
      if (t.index >= c.env.vocab) {
        e.push_back("env.target token " + std::to_string(t.index) + " outside vocabulary");
        break;
      }
    }
  }
  if (c.env.kind == EnvKind::RecoverableBranch && c.env.repair_window < 1) {
    e.push_back("env.repair_window must be >= 1 for recoverable_branch");
  }
  if (!(c.env.prior.hard_fraction >= 0.0 && c.env.prior.hard_fraction <= 1.0)) {
    e.push_back("env.prior.hard_fraction must lie in [0, 1]");
  }
  if (c.t_max < 1) e.push_back("t_max must be >= 1");
  if (c.batch_size < 1) e.push_back("batch_size must be >= 1");
  if (c.total_steps < 1) e.push_back("total_steps must be >= 1");
  if (c.workers < 1) e.push_back("workers must be >= 1");
  if (!std::isfinite(c.r_fail)) e.push_back("r_fail must be finite");
  if (!in_open01(c.alpha_ema)) e.push_back("alpha_ema must lie in (0, 1)");
  if (!in_open01(c.alpha_s)) e.push_back("alpha_s must lie in (0, 1)");
  if (c.beta_min > c.beta_max) e.push_back("beta_min must not exceed beta_max");
  if (c.beta_init < c.beta_min || c.beta_init > c.beta_max) {
    e.push_back("beta_init must lie in [beta_min, beta_max]");
  }
  if (c.eta_beta < 0.0) e.push_back("eta_beta must be >= 0");
  if (!(c.target_rate >= 0.0 && c.target_rate <= 1.0)) e.push_back("target_rate must lie in [0, 1]");
  if (!(c.value_floor > 0.0)) e.push_back("value_floor must be > 0");
  if (!(c.clip_bound > 0.0)) e.push_back("clip_bound must be > 0");
  if (!(c.stabilizer > 0.0)) e.push_back("stabilizer must be > 0");
  if (c.warmup_consecutive < 1) e.push_back("warmup.consecutive must be >= 1");
  if (!(c.warmup_cap_fraction >= 0.0 && c.warmup_cap_fraction <= 1.0)) {
    e.push_back("warmup.cap_fraction must lie in [0, 1]");
  }
  if (!(c.anneal_fraction >= 0.0 && c.anneal_fraction <= 1.0)) {
    e.push_back("anneal_fraction must lie in [0, 1]");
  }
  if (!(c.random_stop_rate >= 0.0 && c.random_stop_rate <= 1.0)) {
    e.push_back("random_stop.rate must lie in [0, 1]");
  }
  if (!(c.random_stop_gain >= 0.0)) e.push_back("random_stop.gain must be >= 0");
  if (c.counterfactual && c.variant == Variant::RandomStop) {
    e.push_back("counterfactual mode is not defined for random_stop");
  }
  if (!in_open01(c.ppo.clip_ratio)) e.push_back("ppo.clip must lie in (0, 1)");
  if (!(c.ppo.gamma > 0.0 && c.ppo.gamma <= 1.0)) e.push_back("gamma must lie in (0, 1]");
  if (!(c.ppo.lambda > 0.0 && c.ppo.lambda <= 1.0)) e.push_back("lambda must lie in (0, 1]");
  if (c.ppo.epochs_per_batch < 1) e.push_back("ppo.epochs must be >= 1");
  if (!(c.ppo.lr_actor >= 0.0)) e.push_back("lr_actor must be >= 0");
  if (!(c.ppo.lr_critic >= 0.0)) e.push_back("lr_critic must be >= 0");
  if (c.checkpoint_every < 0) e.push_back("checkpoint_every must be >= 0");
  if (c.out_dir.empty()) e.push_back("out_dir must not be empty");
  return e;
}

void validate_or_throw(const RunConfig& cfg) {
  const auto errors = validate(cfg);
  if (errors.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : to_key_values(cfg)) out += k + " = " + v + "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& k : registry()) {
    if (!k.affects_results) continue;
    for (char c : k.name + "=" + k.get(cfg) + "\n") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  for (const auto& k : registry()) {
    if (k.get(a) != k.get(b)) out.push_back(k.name);
  }
  return out;
}

}  // namespace espo
