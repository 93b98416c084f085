#include "espo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace espo {

// ---------------------------------------------------------------------------
// Advantage estimation
// ---------------------------------------------------------------------------

std::vector<double> td_errors(std::span<const double> rewards, std::span<const double> values,
                              double gamma) {
  if (rewards.size() != values.size()) {
    throw InvalidInput("td_errors: " + std::to_string(rewards.size()) + " rewards but " +
                       std::to_string(values.size()) + " values");
  }
  const std::size_t n = rewards.size();
  std::vector<double> deltas(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = (t + 1 < n) ? values[t + 1] : 0.0;
    deltas[t] = rewards[t] + gamma * next - values[t];
  }
  return deltas;
}

std::vector<double> td_errors(const Trajectory& trajectory, double gamma) {
  std::vector<double> rewards, values;
  rewards.reserve(trajectory.length());
  values.reserve(trajectory.length());
  for (const auto& s : trajectory.steps) {
    rewards.push_back(s.reward);
    values.push_back(s.value_estimate);
  }
  return td_errors(rewards, values, gamma);
}

std::vector<double> gae(std::span<const double> deltas, double gamma, double lambda) {
  std::vector<double> adv(deltas.size());
  double running = 0.0;
  for (std::size_t i = deltas.size(); i-- > 0;) {
    running = deltas[i] + gamma * lambda * running;
    adv[i] = running;
  }
  return adv;
}

AdvantageSet compute_advantages(const Trajectory& trajectory, double gamma, double lambda) {
  AdvantageSet out;
  out.deltas = td_errors(trajectory, gamma);
  out.advantages = gae(out.deltas, gamma, lambda);
  out.returns.resize(out.advantages.size());
  for (std::size_t t = 0; t < out.advantages.size(); ++t) {
    out.returns[t] = out.advantages[t] + trajectory.steps[t].value_estimate;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

std::vector<TrainingSample> make_samples(std::span<const Trajectory> views,
                                         std::span<const AdvantageSet> advantages) {
  if (views.size() != advantages.size()) throw InvalidInput("make_samples: size mismatch");
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& steps = views[i].steps;
    const auto& adv = advantages[i];
    if (adv.advantages.size() != steps.size()) throw InvalidInput("make_samples: length mismatch");
    for (std::size_t t = 0; t < steps.size(); ++t) {
      out.push_back({steps[t].state_id, steps[t].action, steps[t].log_prob_sampled,
                     adv.advantages[t], adv.returns[t]});
    }
  }
  return out;
}

double ppo_surrogate(std::span<const TrainingSample> samples, const TabularActor& actor,
                     double clip_ratio) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    const double lp = actor.log_probs(s.state)[s.action.index];
    const double ratio = std::exp(lp - s.old_log_prob);
    if (!std::isfinite(ratio)) continue;
    const double clipped = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    sum += std::min(ratio * s.advantage, clipped * s.advantage);
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

SurrogateGradient ppo_surrogate_grad(std::span<const TrainingSample> samples,
                                     const TabularActor& actor, double clip_ratio) {
  SurrogateGradient out{ActorGradient(actor.vocab_size())};
  std::map<StateId, LogProbVector> cache;
  std::size_t clipped_count = 0;
  double sum = 0.0;
  for (const auto& s : samples) {
    auto it = cache.find(s.state);
    if (it == cache.end()) it = cache.emplace(s.state, actor.log_probs(s.state)).first;
    const auto& lp = it->second;
    const double ratio = std::exp(lp[s.action.index] - s.old_log_prob);
    if (!std::isfinite(ratio)) {
      ++out.excluded;
      continue;
    }
    const double clipped = std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    sum += std::min(ratio * s.advantage, clipped * s.advantage);
    const bool clip_active = (s.advantage > 0.0 && ratio > 1.0 + clip_ratio) ||
                             (s.advantage < 0.0 && ratio < 1.0 - clip_ratio);
    if (clip_active) {
      ++clipped_count;
      continue;
    }
    // d(rho * A)/d logits = A * rho * (onehot(a) - pi)
    auto& row = out.gradient.row(s.state);
    const double scale = s.advantage * ratio;
    for (std::size_t b = 0; b < row.size(); ++b) {
      row[b] += scale * ((b == s.action.index ? 1.0 : 0.0) - std::exp(lp[b]));
    }
  }
  const std::size_t n = samples.size() - out.excluded;
  if (out.excluded > 0) {
    warn("ppo_surrogate_grad: excluded " + std::to_string(out.excluded) +
         " steps with non-finite importance ratio");
  }
  if (n == 0) return out;
  const double inv = 1.0 / static_cast<double>(n);
  ActorGradient scaled(actor.vocab_size());
  scaled.add_scaled(out.gradient, inv);
  out.gradient = std::move(scaled);
  out.objective = sum * inv;
  out.clip_fraction = static_cast<double>(clipped_count) * inv;
  return out;
}

double critic_loss(std::span<const TrainingSample> samples, const TabularCritic& critic) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : samples) {
    const double d = critic.value(s.state) - s.ret;
    sum += d * d;
  }
  return sum / static_cast<double>(samples.size());
}

CriticGradient critic_grad(std::span<const TrainingSample> samples, const TabularCritic& critic) {
  CriticGradient g;
  if (samples.empty()) return g;
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (const auto& s : samples) g.at(s.state) += 2.0 * (critic.value(s.state) - s.ret) * inv;
  return g;
}

// ---------------------------------------------------------------------------
// Metrics helpers
// ---------------------------------------------------------------------------

double false_positive_rate(const RolloutBatch& batch, CollectionMode mode) {
  if (mode.kind != CollectionMode::Kind::CounterfactualExtend &&
      mode.kind != CollectionMode::Kind::StoppingDisabled) {
    throw InvalidInput("false_positive_rate: batch was not collected in counterfactual mode");
  }
  if (batch.trajectories.empty()) return 0.0;
  std::size_t fp = 0;
  for (const auto& t : batch.trajectories) {
    if (t.counterfactual && t.counterfactual->hypothetical_outcome_reward > 0.5) ++fp;
  }
  return static_cast<double>(fp) / static_cast<double>(batch.trajectories.size());
}

RandomStopCalibrator::RandomStopCalibrator(std::vector<double> targets, double fallback_target,
                                           double gain, std::size_t t_max)
    : targets_(std::move(targets)),
      fallback_(fallback_target),
      gain_(gain),
      log_hazard_(std::log(1.0 / static_cast<double>(std::max<std::size_t>(t_max, 1)))) {}

double RandomStopCalibrator::target(int step) const {
  if (targets_.empty()) return fallback_;
  if (step >= 0 && static_cast<std::size_t>(step) < targets_.size()) return targets_[step];
  return 0.0;
}

double RandomStopCalibrator::hazard(int step) const {
  if (target(step) <= 0.0) return 0.0;
  return std::min(1.0, std::exp(log_hazard_));
}

void RandomStopCalibrator::observe(int step, double realized_rate, double avg_length) {
  const double t = target(step);
  if (t <= 0.0) return;
  if (!primed_) {
    // Feed-forward start: per-step hazard that stops a fraction t of
    // trajectories of the current mean length.
    const double len = std::max(avg_length, 1.0);
    log_hazard_ = std::log(std::max(1e-9, 1.0 - std::pow(1.0 - std::min(t, 0.999), 1.0 / len)));
    primed_ = true;
    return;
  }
  log_hazard_ = std::min(0.0, log_hazard_ + gain_ * (t - realized_rate));
}

std::vector<double> read_stop_rate_trace(const std::string& metrics_csv) {
  std::ifstream in(metrics_csv);
  if (!in) throw ConfigError("cannot read stop-rate trace '" + metrics_csv + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty stop-rate trace '" + metrics_csv + "'");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) header.push_back(col);
  }
  const auto it = std::find(header.begin(), header.end(), "stop_rate");
  if (it == header.end()) throw ConfigError("trace '" + metrics_csv + "' has no stop_rate column");
  const auto col_idx = static_cast<std::size_t>(it - header.begin());
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t i = 0; i <= col_idx; ++i) std::getline(ss, cell, ',');
    out.push_back(parse_double(cell));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult evaluate(const TabularActor& actor, const Environment& env, std::size_t t_max,
                    std::size_t episodes, std::uint64_t seed) {
  constexpr std::uint64_t kEvalStream = 0xe7a1;
  EvalResult out;
  {
    StateId s = env.reset();
    for (std::size_t t = 0; t < t_max; ++t) {
      const auto r = env.step(s, argmax(actor.logits(s)));
      ++out.greedy_length;
      if (r.terminal) {
        out.greedy_success = r.reward > 0.5;
        break;
      }
      s = r.next;
    }
  }
  std::size_t wins = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < episodes; ++i) {
    auto rng = Rng::stream(seed, {kEvalStream, i});
    StateId s = env.reset();
    for (std::size_t t = 0; t < t_max; ++t) {
      const auto r = env.step(s, sample_token(actor.log_probs(s), rng));
      ++tokens;
      if (r.terminal) {
        if (r.reward > 0.5) ++wins;
        break;
      }
      s = r.next;
    }
  }
  if (episodes > 0) {
    out.sampled_success = static_cast<double>(wins) / static_cast<double>(episodes);
    out.sampled_mean_length = static_cast<double>(tokens) / static_cast<double>(episodes);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

StopperConfig stopper_config(const RunConfig& cfg) {
  StopperConfig sc;
  sc.ema.alpha_ema = cfg.alpha_ema;
  sc.ema.clip_bound = cfg.clip_bound;
  sc.ema.stabilizer = cfg.stabilizer;
  sc.alpha_s = cfg.alpha_s;
  sc.value_floor = cfg.value_floor;
  sc.controller = {cfg.beta_init, cfg.eta_beta, cfg.target_rate, cfg.beta_min, cfg.beta_max};
  sc.warmup.abs_threshold = cfg.warmup_abs_threshold;
  sc.warmup.delta_threshold = cfg.warmup_delta_threshold;
  sc.warmup.required_consecutive = cfg.warmup_consecutive;
  sc.warmup.step_cap_fraction = cfg.warmup_cap_fraction;
  sc.warmup_enabled = cfg.variant != Variant::EspoNoWarmup;
  sc.anneal_fraction = cfg.anneal_fraction;
  sc.total_steps = cfg.total_steps;
  return sc;
}

StopRule stop_rule(const RunConfig& cfg) {
  switch (cfg.variant) {
    case Variant::ValueOnly: return {StopRule::Kind::ValueOnly, cfg.value_only_threshold};
    case Variant::RegretOnly: return {StopRule::Kind::RegretOnly, cfg.regret_only_threshold};
    default: return {StopRule::Kind::Espo, 0.0};
  }
}

namespace {

TabularActor initial_actor(const RunConfig& cfg, const Environment& env) {
  TabularActor actor(env.state_count(), env.vocab_size());
  if (cfg.actor_init == ActorInit::Prior) {
    for (StateId s = 0; s < env.state_count(); ++s) actor.set_logits(s, env.prior_logits(s));
  }
  return actor;
}

const RunConfig& checked(const RunConfig& cfg) {
  validate_or_throw(cfg);
  return cfg;
}

}  // namespace

Trainer::Trainer(RunConfig config)
    : config_(checked(config)),
      env_(make_environment(config_.env, config_.t_max)),
      actor_(initial_actor(config_, *env_)),
      critic_(env_->state_count()),
      stopper_(stopper_config(config_)) {
  if (config_.variant == Variant::RandomStop) {
    std::vector<double> trace;
    if (!config_.random_stop_trace.empty()) trace = read_stop_rate_trace(config_.random_stop_trace);
    calibrator_.emplace(std::move(trace), config_.random_stop_rate, config_.random_stop_gain,
                        config_.t_max);
  }
}

double Trainer::effective_r_fail() const {
  return config_.variant == Variant::EspoNoPenalty ? 0.0 : config_.r_fail;
}

CollectionMode Trainer::mode_for(int step) const {
  if (config_.variant == Variant::Ppo || config_.stopping_disabled) return CollectionMode::disabled();
  if (config_.variant == Variant::RandomStop) return CollectionMode::random_stop(calibrator_->hazard(step));
  if (config_.counterfactual) return CollectionMode::counterfactual();
  return CollectionMode::standard();
}

StepOutput Trainer::step() {
  if (done()) throw Error("trainer: run already complete");
  const int k = completed_;
  StepOutput out;
  out.snapshot = stopper_.snapshot(k);

  RolloutSettings settings;
  settings.t_max = config_.t_max;
  settings.r_fail = effective_r_fail();
  settings.mode = mode_for(k);
  settings.rule = stop_rule(config_);
  settings.seed = config_.seed;

  out.batch = collect_batch(actor_, critic_, out.snapshot, *env_, settings,
                            static_cast<std::uint64_t>(k), config_.batch_size, config_.workers);

  out.views.reserve(out.batch.trajectories.size());
  out.advantages.reserve(out.batch.trajectories.size());
  for (const auto& t : out.batch.trajectories) {
    out.views.push_back(t.training_view(settings.r_fail));
    out.advantages.push_back(
        compute_advantages(out.views.back(), config_.ppo.gamma, config_.ppo.lambda));
  }

  auto samples = make_samples(out.views, out.advantages);
  if (config_.ppo.advantage_normalize && samples.size() > 1) {
    double mean = 0.0, sq = 0.0;
    for (const auto& s : samples) mean += s.advantage;
    mean /= static_cast<double>(samples.size());
    for (const auto& s : samples) sq += (s.advantage - mean) * (s.advantage - mean);
    const double sd = std::sqrt(sq / static_cast<double>(samples.size())) + 1e-8;
    for (auto& s : samples) s.advantage = (s.advantage - mean) / sd;
  }

  const double loss = critic_loss(samples, critic_);
  double clip_sum = 0.0;
  for (int e = 0; e < config_.ppo.epochs_per_batch; ++e) {
    auto sg = ppo_surrogate_grad(samples, actor_, config_.ppo.clip_ratio);
    auto cg = critic_grad(samples, critic_);
    apply_updates(actor_, critic_, sg.gradient, cg, config_.ppo.lr_actor, config_.ppo.lr_critic);
    clip_sum += sg.clip_fraction;
  }

  const double B = static_cast<double>(out.views.size());
  std::size_t stops = 0, wins = 0, steps = 0;
  double entropy_sum = 0.0;
  for (const auto& v : out.views) {
    if (v.stop_reason == StopReason::EarlyStop) {
      ++stops;
      stop_values_.push_back(v.steps.back().value_estimate);
      stop_scores_.push_back(v.steps.back().smoothed_score);
    }
    if (v.success()) ++wins;
    for (const auto& s : v.steps) entropy_sum += s.entropy;
    steps += v.length();
  }
  const double stop_rate = static_cast<double>(stops) / B;
  const auto acc = token_accounting(out.batch);

  stopper_.end_of_batch(k, out.batch.regrets(), stop_rate, loss);
  if (calibrator_ && !out.snapshot.warmup_active) calibrator_->observe(k, stop_rate, acc.avg_length);

  cumulative_tokens_ += acc.total_tokens;
  ++completed_;

  auto& m = out.metrics;
  m.step = completed_;
  m.cumulative_tokens = cumulative_tokens_;
  m.avg_trajectory_length_actual = acc.avg_length;
  m.avg_trajectory_length_original = acc.avg_original;
  m.stop_rate = stop_rate;
  m.false_positive_rate = settings.mode.kind == CollectionMode::Kind::CounterfactualExtend
                              ? false_positive_rate(out.batch, settings.mode)
                              : 0.0;
  m.mean_entropy = steps ? entropy_sum / static_cast<double>(steps) : 0.0;
  m.success_rate = static_cast<double>(wins) / B;
  m.beta = out.snapshot.controller.beta;
  m.mu_g = out.snapshot.stats.frozen_mu;
  m.var_g = out.snapshot.stats.frozen_var;
  m.critic_loss = loss;
  m.clip_fraction = clip_sum / config_.ppo.epochs_per_batch;
  m.warmup_active = out.snapshot.warmup_active;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += ' ' + format_double(x);
  return out;
}

std::vector<double> split_doubles(std::istringstream& is) {
  std::vector<double> out;
  std::string tok;
  while (is >> tok) out.push_back(parse_double(tok));
  return out;
}

}  // namespace

void Trainer::save_checkpoint(std::ostream& os) const {
  const auto& e = stopper_.ema();
  const auto& g = stopper_.gate();
  os << "espo-checkpoint 1\n";
  os << "config_hash " << config_hash(config_) << '\n';
  os << "step " << completed_ << '\n';
  os << "cumulative_tokens " << cumulative_tokens_ << '\n';
  os << "ema " << format_double(e.mu_g) << ' ' << format_double(e.var_g) << ' '
     << format_double(e.frozen_mu) << ' ' << format_double(e.frozen_var) << '\n';
  os << "beta " << format_double(stopper_.controller().beta) << '\n';
  os << "gate " << (g.active ? 1 : 0) << ' ' << g.consecutive_hits << ' '
     << (g.last_loss ? format_double(*g.last_loss) : std::string("none")) << '\n';
  os << "warmup_exit "
     << (stopper_.warmup_exit() ? std::to_string(*stopper_.warmup_exit()) : std::string("none"))
     << '\n';
  os << "anneal_horizon " << stopper_.anneal_horizon() << '\n';
  if (calibrator_) {
    os << "calibrator " << format_double(calibrator_->log_hazard()) << ' '
       << (calibrator_->primed() ? 1 : 0) << '\n';
  }
  os << "stop_values" << join_doubles(stop_values_) << '\n';
  os << "stop_scores" << join_doubles(stop_scores_) << '\n';
  write_parameters(os, actor_, critic_);
}

void Trainer::load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "espo-checkpoint 1") {
    throw InvalidInput("checkpoint: bad header");
  }
  EmaStats ema = stopper_.ema();
  BetaController ctrl = stopper_.controller();
  WarmupGate gate = stopper_.gate();
  std::optional<int> exit_step;
  int horizon = 0;
  std::stringstream params;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "config_hash") {
      std::string h;
      ls >> h;
      if (h != config_hash(config_)) {
        throw InvalidInput("checkpoint: config hash " + h + " does not match " + config_hash(config_));
      }
    } else if (key == "step") {
      ls >> completed_;
    } else if (key == "cumulative_tokens") {
      ls >> cumulative_tokens_;
    } else if (key == "ema") {
      auto v = split_doubles(ls);
      if (v.size() != 4) throw InvalidInput("checkpoint: malformed ema line");
      ema.mu_g = v[0];
      ema.var_g = v[1];
      ema.frozen_mu = v[2];
      ema.frozen_var = v[3];
    } else if (key == "beta") {
      std::string b;
      ls >> b;
      ctrl.beta = parse_double(b);
    } else if (key == "gate") {
      int active = 0;
      std::string last;
      ls >> active >> gate.consecutive_hits >> last;
      gate.active = active != 0;
      gate.last_loss = last == "none" ? std::nullopt : std::optional<double>(parse_double(last));
    } else if (key == "warmup_exit") {
      std::string v;
      ls >> v;
      exit_step = v == "none" ? std::nullopt : std::optional<int>(std::stoi(v));
    } else if (key == "anneal_horizon") {
      ls >> horizon;
    } else if (key == "calibrator") {
      std::string lh;
      int primed = 0;
      ls >> lh >> primed;
      if (calibrator_) calibrator_->restore(parse_double(lh), primed != 0);
    } else if (key == "stop_values") {
      stop_values_ = split_doubles(ls);
    } else if (key == "stop_scores") {
      stop_scores_ = split_doubles(ls);
    } else if (key == "actor" || key == "critic") {
      params << line << '\n';
    }
  }
  stopper_.restore(ema, ctrl, gate, exit_step, horizon);
  read_parameters(params, actor_, critic_);
}

}  // namespace espo
