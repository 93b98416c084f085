#include "espo/stopper.hpp"

#include <algorithm>
#include <cmath>

namespace espo {

double step_regret(std::span<const double> log_probs, TokenId sampled) {
  if (sampled.index >= log_probs.size()) throw InvalidInput("step_regret: token out of range");
  const double best = *std::max_element(log_probs.begin(), log_probs.end());
  return best - log_probs[sampled.index];
}

double normalize_regret(double g, const EmaStats& stats) {
  const double scaled = (g - stats.frozen_mu) / std::sqrt(stats.frozen_var + stats.stabilizer);
  return std::clamp(scaled, -stats.clip_bound, stats.clip_bound);
}

SmoothedScore accumulate(SmoothedScore score, double g_norm) {
  score.z = score.alpha_s * score.z + (1.0 - score.alpha_s) * g_norm;
  return score;
}

bool should_stop(const StopDecisionInput& input, const BetaController& ctrl) {
  if (input.warmup_active) return false;
  return input.z > ctrl.beta * std::max(input.value_estimate, input.value_floor);
}

EmaStats update_ema(const EmaStats& stats, std::span<const double> batch_regrets) {
  if (batch_regrets.empty()) {
    warn("update_ema: empty batch, statistics unchanged");
    return stats;
  }
  const double n = static_cast<double>(batch_regrets.size());
  double mean = 0.0;
  for (double g : batch_regrets) mean += g;
  mean /= n;
  double var = 0.0;
  for (double g : batch_regrets) var += (g - mean) * (g - mean);
  var /= n;

  EmaStats out = stats;
  const double a = stats.alpha_ema;
  out.mu_g = a * stats.mu_g + (1.0 - a) * mean;
  out.var_g = a * stats.var_g + (1.0 - a) * var;
  out.frozen_mu = out.mu_g;
  out.frozen_var = out.var_g;
  return out;
}

BetaController update_beta(const BetaController& ctrl, double empirical_stop_rate) {
  if (!(empirical_stop_rate >= 0.0 && empirical_stop_rate <= 1.0)) {
    throw InvalidInput("update_beta: stop rate outside [0, 1]");
  }
  BetaController out = ctrl;
  out.beta = std::clamp(ctrl.beta + ctrl.eta_beta * (empirical_stop_rate - ctrl.target_rate),
                        ctrl.beta_min, ctrl.beta_max);
  return out;
}

int warmup_cap_step(double fraction, int total_steps) {
  // 0.1 * 30 is 3.0000000000000004 in binary; the tolerance keeps the cap at 3.
  return static_cast<int>(std::ceil(fraction * total_steps - 1e-9));
}

WarmupGate warmup_step(const WarmupGate& gate, double critic_loss, int step, int total_steps) {
  WarmupGate out = gate;
  if (!gate.active) return out;

  const bool abs_hit = std::abs(critic_loss) < gate.abs_threshold;
  const bool delta_hit =
      gate.last_loss && std::abs(critic_loss - *gate.last_loss) < gate.delta_threshold;
  out.consecutive_hits = (abs_hit || delta_hit)
                             ? std::min(gate.consecutive_hits + 1, gate.required_consecutive)
                             : 0;
  out.last_loss = critic_loss;

  const bool converged = out.consecutive_hits >= gate.required_consecutive;
  const bool capped = step >= warmup_cap_step(gate.step_cap_fraction, total_steps);
  if (converged || capped) out.active = false;
  return out;
}

BetaController anneal_beta(const BetaController& ctrl, int steps_since_warmup, int anneal_horizon) {
  BetaController out = ctrl;
  if (anneal_horizon <= 0 || steps_since_warmup >= anneal_horizon) return out;
  const double frac = static_cast<double>(std::max(steps_since_warmup, 0)) / anneal_horizon;
  out.beta = ctrl.beta_max + (ctrl.beta - ctrl.beta_max) * frac;
  return out;
}

namespace {
int anneal_length(double fraction, int total_steps, int exit_step) {
  return static_cast<int>(std::lround(fraction * std::max(0, total_steps - exit_step)));
}
}  // namespace

Stopper::Stopper(const StopperConfig& config)
    : config_(config), ema_(config.ema), controller_(config.controller), gate_(config.warmup) {
  controller_.beta = std::clamp(controller_.beta, controller_.beta_min, controller_.beta_max);
  if (!config.warmup_enabled) {
    gate_.active = false;
    warmup_exit_ = 0;
    anneal_horizon_ = anneal_length(config.anneal_fraction, config.total_steps, 0);
  }
}

bool Stopper::controller_engaged(int step) const {
  return warmup_exit_ && step - *warmup_exit_ >= anneal_horizon_;
}

StopperSnapshot Stopper::snapshot(int step) const {
  StopperSnapshot snap;
  snap.id = static_cast<std::uint64_t>(step);
  snap.stats = ema_;
  snap.alpha_s = config_.alpha_s;
  snap.value_floor = config_.value_floor;
  snap.warmup_active = gate_.active;
  if (warmup_exit_) {
    snap.controller = anneal_beta(controller_, step - *warmup_exit_, anneal_horizon_);
  } else {
    snap.controller = controller_;
    snap.controller.beta = controller_.beta_max;
  }
  return snap;
}

void Stopper::end_of_batch(int step, std::span<const double> batch_regrets, double stop_rate,
                           double critic_loss) {
  ema_ = update_ema(ema_, batch_regrets);
  if (controller_engaged(step)) controller_ = update_beta(controller_, stop_rate);
  if (gate_.active) {
    gate_ = warmup_step(gate_, critic_loss, step + 1, config_.total_steps);
    if (!gate_.active) {
      warmup_exit_ = step + 1;
      anneal_horizon_ = anneal_length(config_.anneal_fraction, config_.total_steps, step + 1);
    }
  }
}

void Stopper::restore(const EmaStats& ema, const BetaController& ctrl, const WarmupGate& gate,
                      std::optional<int> warmup_exit, int anneal_horizon) {
  ema_ = ema;
  controller_ = ctrl;
  gate_ = gate;
  warmup_exit_ = warmup_exit;
  anneal_horizon_ = anneal_horizon;
}

}  // namespace espo
