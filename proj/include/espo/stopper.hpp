#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "espo/core.hpp"

namespace espo {

/// Running regret statistics. The running pair moves at batch boundaries; the
/// frozen pair is what rollouts read, and is refreshed only by update_ema.
struct EmaStats {
  double mu_g = 0.0;
  double var_g = 1.0;
  double frozen_mu = 0.0;
  double frozen_var = 1.0;
  double stabilizer = 1e-8;
  double clip_bound = 5.0;
  double alpha_ema = 0.99;
};

struct SmoothedScore {
  double z = 0.0;
  double alpha_s = 0.9;
};

struct BetaController {
  double beta = 7.0;
  double eta_beta = 0.1;
  double target_rate = 0.25;
  double beta_min = 0.0;
  double beta_max = 10.0;
};

struct WarmupGate {
  bool active = true;
  int consecutive_hits = 0;
  double abs_threshold = 0.5;
  double delta_threshold = 0.1;
  int required_consecutive = 3;
  double step_cap_fraction = 0.10;
  std::optional<double> last_loss;
};

struct StopDecisionInput {
  double z = 0.0;
  double value_estimate = 0.0;
  double value_floor = 0.2;
  bool warmup_active = false;
};

/// g = max_a log pi(a) - log pi(sampled). Zero exactly when the sample is a mode.
double step_regret(std::span<const double> log_probs, TokenId sampled);

/// Centers and scales with the frozen statistics, then clips to [-c, c].
double normalize_regret(double g, const EmaStats& stats);

SmoothedScore accumulate(SmoothedScore score, double g_norm);

/// Value-gated rule: stop iff z > beta * max(V, eps), and never during warmup.
bool should_stop(const StopDecisionInput& input, const BetaController& ctrl);

/// Blends the batch mean and population variance into the running statistics
/// and refreshes the frozen copy. An empty batch leaves the stats unchanged.
EmaStats update_ema(const EmaStats& stats, std::span<const double> batch_regrets);

/// Proportional setpoint step on the empirical stop rate, clipped to
/// [beta_min, beta_max].
BetaController update_beta(const BetaController& ctrl, double empirical_stop_rate);

/// Advances the adaptive critic warmup by one training step (1-based).
/// A step is a hit when |loss| < abs_threshold or |loss - previous| <
/// delta_threshold; the gate closes after required_consecutive hits in a row,
/// or unconditionally once step >= step_cap_fraction * total_steps.
WarmupGate warmup_step(const WarmupGate& gate, double critic_loss, int step, int total_steps);

/// First 1-based step at which warmup ends unconditionally: ceil(fraction * total).
int warmup_cap_step(double fraction, int total_steps);

/// Returns ctrl with beta moved linearly from beta_max (at 0) to ctrl.beta
/// (at anneal_horizon and beyond).
BetaController anneal_beta(const BetaController& ctrl, int steps_since_warmup, int anneal_horizon);

/// Everything a rollout worker needs from the stopper, fixed for one batch.
struct StopperSnapshot {
  std::uint64_t id = 0;
  EmaStats stats;
  double alpha_s = 0.9;
  double value_floor = 0.2;
  BetaController controller;
  bool warmup_active = true;
};

struct StopperConfig {
  EmaStats ema;
  double alpha_s = 0.9;
  double value_floor = 0.2;
  BetaController controller;
  WarmupGate warmup;
  bool warmup_enabled = true;
  double anneal_fraction = 0.10;
  int total_steps = 1;
};

/// Batch-boundary state machine: warmup, then anneal from beta_max, then the
/// proportional controller.
class Stopper {
 public:
  explicit Stopper(const StopperConfig& config);

  /// Snapshot for the batch collected at 0-based training step `step`.
  StopperSnapshot snapshot(int step) const;

  /// Serialized control phase after the batch for 0-based `step` has been
  /// collected and trained on.
  void end_of_batch(int step, std::span<const double> batch_regrets, double stop_rate,
                    double critic_loss);

  const EmaStats& ema() const { return ema_; }
  const BetaController& controller() const { return controller_; }
  const WarmupGate& gate() const { return gate_; }
  std::optional<int> warmup_exit() const { return warmup_exit_; }
  int anneal_horizon() const { return anneal_horizon_; }

  /// True once annealing has finished for the batch at `step`.
  bool controller_engaged(int step) const;

  // Checkpoint access.
  void restore(const EmaStats& ema, const BetaController& ctrl, const WarmupGate& gate,
               std::optional<int> warmup_exit, int anneal_horizon);

 private:
  StopperConfig config_;
  EmaStats ema_;
  BetaController controller_;
  WarmupGate gate_;
  std::optional<int> warmup_exit_;
  int anneal_horizon_ = 0;
};

}  // namespace espo
