#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "espo/config.hpp"
#include "espo/core.hpp"
#include "espo/envs.hpp"
#include "espo/policy.hpp"
#include "espo/rollout.hpp"
#include "espo/stopper.hpp"

namespace espo {

// ---------------------------------------------------------------------------
// Advantage estimation
// ---------------------------------------------------------------------------

struct AdvantageSet {
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> deltas;
};

/// delta_t = r_t + gamma * V_{t+1} - V_t, with V = 0 past the last step:
/// every trajectory end is absorbing, so nothing is bootstrapped there.
std::vector<double> td_errors(std::span<const double> rewards, std::span<const double> values,
                              double gamma);

/// Same, reading the rewards and the values recorded at collection time.
std::vector<double> td_errors(const Trajectory& trajectory, double gamma);

/// Backward recursion A_t = delta_t + gamma * lambda * A_{t+1}.
std::vector<double> gae(std::span<const double> deltas, double gamma, double lambda);

AdvantageSet compute_advantages(const Trajectory& trajectory, double gamma, double lambda);

// ---------------------------------------------------------------------------
// PPO surrogate and critic regression
// ---------------------------------------------------------------------------

/// One unmasked step as the loss sees it.
struct TrainingSample {
  StateId state = 0;
  TokenId action;
  double old_log_prob = 0.0;
  double advantage = 0.0;
  double ret = 0.0;
};

std::vector<TrainingSample> make_samples(std::span<const Trajectory> views,
                                         std::span<const AdvantageSet> advantages);

/// Mean over samples of min(rho * A, clip(rho, 1-eps, 1+eps) * A).
double ppo_surrogate(std::span<const TrainingSample> samples, const TabularActor& actor,
                     double clip_ratio);

struct SurrogateGradient {
  ActorGradient gradient;
  double objective = 0.0;
  double clip_fraction = 0.0;
  std::size_t excluded = 0;  // steps dropped for a non-finite ratio
};

SurrogateGradient ppo_surrogate_grad(std::span<const TrainingSample> samples,
                                     const TabularActor& actor, double clip_ratio);

/// Mean of (V(s) - return)^2.
double critic_loss(std::span<const TrainingSample> samples, const TabularCritic& critic);

CriticGradient critic_grad(std::span<const TrainingSample> samples, const TabularCritic& critic);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricsRow {
  int step = 0;
  std::size_t cumulative_tokens = 0;
  double avg_trajectory_length_actual = 0.0;
  double avg_trajectory_length_original = 0.0;
  double stop_rate = 0.0;
  double false_positive_rate = 0.0;
  double mean_entropy = 0.0;
  double success_rate = 0.0;
  double beta = 0.0;
  double mu_g = 0.0;
  double var_g = 0.0;
  double critic_loss = 0.0;
  double clip_fraction = 0.0;
  bool warmup_active = false;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// (# trajectories where the rule fired and the untruncated outcome was a
/// success) / B. Throws InvalidInput unless the batch was collected in
/// counterfactual mode.
double false_positive_rate(const RolloutBatch& batch, CollectionMode mode);

/// Per-step hazard for random truncation, adjusted after each batch so the
/// realized trajectory stop rate follows a target sequence.
class RandomStopCalibrator {
 public:
  RandomStopCalibrator(std::vector<double> targets, double fallback_target, double gain,
                       std::size_t t_max);

  double target(int step) const;
  double hazard(int step) const;
  void observe(int step, double realized_rate, double avg_length);

  double log_hazard() const { return log_hazard_; }
  bool primed() const { return primed_; }
  void restore(double log_hazard, bool primed) {
    log_hazard_ = log_hazard;
    primed_ = primed;
  }

 private:
  std::vector<double> targets_;
  double fallback_;
  double gain_;
  double log_hazard_;
  bool primed_ = false;
};

/// Reads the stop_rate column of a metrics CSV.
std::vector<double> read_stop_rate_trace(const std::string& metrics_csv);

struct StepOutput {
  MetricsRow metrics;
  RolloutBatch batch;
  std::vector<Trajectory> views;
  std::vector<AdvantageSet> advantages;
  StopperSnapshot snapshot;
};

struct EvalResult {
  bool greedy_success = false;
  std::size_t greedy_length = 0;
  double sampled_success = 0.0;
  double sampled_mean_length = 0.0;
};

/// Greedy rollout plus `episodes` sampled rollouts, all without stopping.
EvalResult evaluate(const TabularActor& actor, const Environment& env, std::size_t t_max,
                    std::size_t episodes, std::uint64_t seed);

/// Sequences collection, advantage estimation, PPO epochs and the stopper's
/// batch-boundary updates for one run.
class Trainer {
 public:
  explicit Trainer(RunConfig config);

  StepOutput step();
  bool done() const { return completed_ < 0 || completed_ >= config_.total_steps; }

  int completed_steps() const { return completed_; }
  std::size_t cumulative_tokens() const { return cumulative_tokens_; }

  const RunConfig& config() const { return config_; }
  const Environment& env() const { return *env_; }
  const TabularActor& actor() const { return actor_; }
  const TabularCritic& critic() const { return critic_; }
  const Stopper& stopper() const { return stopper_; }

  /// Values of V and z at every early stop so far.
  const std::vector<double>& stop_values() const { return stop_values_; }
  const std::vector<double>& stop_scores() const { return stop_scores_; }

  /// Collection mode for the batch at 0-based `step`.
  CollectionMode mode_for(int step) const;
  double effective_r_fail() const;

  void save_checkpoint(std::ostream& os) const;
  void load_checkpoint(std::istream& is);

 private:
  RunConfig config_;
  std::shared_ptr<const Environment> env_;
  TabularActor actor_;
  TabularCritic critic_;
  Stopper stopper_;
  std::optional<RandomStopCalibrator> calibrator_;
  int completed_ = 0;
  std::size_t cumulative_tokens_ = 0;
  std::vector<double> stop_values_;
  std::vector<double> stop_scores_;
};

StopperConfig stopper_config(const RunConfig& cfg);
StopRule stop_rule(const RunConfig& cfg);

}  // namespace espo
