#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "espo/core.hpp"
#include "espo/envs.hpp"
#include "espo/policy.hpp"
#include "espo/stopper.hpp"

namespace espo {

struct CollectionMode {
  enum class Kind { Standard, CounterfactualExtend, StoppingDisabled, RandomStop };

  Kind kind = Kind::Standard;
  /// Per-step stop probability; RandomStop only.
  double rate = 0.0;

  static CollectionMode standard() { return {Kind::Standard, 0.0}; }
  static CollectionMode counterfactual() { return {Kind::CounterfactualExtend, 0.0}; }
  static CollectionMode disabled() { return {Kind::StoppingDisabled, 0.0}; }
  static CollectionMode random_stop(double rate);
};

/// Which signal the stop test reads. Espo is the value-gated regret rule;
/// the other two are single-signal ablations with a fixed threshold.
struct StopRule {
  enum class Kind { Espo, ValueOnly, RegretOnly };

  Kind kind = Kind::Espo;
  double threshold = 0.0;
};

struct RolloutSettings {
  std::size_t t_max = 64;
  double r_fail = -1.0;
  CollectionMode mode;
  StopRule rule;
  std::uint64_t seed = 0;
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  std::uint64_t frozen_stats_used = 0;
  std::size_t stop_count = 0;
  /// Trajectories where the rule fired but truncation was only simulated.
  std::size_t hypothetical_stop_count = 0;
  std::size_t total_tokens = 0;

  /// Regret values of every generated step, in trajectory order.
  std::vector<double> regrets() const;
};

/// One rollout. Random draws come from streams keyed by (seed, step,
/// index), so the result does not depend on what else is collected or when.
Trajectory collect_trajectory(const TabularActor& actor, const TabularCritic& critic,
                              const StopperSnapshot& snapshot, const Environment& env,
                              const RolloutSettings& settings, std::uint64_t step,
                              std::uint64_t index);

/// B rollouts under one frozen snapshot. `workers` > 1 spreads trajectories
/// over threads; the result is identical for any worker count.
RolloutBatch collect_batch(const TabularActor& actor, const TabularCritic& critic,
                           const StopperSnapshot& snapshot, const Environment& env,
                           const RolloutSettings& settings, std::uint64_t step, std::size_t batch_size,
                           std::size_t workers = 1);

/// Rebuilds the batch-level counters from a trajectory list.
RolloutBatch make_batch(std::vector<Trajectory> trajectories, std::uint64_t snapshot_id);

struct TokenAccount {
  std::size_t total_tokens = 0;
  double avg_length = 0.0;
  /// Tokens that would have been generated without truncation. Equal to the
  /// actual figures unless the batch was collected in counterfactual mode.
  std::size_t total_original = 0;
  double avg_original = 0.0;
};

TokenAccount token_accounting(const RolloutBatch& batch);

/// Tab-separated debug dump: step, state, action, g, g_norm, z, V, stop flag.
void write_trajectory_dump(std::ostream& os, const Trajectory& trajectory);

}  // namespace espo
