#include "espo/rollout.hpp"

#include <algorithm>
#include <exception>
#include <ostream>
#include <thread>

namespace espo {

namespace {

constexpr std::uint64_t kTokenStream = 0;
constexpr std::uint64_t kRandomStopStream = 1;

bool rule_fires(const StopRule& rule, const StopperSnapshot& snap, double z, double value) {
  switch (rule.kind) {
    case StopRule::Kind::Espo:
      return should_stop({z, value, snap.value_floor, snap.warmup_active}, snap.controller);
    case StopRule::Kind::ValueOnly:
      return !snap.warmup_active && value < rule.threshold;
    case StopRule::Kind::RegretOnly:
      return !snap.warmup_active && z > rule.threshold;
  }
  return false;
}

}  // namespace

CollectionMode CollectionMode::random_stop(double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidInput("random stop rate must lie in [0, 1]");
  return {Kind::RandomStop, rate};
}

std::vector<double> RolloutBatch::regrets() const {
  std::vector<double> out;
  out.reserve(total_tokens);
  for (const auto& t : trajectories) {
    for (const auto& s : t.steps) out.push_back(s.regret_raw);
  }
  return out;
}

Trajectory collect_trajectory(const TabularActor& actor, const TabularCritic& critic,
                              const StopperSnapshot& snapshot, const Environment& env,
                              const RolloutSettings& settings, std::uint64_t step,
                              std::uint64_t index) {
  using Kind = CollectionMode::Kind;
  auto token_rng = Rng::stream(settings.seed, {step, index, kTokenStream});
  auto stop_rng = Rng::stream(settings.seed, {step, index, kRandomStopStream});
  const Kind mode = settings.mode.kind;

  Trajectory traj;
  traj.steps.reserve(settings.t_max);
  SmoothedScore score{0.0, snapshot.alpha_s};
  StateId state = env.reset();
  std::optional<std::size_t> fired_at;

  for (std::size_t t = 0; t < settings.t_max; ++t) {
    StepRecord rec;
    rec.state_id = state;
    const auto lp = actor.log_probs(state);
    rec.action = sample_token(lp, token_rng);
    rec.log_prob_sampled = lp[rec.action.index];
    rec.regret_raw = step_regret(lp, rec.action);
    rec.log_prob_max = *std::max_element(lp.begin(), lp.end());
    rec.entropy = entropy(lp);
    rec.regret_normalized = normalize_regret(rec.regret_raw, snapshot.stats);
    score = accumulate(score, rec.regret_normalized);
    rec.smoothed_score = score.z;
    rec.value_estimate = critic.value(state);

    EnvStep out;
    try {
      out = env.step(state, rec.action);
    } catch (const std::exception& e) {
      throw Error("rollout aborted at step " + std::to_string(t) + " in " + env.describe(state) +
                  ": " + e.what());
    }

    bool fire = false;
    switch (mode) {
      case Kind::Standard:
      case Kind::CounterfactualExtend:
        fire = rule_fires(settings.rule, snapshot, score.z, rec.value_estimate);
        break;
      case Kind::RandomStop: {
        const double u = stop_rng.uniform();
        fire = !snapshot.warmup_active && u < settings.mode.rate;
        break;
      }
      case Kind::StoppingDisabled:
        break;
    }
    // A natural ending on the same token takes precedence over the stop rule.
    fire = fire && !out.terminal;
    rec.stop_fired = fire;

    if (out.terminal) {
      rec.reward = out.reward;
      traj.steps.push_back(rec);
      traj.stop_reason = StopReason::NaturalEnd;
      break;
    }
    if (fire && mode != Kind::CounterfactualExtend) {
      rec.reward = settings.r_fail;
      traj.steps.push_back(rec);
      traj.stop_reason = StopReason::EarlyStop;
      break;
    }
    if (fire && !fired_at) fired_at = t;
    traj.steps.push_back(rec);
    if (t + 1 == settings.t_max) traj.stop_reason = StopReason::HorizonCap;
    state = out.next;
  }

  traj.outcome_reward = traj.steps.back().reward;
  if (fired_at) traj.counterfactual = Counterfactual{*fired_at, traj.outcome_reward};
  return traj;
}

RolloutBatch make_batch(std::vector<Trajectory> trajectories, std::uint64_t snapshot_id) {
  RolloutBatch batch;
  batch.trajectories = std::move(trajectories);
  batch.frozen_stats_used = snapshot_id;
  for (const auto& t : batch.trajectories) {
    batch.total_tokens += t.length();
    if (t.stop_reason == StopReason::EarlyStop) ++batch.stop_count;
    if (t.counterfactual) ++batch.hypothetical_stop_count;
  }
  return batch;
}

RolloutBatch collect_batch(const TabularActor& actor, const TabularCritic& critic,
                           const StopperSnapshot& snapshot, const Environment& env,
                           const RolloutSettings& settings, std::uint64_t step, std::size_t batch_size,
                           std::size_t workers) {
  std::vector<Trajectory> trajs(batch_size);
  auto run_range = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < batch_size; i += stride) {
      trajs[i] = collect_trajectory(actor, critic, snapshot, env, settings, step, i);
    }
  };
  if (workers <= 1 || batch_size <= 1) {
    run_range(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            run_range(w, workers);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return make_batch(std::move(trajs), snapshot.id);
}

TokenAccount token_accounting(const RolloutBatch& batch) {
  TokenAccount acc;
  for (const auto& t : batch.trajectories) {
    acc.total_tokens += t.effective_length();
    acc.total_original += t.length();
  }
  if (!batch.trajectories.empty()) {
    const double n = static_cast<double>(batch.trajectories.size());
    acc.avg_length = static_cast<double>(acc.total_tokens) / n;
    acc.avg_original = static_cast<double>(acc.total_original) / n;
  }
  return acc;
}

void write_trajectory_dump(std::ostream& os, const Trajectory& trajectory) {
  for (std::size_t t = 0; t < trajectory.steps.size(); ++t) {
    const auto& s = trajectory.steps[t];
    os << t << '\t' << s.state_id << '\t' << s.action.index << '\t' << format_double(s.regret_raw)
       << '\t' << format_double(s.regret_normalized) << '\t' << format_double(s.smoothed_score)
       << '\t' << format_double(s.value_estimate) << '\t' << (s.stop_fired ? 1 : 0) << '\n';
  }
}

}  // namespace espo
