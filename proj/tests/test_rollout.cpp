#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "espo/rollout.hpp"

using namespace espo;

namespace {

// Desk-scale trap chain with an informative prior.
std::shared_ptr<const Environment> desk_env() {
  EnvSpec spec;
  spec.prior = PriorSpec{4.0, 0.25, 5.0, 1.0, 0.0};
  return make_environment(spec, 64);
}

TabularActor prior_actor(const Environment& env) {
  TabularActor a(env.state_count(), env.vocab_size());
  for (StateId s = 0; s < env.state_count(); ++s) a.set_logits(s, env.prior_logits(s));
  return a;
}

StopperSnapshot open_snapshot(double beta) {
  StopperSnapshot s;
  s.warmup_active = false;
  s.controller.beta = beta;
  return s;
}

bool same_step(const StepRecord& a, const StepRecord& b) {
  return a.state_id == b.state_id && a.action == b.action &&
         a.log_prob_sampled == b.log_prob_sampled && a.log_prob_max == b.log_prob_max &&
         a.value_estimate == b.value_estimate && a.regret_raw == b.regret_raw &&
         a.regret_normalized == b.regret_normalized && a.smoothed_score == b.smoothed_score &&
         a.entropy == b.entropy;
}

bool same_trajectory(const Trajectory& a, const Trajectory& b) {
  if (a.steps.size() != b.steps.size() || a.stop_reason != b.stop_reason) return false;
  if (a.outcome_reward != b.outcome_reward) return false;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    if (!same_step(a.steps[i], b.steps[i])) return false;
    if (a.steps[i].reward != b.steps[i].reward || a.steps[i].stop_fired != b.steps[i].stop_fired)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("forced wrong token with a tuned stopper stops at step 3 with the failure reward") {
  const TrapChain env(TrapChainSpec{4, 3, {TokenId{1}, TokenId{3}, TokenId{0}}, 10});
  TabularActor actor(env.state_count(), 4);
  for (StateId s = 0; s < env.state_count(); ++s) {
    LogitVector row(4, 0.0);
    row[0] = 50.0;  // token 0 is wrong at position 0 and chosen with certainty
    actor.set_logits(s, row);
  }
  TabularCritic critic(env.state_count());
  StopperSnapshot snap = open_snapshot(1.2);
  snap.stats.frozen_mu = -1.0;  // every zero-regret token scores about +1
  // z runs 0.1, 0.19, 0.271; the threshold is 1.2 * max(0, 0.2) = 0.24.
  RolloutSettings rs;
  rs.t_max = 64;
  const auto t = collect_trajectory(actor, critic, snap, env, rs, 0, 0);
  REQUIRE(t.length() == 3);
  CHECK(t.stop_reason == StopReason::EarlyStop);
  CHECK(t.steps.back().reward == -1.0);
  CHECK(t.outcome_reward == -1.0);
  CHECK(t.steps.back().stop_fired);
  CHECK(t.steps[0].reward == 0.0);
  CHECK(t.steps[1].reward == 0.0);
}

TEST_CASE("natural end wins a collision with the stop rule") {
  const TrapChain env(TrapChainSpec{4, 1, {TokenId{0}}, 10});
  TabularActor actor(env.state_count(), 4);
  for (StateId s = 0; s < env.state_count(); ++s) actor.set_logits(s, {50, 0, 0, 0});
  TabularCritic critic(env.state_count());
  StopperSnapshot snap = open_snapshot(0.0);  // fires whenever z > 0
  snap.stats.frozen_mu = -1.0;
  RolloutSettings rs;
  const auto t = collect_trajectory(actor, critic, snap, env, rs, 0, 0);
  CHECK(t.length() == 1);
  CHECK(t.stop_reason == StopReason::NaturalEnd);
  CHECK(t.outcome_reward == 1.0);
  CHECK_FALSE(t.steps[0].stop_fired);
}

TEST_CASE("horizon-capped trajectories end with reward 0") {
  const auto env = make_environment(EnvSpec{}, 64);
  const TabularActor actor(env->state_count(), env->vocab_size());
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  rs.mode = CollectionMode::disabled();
  const auto t = collect_trajectory(actor, critic, StopperSnapshot{}, *env, rs, 0, 0);
  CHECK(t.length() == 64);
  CHECK(t.stop_reason == StopReason::HorizonCap);
  CHECK(t.outcome_reward == 0.0);
}

TEST_CASE("early-stopped trajectories carry exactly one nonzero reward, at the last step") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  const auto batch = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 3, 256);
  REQUIRE(batch.stop_count > 0);
  std::size_t stops = 0;
  for (const auto& t : batch.trajectories) {
    if (t.stop_reason != StopReason::EarlyStop) continue;
    ++stops;
    int nonzero = 0;
    for (const auto& s : t.steps) nonzero += s.reward != 0.0;
    CHECK(nonzero == 1);
    CHECK(t.steps.back().reward == -1.0);
    CHECK(t.steps.back().stop_fired);
    for (std::size_t i = 0; i + 1 < t.length(); ++i) CHECK_FALSE(t.steps[i].stop_fired);
  }
  CHECK(stops == batch.stop_count);
}

TEST_CASE("warmup suppresses every stop") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  StopperSnapshot snap = open_snapshot(0.0);
  snap.warmup_active = true;
  RolloutSettings rs;
  CHECK(collect_batch(actor, critic, snap, *env, rs, 0, 128).stop_count == 0);
  rs.mode = CollectionMode::random_stop(1.0);
  CHECK(collect_batch(actor, critic, snap, *env, rs, 0, 128).stop_count == 0);
}

TEST_CASE("stopping disabled reproduces a plain rollout") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  rs.mode = CollectionMode::disabled();
  rs.seed = 99;
  for (std::uint64_t i = 0; i < 64; ++i) {
    const auto t = collect_trajectory(actor, critic, open_snapshot(0.0), *env, rs, 5, i);
    // Plain decoding from the same token stream.
    auto rng = Rng::stream(99, {5, i, 0});
    StateId s = env->reset();
    std::size_t n = 0;
    double outcome = 0.0;
    for (; n < 64; ++n) {
      const auto a = sample_token(actor.log_probs(s), rng);
      REQUIRE(a == t.steps[n].action);
      const auto r = env->step(s, a);
      if (r.terminal) {
        outcome = r.reward;
        ++n;
        break;
      }
      s = r.next;
    }
    CHECK(n == t.length());
    CHECK(outcome == t.outcome_reward);
    for (const auto& st : t.steps) CHECK_FALSE(st.stop_fired);
  }
}

TEST_CASE("counterfactual prefix matches standard collection") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  const auto snap = open_snapshot(2.0);
  RolloutSettings standard, cf;
  cf.mode = CollectionMode::counterfactual();
  std::size_t compared = 0;
  for (std::uint64_t i = 0; i < 256; ++i) {
    const auto a = collect_trajectory(actor, critic, snap, *env, standard, 1, i);
    const auto b = collect_trajectory(actor, critic, snap, *env, cf, 1, i);
    CHECK(b.stop_reason != StopReason::EarlyStop);
    CHECK((a.stop_reason == StopReason::EarlyStop) == b.counterfactual.has_value());
    if (!b.counterfactual) {
      CHECK(same_trajectory(a, b));
      continue;
    }
    ++compared;
    const std::size_t k = b.counterfactual->hypothetical_stop_index;
    REQUIRE(a.length() == k + 1);
    for (std::size_t j = 0; j <= k; ++j) CHECK(same_step(a.steps[j], b.steps[j]));
    CHECK(b.counterfactual->hypothetical_outcome_reward == b.outcome_reward);
    CHECK(b.effective_length() == k + 1);
    CHECK(b.length() >= a.length());
    // The training view is the standard trajectory.
    CHECK(same_trajectory(b.training_view(-1.0), a));
  }
  CHECK(compared > 10);
}

TEST_CASE("counterfactual records a false positive when the full episode succeeds") {
  // Stop rule fires on the first token, yet the chain is completed.
  const TrapChain env(TrapChainSpec{4, 3, {TokenId{0}, TokenId{0}, TokenId{0}}, 10});
  TabularActor actor(env.state_count(), 4);
  for (StateId s = 0; s < env.state_count(); ++s) actor.set_logits(s, {50, 0, 0, 0});
  const TabularCritic critic(env.state_count());
  StopperSnapshot snap = open_snapshot(0.0);
  snap.stats.frozen_mu = -1.0;
  RolloutSettings rs;
  rs.mode = CollectionMode::counterfactual();
  const auto t = collect_trajectory(actor, critic, snap, env, rs, 0, 0);
  REQUIRE(t.counterfactual.has_value());
  CHECK(t.counterfactual->hypothetical_stop_index == 0);
  CHECK(t.counterfactual->hypothetical_outcome_reward == 1.0);
  CHECK(t.length() == 3);
}

TEST_CASE("batches are reproducible and independent of worker count") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  for (const auto mode : {CollectionMode::standard(), CollectionMode::counterfactual(),
                          CollectionMode::disabled(), CollectionMode::random_stop(0.01)}) {
    RolloutSettings rs;
    rs.mode = mode;
    rs.seed = 5;
    const auto a = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 8, 64, 1);
    const auto b = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 8, 64, 1);
    const auto c = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 8, 64, 4);
    REQUIRE(a.trajectories.size() == 64);
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(same_trajectory(a.trajectories[i], b.trajectories[i]));
      CHECK(same_trajectory(a.trajectories[i], c.trajectories[i]));
    }
    CHECK(a.total_tokens == c.total_tokens);
    CHECK(a.stop_count == c.stop_count);
  }
}

TEST_CASE("trajectories do not depend on collection order") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  const auto batch = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 2, 32);
  for (std::uint64_t i = 32; i-- > 0;) {
    CHECK(same_trajectory(collect_trajectory(actor, critic, open_snapshot(2.0), *env, rs, 2, i),
                          batch.trajectories[i]));
  }
}

TEST_CASE("random stop matches its per-trajectory rate") {
  // A uniform actor essentially never completes the chain, so every episode
  // lasts the full 64 steps and the stop probability is 1 - (1 - h)^64.
  const auto env = make_environment(EnvSpec{}, 64);
  const TabularActor actor(env->state_count(), env->vocab_size());
  const TabularCritic critic(env->state_count());
  const double rho = 0.25;
  const double h = 1.0 - std::pow(1.0 - rho, 1.0 / 64.0);
  RolloutSettings rs;
  rs.mode = CollectionMode::random_stop(h);
  std::size_t stops = 0, total = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto b = collect_batch(actor, critic, open_snapshot(7.0), *env, rs, k, 64);
    stops += b.stop_count;
    total += b.trajectories.size();
  }
  const double sigma = std::sqrt(rho * (1 - rho) / static_cast<double>(total));
  CHECK(std::abs(static_cast<double>(stops) / total - rho) <= 3 * sigma);
  CHECK_THROWS_AS(CollectionMode::random_stop(1.5), InvalidInput);
}

TEST_CASE("token accounting") {
  std::vector<Trajectory> ts;
  for (std::size_t n : {3u, 5u, 7u, 9u}) {
    Trajectory t;
    t.steps.resize(n);
    ts.push_back(t);
  }
  const auto acc = token_accounting(make_batch(ts, 0));
  CHECK(acc.total_tokens == 24);
  CHECK(acc.avg_length == 6.0);
  CHECK(acc.total_original == 24);

  ts[1].counterfactual = Counterfactual{1, 0.0};
  const auto cf = token_accounting(make_batch(ts, 0));
  CHECK(cf.total_tokens == 21);
  CHECK(cf.total_original == 24);
  CHECK(cf.avg_length <= cf.avg_original);
}

TEST_CASE("disabled batches report equal actual and original lengths") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  rs.mode = CollectionMode::disabled();
  const auto acc = token_accounting(collect_batch(actor, critic, open_snapshot(0.0), *env, rs, 0, 64));
  CHECK(acc.total_tokens == acc.total_original);
}

TEST_CASE("regrets lists every generated step") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  const auto b = collect_batch(actor, critic, open_snapshot(2.0), *env, rs, 0, 16);
  CHECK(b.regrets().size() == b.total_tokens);
}

TEST_CASE("trajectory dump has eight tab-separated fields per step") {
  const auto env = desk_env();
  const auto actor = prior_actor(*env);
  const TabularCritic critic(env->state_count());
  RolloutSettings rs;
  const auto t = collect_trajectory(actor, critic, open_snapshot(2.0), *env, rs, 0, 0);
  std::ostringstream os;
  write_trajectory_dump(os, t);
  std::istringstream is(os.str());
  std::size_t lines = 0;
  for (std::string line; std::getline(is, line); ++lines) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 7);
    CHECK(line.rfind(std::to_string(lines) + "\t", 0) == 0);
  }
  CHECK(lines == t.length());
}

TEST_CASE("environment failures abort the rollout with a diagnostic") {
  struct Broken final : Environment {
    std::size_t vocab_size() const override { return 2; }
    std::size_t state_count() const override { return 2; }
    StateId reset() const override { return 0; }
    EnvStep step(StateId, TokenId) const override { throw InvalidInput("boom"); }
    std::string describe(StateId) const override { return "s"; }
    LogitVector prior_logits(StateId) const override { return {0, 0}; }
    std::string fingerprint() const override { return "broken"; }
  } env;
  const TabularActor actor(2, 2);
  const TabularCritic critic(2);
  RolloutSettings rs;
  CHECK_THROWS_WITH_AS(collect_trajectory(actor, critic, StopperSnapshot{}, env, rs, 0, 0),
                       doctest::Contains("boom"), Error);
}
