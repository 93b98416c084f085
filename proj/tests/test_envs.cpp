#include <doctest.h>

#include <cmath>
#include <deque>
#include <set>

#include "espo/envs.hpp"
#include "test_util.hpp"

using namespace espo;

namespace {

TrapChain small_chain(std::size_t padding = 2) {
  return TrapChain(TrapChainSpec{4, 3, {TokenId{1}, TokenId{3}, TokenId{0}}, padding});
}

RecoverableBranch small_branch(std::size_t m) {
  return RecoverableBranch(RecoverableBranchSpec{
      4, 3, {TokenId{1}, TokenId{3}, TokenId{0}}, {TokenId{2}, TokenId{2}, TokenId{1}}, m, 2});
}

struct Outcome {
  double reward = 0.0;
  std::size_t length = 0;
  bool terminated = false;
};

Outcome play(const Environment& env, const std::vector<TokenId>& tokens, std::size_t t_max = 64) {
  Outcome o;
  StateId s = env.reset();
  for (std::size_t t = 0; t < t_max; ++t) {
    const auto r = env.step(s, tokens[std::min(t, tokens.size() - 1)]);
    o.reward += r.reward;
    o.length = t + 1;
    if (r.terminal) {
      o.terminated = true;
      return o;
    }
    s = r.next;
  }
  return o;
}

// Exact success probability of a uniform policy, by dynamic programming over states.
double uniform_success(const Environment& env, std::size_t t_max) {
  std::vector<double> p(env.state_count(), 0.0);
  p[env.reset()] = 1.0;
  double success = 0.0;
  const double each = 1.0 / static_cast<double>(env.vocab_size());
  for (std::size_t t = 0; t < t_max; ++t) {
    std::vector<double> next(p.size(), 0.0);
    for (StateId s = 0; s < p.size(); ++s) {
      if (p[s] == 0.0) continue;
      for (std::uint32_t a = 0; a < env.vocab_size(); ++a) {
        const auto r = env.step(s, TokenId{a});
        if (r.terminal) success += p[s] * each * r.reward;
        else next[r.next] += p[s] * each;
      }
    }
    p = std::move(next);
  }
  return success;
}

// States from which some action sequence reaches a rewarding terminal.
std::vector<char> can_succeed(const Environment& env) {
  std::vector<char> good(env.state_count(), 0);
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& info : enumerate_states(env)) {
      if (info.terminal_only || good[info.id]) continue;
      for (std::uint32_t a = 0; a < env.vocab_size(); ++a) {
        const auto r = env.step(info.id, TokenId{a});
        if ((r.terminal && r.reward > 0.5) || (!r.terminal && good[r.next])) {
          good[info.id] = 1;
          changed = true;
          break;
        }
      }
    }
  }
  return good;
}

}  // namespace

TEST_CASE("all-correct sequence succeeds at step L") {
  const auto env = small_chain();
  const auto o = play(env, {TokenId{1}, TokenId{3}, TokenId{0}});
  CHECK(o.terminated);
  CHECK(o.length == 3);
  CHECK(o.reward == 1.0);
}

TEST_CASE("a wrong first token earns nothing whatever follows") {
  const auto env = small_chain();
  for (std::uint32_t a = 0; a < 4; ++a) {
    const auto o = play(env, {TokenId{0}, TokenId{a}});
    CHECK(o.terminated);
    CHECK(o.reward == 0.0);
    CHECK(o.length == 1 + 3);  // the wrong token, then padding + 1 countdown steps
  }
}

TEST_CASE("uniform policy succeeds with probability K^-L") {
  const auto env = small_chain();
  const double exact = uniform_success(env, 64);
  CHECK(std::abs(exact - 1.0 / 64.0) < 1e-15);

  const std::size_t n = 100000;
  std::size_t wins = 0;
  for (std::size_t e = 0; e < n; ++e) {
    auto rng = Rng::stream(2024, {e});
    StateId s = env.reset();
    for (int t = 0; t < 64; ++t) {
      const auto r = env.step(s, TokenId{static_cast<std::uint32_t>(rng.next_u64() % 4)});
      if (r.terminal) {
        wins += r.reward > 0.5;
        break;
      }
      s = r.next;
    }
  }
  const double p = 1.0 / 64.0;
  const double sigma = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(static_cast<double>(wins) - n * p) <= 3 * sigma);
}

TEST_CASE("rewards are zero except at terminals, where they are 0 or 1") {
  const auto chain = small_chain(5);
  const auto branch = small_branch(2);
  for (const Environment* env : {static_cast<const Environment*>(&chain),
                                 static_cast<const Environment*>(&branch)}) {
    for (const auto& info : enumerate_states(*env)) {
      if (info.terminal_only) continue;
      for (std::uint32_t a = 0; a < env->vocab_size(); ++a) {
        const auto r = env->step(info.id, TokenId{a});
        if (r.terminal) CHECK((r.reward == 0.0 || r.reward == 1.0));
        else CHECK(r.reward == 0.0);
      }
    }
  }
}

TEST_CASE("doomed trap-chain states cannot succeed") {
  auto env = make_environment(EnvSpec{}, 64);
  const auto& chain = dynamic_cast<const TrapChain&>(*env);
  const auto good = can_succeed(chain);
  for (const auto& info : enumerate_states(chain)) {
    if (info.terminal_only) continue;
    CHECK(static_cast<bool>(good[info.id]) == !chain.is_doomed(info.id));
  }
}

TEST_CASE("detour states can still succeed") {
  EnvSpec spec;
  spec.kind = EnvKind::RecoverableBranch;
  for (std::size_t m : {1u, 3u}) {
    spec.repair_window = m;
    auto env = make_environment(spec, 64);
    const auto& rb = dynamic_cast<const RecoverableBranch&>(*env);
    const auto good = can_succeed(rb);
    std::size_t detours = 0;
    for (const auto& info : enumerate_states(rb)) {
      if (rb.is_detour(info.id)) {
        ++detours;
        CHECK(good[info.id]);
      }
      if (rb.is_doomed(info.id) && !info.terminal_only) CHECK_FALSE(good[info.id]);
    }
    CHECK(detours == spec.length * m);
  }
}

TEST_CASE("repair returns to the chain") {
  const auto env = small_branch(2);
  // Wrong at position 0, repair with token 2, then finish correctly.
  const auto o = play(env, {TokenId{0}, TokenId{2}, TokenId{1}, TokenId{3}, TokenId{0}});
  CHECK(o.reward == 1.0);
  CHECK(o.length == 5);
  // Repair on the last detour step still counts.
  const auto late = play(env, {TokenId{0}, TokenId{0}, TokenId{2}, TokenId{1}, TokenId{3}, TokenId{0}});
  CHECK(late.reward == 1.0);
}

TEST_CASE("no repair within the window dooms") {
  const auto env = small_branch(2);
  const auto o = play(env, {TokenId{0}, TokenId{0}, TokenId{0}, TokenId{2}, TokenId{1}});
  CHECK(o.terminated);
  CHECK(o.reward == 0.0);
  CHECK(env.is_doomed(env.step(env.step(env.step(0, TokenId{0}).next, TokenId{0}).next,
                               TokenId{0}).next));
}

TEST_CASE("a zero repair window behaves exactly like the trap chain") {
  const auto chain = small_chain();
  const auto branch = small_branch(0);
  REQUIRE(chain.state_count() == branch.state_count());
  for (StateId s = 0; s < chain.state_count(); ++s) {
    if (s == 3) continue;  // success terminal
    CHECK(chain.describe(s) == branch.describe(s));
    for (std::uint32_t a = 0; a < 4; ++a) {
      const auto x = chain.step(s, TokenId{a});
      const auto y = branch.step(s, TokenId{a});
      CHECK(x.next == y.next);
      CHECK(x.terminal == y.terminal);
      CHECK(x.reward == y.reward);
    }
  }
}

TEST_CASE("enumerate_states on K=4 L=3 padding 2 finds 7 states") {
  const auto env = small_chain(2);
  const auto states = enumerate_states(env);
  REQUIRE(states.size() == 7);
  std::set<StateId> ids;
  std::size_t doom = 0;
  for (const auto& s : states) {
    ids.insert(s.id);
    doom += s.label.rfind("doom", 0) == 0;
  }
  CHECK(ids.size() == 7);
  CHECK(doom == 3);
  CHECK(states[3].label == "chain[3]");
  CHECK(states[3].terminal_only);
}

TEST_CASE("L=1 gives the minimal graph") {
  const TrapChain env(TrapChainSpec{2, 1, {TokenId{1}}, 0});
  const auto states = enumerate_states(env);
  CHECK(states.size() == 3);  // start, success, one doom step
}

TEST_CASE("enumeration is stable") {
  auto a = make_environment(EnvSpec{}, 64);
  const auto x = enumerate_states(*a);
  const auto y = enumerate_states(*a);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].id == y[i].id);
    CHECK(x[i].label == y[i].label);
    if (i > 0) CHECK(x[i - 1].id < x[i].id);
  }
  CHECK(x.size() == 12 + 1 + 64 + 1);
}

TEST_CASE("state budget is enforced") {
  const auto env = small_chain(100);
  CHECK_THROWS_AS(enumerate_states(env, 50), StateBudgetExceeded);
  CHECK_NOTHROW(enumerate_states(env, 200));
}

TEST_CASE("invalid specs are rejected") {
  CHECK_THROWS_AS(TrapChain(TrapChainSpec{1, 3, {TokenId{0}, TokenId{0}, TokenId{0}}, 2}), InvalidInput);
  CHECK_THROWS_AS(TrapChain(TrapChainSpec{4, 3, {TokenId{0}, TokenId{9}, TokenId{0}}, 2}), InvalidInput);
  CHECK_THROWS_AS(TrapChain(TrapChainSpec{4, 3, {TokenId{0}}, 2}), InvalidInput);
  const auto env = small_chain();
  CHECK_THROWS_AS(env.step(0, TokenId{4}), InvalidInput);
}

TEST_CASE("generated targets depend only on the seed") {
  const auto a = generate_sequence(8, 12, 7, 1);
  CHECK(a == generate_sequence(8, 12, 7, 1));
  CHECK(a != generate_sequence(8, 12, 8, 1));
  for (auto t : a) CHECK(t.index < 8);
}

TEST_CASE("prior marks exactly round(hard_fraction * L) positions as hard") {
  EnvSpec spec;
  spec.prior = PriorSpec{4.0, 0.25, 5.0, 0.0, 0.0};
  for (std::uint64_t seed : {1u, 7u, 11u}) {
    spec.seed = seed;
    auto env = make_environment(spec, 64);
    const auto& chain = dynamic_cast<const TrapChain&>(*env);
    int hard = 0;
    for (StateId s = 0; s < 12; ++s) {
      const auto row = chain.prior_logits(s);
      const auto correct = chain.spec().target_sequence[s].index;
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hard += best != correct;
    }
    CHECK(hard == 3);
  }
}

TEST_CASE("fingerprints distinguish environments") {
  EnvSpec a, b;
  b.seed = 8;
  CHECK(make_environment(a, 64)->fingerprint() == make_environment(a, 64)->fingerprint());
  CHECK(make_environment(a, 64)->fingerprint() != make_environment(b, 64)->fingerprint());
}
