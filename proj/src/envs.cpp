#include "espo/envs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace espo {

namespace {

constexpr std::uint64_t kTargetStream = 1;
constexpr std::uint64_t kRepairStream = 2;
constexpr std::uint64_t kPriorStream = 3;

void validate_sequence(const std::vector<TokenId>& seq, std::size_t vocab, std::size_t length,
                       const char* what) {
  if (seq.size() != length) throw InvalidInput(std::string(what) + ": sequence length mismatch");
  for (auto t : seq) {
    if (t.index >= vocab) throw InvalidInput(std::string(what) + ": token out of vocabulary");
  }
}

std::string join(const std::vector<TokenId>& seq) {
  std::ostringstream os;
  for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? "," : "") << seq[i].index;
  return os.str();
}

// Prior row for chain position `pos`: bonus on the correct token, and on
// "hard" positions a bonus on one fixed wrong token. Exactly
// round(hard_fraction * length) positions are hard, chosen by a seeded shuffle.
LogitVector chain_prior(const PriorSpec& prior, std::uint64_t seed, std::size_t vocab,
                        std::size_t length, std::size_t pos, TokenId correct) {
  LogitVector row(vocab, 0.0);
  row[correct.index] += prior.correct_bonus;
  const auto hard = static_cast<std::size_t>(std::lround(prior.hard_fraction * static_cast<double>(length)));
  if (hard == 0) return row;
  std::vector<std::size_t> order(length);
  for (std::size_t i = 0; i < length; ++i) order[i] = i;
  auto shuffle = Rng::stream(seed, {kPriorStream, 0});
  for (std::size_t i = length; i-- > 1;) std::swap(order[i], order[shuffle.next_u64() % (i + 1)]);
  if (std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(hard), pos) ==
      order.begin() + static_cast<std::ptrdiff_t>(hard)) {
    return row;
  }
  auto rng = Rng::stream(seed, {kPriorStream, 0, pos});
  auto wrong = static_cast<std::uint32_t>(rng.next_u64() % (vocab - 1));
  if (wrong >= correct.index) ++wrong;
  row[wrong] += prior.distractor_bonus;
  return row;
}

LogitVector noise_prior(const PriorSpec& prior, std::uint64_t seed, std::size_t vocab,
                        std::uint64_t kind, std::uint64_t index) {
  LogitVector row(vocab, 0.0);
  if (prior.doom_spread == 0.0) return row;
  auto rng = Rng::stream(seed, {kPriorStream, kind, index});
  for (auto& v : row) v = prior.doom_spread * rng.normal();
  return row;
}

}  // namespace

std::vector<TokenId> generate_sequence(std::size_t vocab, std::size_t length, std::uint64_t seed,
                                       std::uint64_t purpose) {
  auto rng = Rng::stream(seed, {purpose});
  std::vector<TokenId> out(length);
  for (auto& t : out) t = TokenId{static_cast<std::uint32_t>(rng.next_u64() % vocab)};
  return out;
}

// ---------------------------------------------------------------------------
// TrapChain
//
// ids: chain[i] = i for i in [0, L] (chain[L] is the success terminal),
//      doom[j]  = L + 1 + j for j in [0, padding].
// ---------------------------------------------------------------------------

TrapChain::TrapChain(TrapChainSpec spec, PriorSpec prior, std::uint64_t prior_seed)
    : spec_(std::move(spec)), prior_(prior), prior_seed_(prior_seed) {
  if (spec_.vocab < 2) throw InvalidInput("trap_chain: vocab must be >= 2");
  if (spec_.target_length < 1) throw InvalidInput("trap_chain: target length must be >= 1");
  validate_sequence(spec_.target_sequence, spec_.vocab, spec_.target_length, "trap_chain");
}

std::size_t TrapChain::state_count() const {
  return spec_.target_length + 1 + spec_.doom_horizon_padding + 1;
}

EnvStep TrapChain::step(StateId state, TokenId action) const {
  if (action.index >= spec_.vocab) throw InvalidInput("trap_chain: token out of range");
  const auto L = static_cast<StateId>(spec_.target_length);
  if (state < L) {
    if (action == spec_.target_sequence[state]) {
      const StateId next = state + 1;
      return {next, next == L, next == L ? 1.0 : 0.0};
    }
    return {L + 1, false, 0.0};
  }
  if (state == L) throw InvalidInput("trap_chain: step from terminal state");
  if (state >= state_count()) throw InvalidInput("trap_chain: unknown state");
  const std::size_t j = state - L - 1;
  if (j == spec_.doom_horizon_padding) return {state, true, 0.0};
  return {state + 1, false, 0.0};
}

std::string TrapChain::describe(StateId state) const {
  if (state <= spec_.target_length) return "chain[" + std::to_string(state) + "]";
  return "doom[" + std::to_string(state - spec_.target_length - 1) + "]";
}

LogitVector TrapChain::prior_logits(StateId state) const {
  if (state >= state_count()) throw MissingState("trap_chain: unknown state");
  if (state < spec_.target_length) {
    return chain_prior(prior_, prior_seed_, spec_.vocab, spec_.target_length, state, spec_.target_sequence[state]);
  }
  if (state == spec_.target_length) return LogitVector(spec_.vocab, 0.0);
  return noise_prior(prior_, prior_seed_, spec_.vocab, 1, state);
}

std::string TrapChain::fingerprint() const {
  std::ostringstream os;
  os << "trap_chain(K=" << spec_.vocab << ",L=" << spec_.target_length
     << ",pad=" << spec_.doom_horizon_padding << ",target=" << join(spec_.target_sequence)
     << ",prior=" << format_double(prior_.correct_bonus) << '/'
     << format_double(prior_.hard_fraction) << '/' << format_double(prior_.distractor_bonus) << '/'
     << format_double(prior_.doom_spread) << '/' << prior_seed_ << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// RecoverableBranch
//
// ids: chain[i]     = i for i in [0, L],
//      detour[i][j] = L + 1 + i*m + j for i in [0, L), j in [0, m),
//      doom[j]      = L + 1 + L*m + j for j in [0, padding].
// With m = 0 this is exactly the TrapChain numbering.
// ---------------------------------------------------------------------------

RecoverableBranch::RecoverableBranch(RecoverableBranchSpec spec, PriorSpec prior,
                                     std::uint64_t prior_seed)
    : spec_(std::move(spec)), prior_(prior), prior_seed_(prior_seed) {
  if (spec_.vocab < 2) throw InvalidInput("recoverable_branch: vocab must be >= 2");
  if (spec_.target_length < 1) throw InvalidInput("recoverable_branch: target length must be >= 1");
  validate_sequence(spec_.target_sequence, spec_.vocab, spec_.target_length, "recoverable_branch");
  if (spec_.repair_window > 0) {
    validate_sequence(spec_.repair_sequence, spec_.vocab, spec_.target_length,
                      "recoverable_branch repair");
  }
}

StateId RecoverableBranch::doom_base() const {
  return static_cast<StateId>(spec_.target_length + 1 + spec_.target_length * spec_.repair_window);
}

std::size_t RecoverableBranch::state_count() const {
  return doom_base() + spec_.doom_horizon_padding + 1;
}

EnvStep RecoverableBranch::step(StateId state, TokenId action) const {
  if (action.index >= spec_.vocab) throw InvalidInput("recoverable_branch: token out of range");
  const auto L = static_cast<StateId>(spec_.target_length);
  const auto m = static_cast<StateId>(spec_.repair_window);
  if (state < L) {
    if (action == spec_.target_sequence[state]) {
      const StateId next = state + 1;
      return {next, next == L, next == L ? 1.0 : 0.0};
    }
    return {m > 0 ? L + 1 + state * m : doom_base(), false, 0.0};
  }
  if (state == L) throw InvalidInput("recoverable_branch: step from terminal state");
  if (state >= state_count()) throw InvalidInput("recoverable_branch: unknown state");
  if (state < doom_base()) {
    const StateId pos = (state - L - 1) / m;
    const StateId j = (state - L - 1) % m;
    if (action == spec_.repair_sequence[pos]) return {pos, false, 0.0};
    if (j + 1 < m) return {state + 1, false, 0.0};
    return {doom_base(), false, 0.0};
  }
  const std::size_t j = state - doom_base();
  if (j == spec_.doom_horizon_padding) return {state, true, 0.0};
  return {state + 1, false, 0.0};
}

std::string RecoverableBranch::describe(StateId state) const {
  const auto L = spec_.target_length;
  if (state <= L) return "chain[" + std::to_string(state) + "]";
  if (state < doom_base()) {
    const auto m = spec_.repair_window;
    return "detour[" + std::to_string((state - L - 1) / m) + "][" +
           std::to_string((state - L - 1) % m) + "]";
  }
  return "doom[" + std::to_string(state - doom_base()) + "]";
}

LogitVector RecoverableBranch::prior_logits(StateId state) const {
  if (state >= state_count()) throw MissingState("recoverable_branch: unknown state");
  const auto L = spec_.target_length;
  if (state < L) {
    return chain_prior(prior_, prior_seed_, spec_.vocab, spec_.target_length, state, spec_.target_sequence[state]);
  }
  if (state == L) return LogitVector(spec_.vocab, 0.0);
  if (state < doom_base()) {
    auto row = noise_prior(prior_, prior_seed_, spec_.vocab, 2, state);
    const auto pos = (state - L - 1) / spec_.repair_window;
    row[spec_.repair_sequence[pos].index] += prior_.repair_bonus;
    return row;
  }
  return noise_prior(prior_, prior_seed_, spec_.vocab, 1, state - doom_base() + L + 1);
}

std::string RecoverableBranch::fingerprint() const {
  std::ostringstream os;
  os << "recoverable_branch(K=" << spec_.vocab << ",L=" << spec_.target_length
     << ",m=" << spec_.repair_window << ",pad=" << spec_.doom_horizon_padding
     << ",target=" << join(spec_.target_sequence) << ",repair=" << join(spec_.repair_sequence)
     << ",prior=" << format_double(prior_.correct_bonus) << '/'
     << format_double(prior_.hard_fraction) << '/' << format_double(prior_.distractor_bonus) << '/'
     << format_double(prior_.doom_spread) << '/' << format_double(prior_.repair_bonus) << '/'
     << prior_seed_ << ')';
  return os.str();
}

// ---------------------------------------------------------------------------

std::shared_ptr<const Environment> make_environment(const EnvSpec& spec, std::size_t t_max) {
  const std::size_t padding = spec.padding.value_or(t_max);
  auto target = spec.target.empty()
                    ? generate_sequence(spec.vocab, spec.length, spec.seed, kTargetStream)
                    : spec.target;
  switch (spec.kind) {
    case EnvKind::TrapChain:
      return std::make_shared<TrapChain>(
          TrapChainSpec{spec.vocab, spec.length, std::move(target), padding}, spec.prior, spec.seed);
    case EnvKind::RecoverableBranch: {
      RecoverableBranchSpec rb{spec.vocab, spec.length, std::move(target),
                               generate_sequence(spec.vocab, spec.length, spec.seed, kRepairStream),
                               spec.repair_window, padding};
      return std::make_shared<RecoverableBranch>(std::move(rb), spec.prior, spec.seed);
    }
  }
  throw InvalidInput("make_environment: unknown kind");
}

std::vector<StateInfo> enumerate_states(const Environment& env, std::size_t state_budget) {
  if (env.state_count() > state_budget) {
    throw StateBudgetExceeded("environment has " + std::to_string(env.state_count()) +
                              " states, budget is " + std::to_string(state_budget));
  }
  std::vector<char> seen(env.state_count(), 0);
  std::vector<char> acted(env.state_count(), 0);
  std::deque<StateId> frontier{env.reset()};
  seen[env.reset()] = 1;
  std::size_t found = 1;
  while (!frontier.empty()) {
    const StateId s = frontier.front();
    frontier.pop_front();
    acted[s] = 1;
    for (std::uint32_t a = 0; a < env.vocab_size(); ++a) {
      const auto r = env.step(s, TokenId{a});
      if (r.next >= seen.size()) throw InvalidInput("enumerate_states: state id out of range");
      if (seen[r.next]) continue;
      seen[r.next] = 1;
      if (++found > state_budget) throw StateBudgetExceeded("enumerate_states: budget exceeded");
      if (!r.terminal) frontier.push_back(r.next);
    }
  }
  std::vector<StateInfo> out;
  for (StateId s = 0; s < seen.size(); ++s) {
    if (seen[s]) out.push_back({s, env.describe(s), !acted[s]});
  }
  return out;
}

}  // namespace espo
