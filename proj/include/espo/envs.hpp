#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "espo/core.hpp"

namespace espo {

struct EnvStep {
  StateId next = 0;
  bool terminal = false;
  double reward = 0.0;
};

/// Deterministic token-level MDP with a finite, densely numbered state set.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t state_count() const = 0;
  virtual StateId reset() const = 0;
  virtual EnvStep step(StateId state, TokenId action) const = 0;

  /// Human-readable state label, e.g. "chain[3]" or "doom[0]".
  virtual std::string describe(StateId state) const = 0;

  /// Logits of the base policy RL starts from, standing in for a pretrained model.
  virtual LogitVector prior_logits(StateId state) const = 0;

  /// Canonical description; two environments with equal fingerprints behave identically.
  virtual std::string fingerprint() const = 0;
};

/// Initial-policy shape. With all strengths zero the prior is uniform.
struct PriorSpec {
  double correct_bonus = 0.0;
  double hard_fraction = 0.0;
  double distractor_bonus = 0.0;
  double doom_spread = 0.0;
  double repair_bonus = 0.0;
};

struct TrapChainSpec {
  std::size_t vocab = 8;
  std::size_t target_length = 12;
  std::vector<TokenId> target_sequence;
  std::size_t doom_horizon_padding = 64;
};

struct RecoverableBranchSpec {
  std::size_t vocab = 8;
  std::size_t target_length = 12;
  std::vector<TokenId> target_sequence;
  std::vector<TokenId> repair_sequence;
  std::size_t repair_window = 3;
  std::size_t doom_horizon_padding = 64;
};

/// Tokens drawn uniformly from [0, vocab) by a seeded stream.
std::vector<TokenId> generate_sequence(std::size_t vocab, std::size_t length, std::uint64_t seed,
                                       std::uint64_t purpose);

/// Chain of `target_length` correct tokens; the first wrong token enters an
/// absorbing countdown that ends with reward 0.
class TrapChain final : public Environment {
 public:
  TrapChain(TrapChainSpec spec, PriorSpec prior = {}, std::uint64_t prior_seed = 0);

  std::size_t vocab_size() const override { return spec_.vocab; }
  std::size_t state_count() const override;
  StateId reset() const override { return 0; }
  EnvStep step(StateId state, TokenId action) const override;
  std::string describe(StateId state) const override;
  LogitVector prior_logits(StateId state) const override;
  std::string fingerprint() const override;

  const TrapChainSpec& spec() const { return spec_; }
  bool is_doomed(StateId state) const { return state > spec_.target_length; }

 private:
  TrapChainSpec spec_;
  PriorSpec prior_;
  std::uint64_t prior_seed_;
};

/// Like TrapChain, but a wrong token opens a detour of `repair_window` steps in
/// which emitting the position's repair token returns to the same chain position.
class RecoverableBranch final : public Environment {
 public:
  RecoverableBranch(RecoverableBranchSpec spec, PriorSpec prior = {}, std::uint64_t prior_seed = 0);

  std::size_t vocab_size() const override { return spec_.vocab; }
  std::size_t state_count() const override;
  StateId reset() const override { return 0; }
  EnvStep step(StateId state, TokenId action) const override;
  std::string describe(StateId state) const override;
  LogitVector prior_logits(StateId state) const override;
  std::string fingerprint() const override;

  const RecoverableBranchSpec& spec() const { return spec_; }
  bool is_doomed(StateId state) const { return state >= doom_base(); }
  bool is_detour(StateId state) const {
    return state > spec_.target_length && state < doom_base();
  }

 private:
  StateId doom_base() const;

  RecoverableBranchSpec spec_;
  PriorSpec prior_;
  std::uint64_t prior_seed_;
};

enum class EnvKind { TrapChain, RecoverableBranch };

/// Config-level environment description.
struct EnvSpec {
  EnvKind kind = EnvKind::TrapChain;
  std::size_t vocab = 8;
  std::size_t length = 12;
  std::optional<std::size_t> padding;  // unset: pad to the horizon
  std::size_t repair_window = 3;
  std::uint64_t seed = 7;
  std::vector<TokenId> target;  // empty: generated from seed
  PriorSpec prior;
};

std::shared_ptr<const Environment> make_environment(const EnvSpec& spec, std::size_t t_max);

struct StateInfo {
  StateId id = 0;
  std::string label;
  bool terminal_only = false;  // reachable but no action is ever taken there
};

class StateBudgetExceeded : public Error {
 public:
  using Error::Error;
};

/// Reachable states in id order, found by graph search from reset().
std::vector<StateInfo> enumerate_states(const Environment& env, std::size_t state_budget = 1u << 20);

}  // namespace espo
