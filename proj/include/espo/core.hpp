#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace espo {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class MissingState : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Non-fatal diagnostics go through here; the default sink is stderr.
void warn(std::string_view message);
void set_warning_sink(std::function<void(std::string_view)> sink);

// ---------------------------------------------------------------------------
// Basic domain types
// ---------------------------------------------------------------------------

using StateId = std::uint32_t;

/// Index of a discrete action in a vocabulary of size K.
struct TokenId {
  std::uint32_t index = 0;

  friend bool operator==(TokenId, TokenId) = default;
  friend auto operator<=>(TokenId, TokenId) = default;
};

using LogitVector = std::vector<double>;
using LogProbVector = std::vector<double>;

// ---------------------------------------------------------------------------
// Random source
// ---------------------------------------------------------------------------

/// Counter-based stream: every (seed, key...) tuple names an independent,
/// reproducible sequence. Streams never share state, so collection order
/// does not affect the numbers a trajectory sees.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  /// Derives a stream for a tuple of keys (e.g. step, trajectory index, purpose).
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 bits of resolution.
  double uniform();

  double normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t x);

/// Shortest text form that parses back to the identical double.
std::string format_double(double v);
double parse_double(std::string_view text);

// ---------------------------------------------------------------------------
// Log-probability utilities
// ---------------------------------------------------------------------------

/// Numerically stable log-softmax. Throws InvalidInput on non-finite entries
/// or fewer than two logits.
LogProbVector log_softmax(std::span<const double> logits);

/// Draws an index distributed as exp(log_probs).
TokenId sample_token(std::span<const double> log_probs, Rng& rng);

/// Index of the first maximal entry.
TokenId argmax(std::span<const double> values);

/// Shannon entropy in nats.
double entropy(std::span<const double> log_probs);

// ---------------------------------------------------------------------------
// Trajectory records
// ---------------------------------------------------------------------------

enum class StopReason { NaturalEnd, HorizonCap, EarlyStop };

const char* to_string(StopReason reason);

struct StepRecord {
  StateId state_id = 0;
  TokenId action;
  double log_prob_sampled = 0.0;
  double log_prob_max = 0.0;
  double value_estimate = 0.0;
  double reward = 0.0;
  double regret_raw = 0.0;
  double regret_normalized = 0.0;
  double smoothed_score = 0.0;
  double entropy = 0.0;
  bool stop_fired = false;
};

/// Result of running the stop criterion without truncating: where it first
/// fired and what the untruncated episode actually earned.
struct Counterfactual {
  std::size_t hypothetical_stop_index = 0;
  double hypothetical_outcome_reward = 0.0;
};

struct Trajectory {
  std::vector<StepRecord> steps;
  StopReason stop_reason = StopReason::NaturalEnd;
  double outcome_reward = 0.0;
  std::optional<Counterfactual> counterfactual;

  std::size_t length() const { return steps.size(); }

  /// Steps that contribute to training. For counterfactual trajectories this
  /// ends at the hypothetical stop index.
  std::size_t effective_length() const;

  /// The trajectory as training sees it: counterfactual tails are dropped and
  /// the hypothetical stop step carries the failure reward.
  Trajectory training_view(double r_fail) const;

  bool success() const { return outcome_reward > 0.5; }
};

}  // namespace espo
