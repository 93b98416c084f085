#pragma once

#include <iosfwd>
#include <map>
#include <vector>

#include "espo/core.hpp"

namespace espo {

/// Partial derivatives with respect to actor logits, stored sparsely by state
/// and densely over the vocabulary.
class ActorGradient {
 public:
  explicit ActorGradient(std::size_t vocab_size = 0) : vocab_size_(vocab_size) {}

  std::vector<double>& row(StateId s);
  const std::map<StateId, std::vector<double>>& rows() const { return rows_; }

  double at(StateId s, TokenId a) const;
  void add(StateId s, TokenId a, double v) { row(s)[a.index] += v; }
  void add_scaled(const ActorGradient& other, double scale);

  std::size_t vocab_size() const { return vocab_size_; }
  bool empty() const { return rows_.empty(); }

 private:
  std::size_t vocab_size_;
  std::map<StateId, std::vector<double>> rows_;
};

class CriticGradient {
 public:
  double& at(StateId s) { return entries_[s]; }
  double get(StateId s) const;
  const std::map<StateId, double>& entries() const { return entries_; }

 private:
  std::map<StateId, double> entries_;
};

/// Softmax policy with one logit row per state.
class TabularActor {
 public:
  TabularActor(std::size_t state_count, std::size_t vocab_size);

  const LogitVector& logits(StateId s) const;
  void set_logits(StateId s, LogitVector row);
  LogProbVector log_probs(StateId s) const { return log_softmax(logits(s)); }

  /// d log pi(action | s) / d logits(s, b) = 1[b = action] - pi(b | s).
  ActorGradient log_prob_grad(StateId s, TokenId action) const;

  std::size_t state_count() const { return table_.size(); }
  std::size_t vocab_size() const { return vocab_size_; }

  friend bool operator==(const TabularActor&, const TabularActor&) = default;

 private:
  void check(StateId s) const;

  std::size_t vocab_size_;
  std::vector<LogitVector> table_;

  friend void apply_updates(TabularActor&, class TabularCritic&, const ActorGradient&,
                            const CriticGradient&, double, double);
};

class TabularCritic {
 public:
  explicit TabularCritic(std::size_t state_count) : table_(state_count, 0.0) {}

  double value(StateId s) const;
  void set_value(StateId s, double v);
  std::size_t state_count() const { return table_.size(); }

  friend bool operator==(const TabularCritic&, const TabularCritic&) = default;

 private:
  void check(StateId s) const;

  std::vector<double> table_;

  friend void apply_updates(TabularActor&, TabularCritic&, const ActorGradient&,
                            const CriticGradient&, double, double);
};

/// Gradient ascent on the actor (theta += lr * g), descent on the critic
/// (phi -= lr * g). Throws NumericError and leaves both tables untouched if
/// any gradient entry is non-finite.
void apply_updates(TabularActor& actor, TabularCritic& critic, const ActorGradient& actor_grad,
                   const CriticGradient& critic_grad, double lr_actor, double lr_critic);

/// Flat text table: "actor <state> <token> <logit>" and "critic <state> <value>".
void write_parameters(std::ostream& os, const TabularActor& actor, const TabularCritic& critic);
void read_parameters(std::istream& is, TabularActor& actor, TabularCritic& critic);

}  // namespace espo
