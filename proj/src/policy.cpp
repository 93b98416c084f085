#include "espo/policy.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

namespace espo {

std::vector<double>& ActorGradient::row(StateId s) {
  auto [it, inserted] = rows_.try_emplace(s);
  if (inserted) it->second.assign(vocab_size_, 0.0);
  return it->second;
}

double ActorGradient::at(StateId s, TokenId a) const {
  const auto it = rows_.find(s);
  return it == rows_.end() ? 0.0 : it->second.at(a.index);
}

void ActorGradient::add_scaled(const ActorGradient& other, double scale) {
  for (const auto& [s, src] : other.rows_) {
    auto& dst = row(s);
    for (std::size_t b = 0; b < src.size(); ++b) dst[b] += scale * src[b];
  }
}

double CriticGradient::get(StateId s) const {
  const auto it = entries_.find(s);
  return it == entries_.end() ? 0.0 : it->second;
}

TabularActor::TabularActor(std::size_t state_count, std::size_t vocab_size)
    : vocab_size_(vocab_size), table_(state_count, LogitVector(vocab_size, 0.0)) {
  if (vocab_size < 2) throw InvalidInput("actor: vocabulary must have at least two tokens");
}

void TabularActor::check(StateId s) const {
  if (s >= table_.size()) throw MissingState("actor: unknown state " + std::to_string(s));
}

const LogitVector& TabularActor::logits(StateId s) const {
  check(s);
  return table_[s];
}

void TabularActor::set_logits(StateId s, LogitVector row) {
  check(s);
  if (row.size() != vocab_size_) throw InvalidInput("actor: logit row has wrong length");
  for (double v : row) {
    if (!std::isfinite(v)) throw InvalidInput("actor: non-finite logit");
  }
  table_[s] = std::move(row);
}

ActorGradient TabularActor::log_prob_grad(StateId s, TokenId action) const {
  if (action.index >= vocab_size_) throw InvalidInput("actor: token out of range");
  const auto lp = log_probs(s);
  ActorGradient g(vocab_size_);
  auto& row = g.row(s);
  for (std::size_t b = 0; b < vocab_size_; ++b) {
    row[b] = (b == action.index ? 1.0 : 0.0) - std::exp(lp[b]);
  }
  return g;
}

void TabularCritic::check(StateId s) const {
  if (s >= table_.size()) throw MissingState("critic: unknown state " + std::to_string(s));
}

double TabularCritic::value(StateId s) const {
  check(s);
  return table_[s];
}

void TabularCritic::set_value(StateId s, double v) {
  check(s);
  if (!std::isfinite(v)) throw InvalidInput("critic: non-finite value");
  table_[s] = v;
}

void apply_updates(TabularActor& actor, TabularCritic& critic, const ActorGradient& actor_grad,
                   const CriticGradient& critic_grad, double lr_actor, double lr_critic) {
  for (const auto& [s, row] : actor_grad.rows()) {
    actor.check(s);
    if (row.size() != actor.vocab_size_) throw InvalidInput("apply_updates: gradient row length");
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw NumericError("apply_updates: non-finite actor gradient at state " + std::to_string(s));
      }
    }
  }
  for (const auto& [s, v] : critic_grad.entries()) {
    critic.check(s);
    if (!std::isfinite(v)) {
      throw NumericError("apply_updates: non-finite critic gradient at state " + std::to_string(s));
    }
  }
  for (const auto& [s, row] : actor_grad.rows()) {
    auto& dst = actor.table_[s];
    for (std::size_t b = 0; b < row.size(); ++b) dst[b] += lr_actor * row[b];
  }
  for (const auto& [s, v] : critic_grad.entries()) critic.table_[s] -= lr_critic * v;
}

void write_parameters(std::ostream& os, const TabularActor& actor, const TabularCritic& critic) {
  for (StateId s = 0; s < actor.state_count(); ++s) {
    const auto& row = actor.logits(s);
    for (std::size_t b = 0; b < row.size(); ++b) {
      os << "actor " << s << ' ' << b << ' ' << format_double(row[b]) << '\n';
    }
  }
  for (StateId s = 0; s < critic.state_count(); ++s) {
    os << "critic " << s << ' ' << format_double(critic.value(s)) << '\n';
  }
}

void read_parameters(std::istream& is, TabularActor& actor, TabularCritic& critic) {
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "actor") {
      StateId s = 0;
      std::size_t b = 0;
      std::string v;
      if (!(ls >> s >> b >> v)) throw InvalidInput("parameters: malformed line '" + line + "'");
      auto row = actor.logits(s);
      if (b >= row.size()) throw InvalidInput("parameters: token out of range");
      row[b] = parse_double(v);
      actor.set_logits(s, std::move(row));
    } else if (kind == "critic") {
      StateId s = 0;
      std::string v;
      if (!(ls >> s >> v)) throw InvalidInput("parameters: malformed line '" + line + "'");
      critic.set_value(s, parse_double(v));
    }
    // Other keys belong to the enclosing checkpoint.
  }
}

}  // namespace espo
