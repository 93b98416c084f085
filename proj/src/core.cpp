#include "espo/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iostream>
#include <numbers>

namespace espo {

namespace {
std::function<void(std::string_view)>& warning_sink() {
  static std::function<void(std::string_view)> sink = [](std::string_view m) {
    std::cerr << "warning: " << m << '\n';
  };
  return sink;
}
}  // namespace

void warn(std::string_view message) {
  if (warning_sink()) warning_sink()(message);
}

void set_warning_sink(std::function<void(std::string_view)> sink) { warning_sink() = std::move(sink); }

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed);
  for (auto k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

std::uint64_t Rng::next_u64() {
  // SplitMix64
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller; one value per call keeps the stream stateless beyond the counter.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw InvalidInput("not a number: '" + std::string(text) + "'");
  }
  return v;
}

LogProbVector log_softmax(std::span<const double> logits) {
  if (logits.size() < 2) throw InvalidInput("log_softmax: need at least two logits");
  double max = -INFINITY;
  for (double v : logits) {
    if (!std::isfinite(v)) throw InvalidInput("log_softmax: non-finite logit");
    max = std::max(max, v);
  }
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - max);
  const double log_sum = std::log(sum);
  LogProbVector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (logits[i] - max) - log_sum;
  return out;
}

TokenId sample_token(std::span<const double> log_probs, Rng& rng) {
  if (log_probs.empty()) throw InvalidInput("sample_token: empty distribution");
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    const double p = std::exp(log_probs[i]);
    if (p > 0.0) last_positive = i;
    cum += p;
    if (u < cum) return TokenId{static_cast<std::uint32_t>(i)};
  }
  // Rounding left cum slightly below 1.
  return TokenId{static_cast<std::uint32_t>(last_positive)};
}

TokenId argmax(std::span<const double> values) {
  if (values.empty()) throw InvalidInput("argmax: empty vector");
  const auto it = std::max_element(values.begin(), values.end());
  return TokenId{static_cast<std::uint32_t>(it - values.begin())};
}

double entropy(std::span<const double> log_probs) {
  double h = 0.0;
  for (double lp : log_probs) {
    if (lp == -INFINITY) continue;
    h -= std::exp(lp) * lp;
  }
  return std::max(0.0, h);
}

const char* to_string(StopReason reason) {
  switch (reason) {
    case StopReason::NaturalEnd: return "natural_end";
    case StopReason::HorizonCap: return "horizon_cap";
    case StopReason::EarlyStop: return "early_stop";
  }
  return "unknown";
}

std::size_t Trajectory::effective_length() const {
  if (counterfactual) return counterfactual->hypothetical_stop_index + 1;
  return steps.size();
}

Trajectory Trajectory::training_view(double r_fail) const {
  if (!counterfactual) return *this;
  Trajectory view;
  const std::size_t n = effective_length();
  view.steps.assign(steps.begin(), steps.begin() + static_cast<std::ptrdiff_t>(n));
  // Natural end wins a collision at the same step.
  if (n == steps.size() && stop_reason == StopReason::NaturalEnd) {
    view.stop_reason = stop_reason;
    view.outcome_reward = outcome_reward;
    return view;
  }
  for (auto& s : view.steps) s.reward = 0.0;
  view.steps.back().reward = r_fail;
  view.stop_reason = StopReason::EarlyStop;
  view.outcome_reward = r_fail;
  return view;
}

}  // namespace espo
