#include <doctest.h>

#include <cmath>
#include <limits>

#include "espo/core.hpp"
#include "test_util.hpp"

using namespace espo;

TEST_CASE("log_softmax of uniform logits") {
  const auto lp = log_softmax(std::vector<double>{0, 0, 0, 0});
  for (double v : lp) CHECK(v == doctest::Approx(std::log(0.25)).epsilon(1e-14));
}

TEST_CASE("log_softmax matches a long-double oracle") {
  const std::vector<double> x{2, 0};
  const auto lp = log_softmax(x);
  const auto ref = testutil::ref_log_softmax(x);
  CHECK(std::abs(lp[0] - static_cast<double>(ref[0])) < 1e-14);
  CHECK(std::abs(lp[1] - static_cast<double>(ref[1])) < 1e-14);
  CHECK(lp[0] == doctest::Approx(-0.12692801104297263).epsilon(1e-14));
  CHECK(lp[1] == doctest::Approx(-2.1269280110429727).epsilon(1e-14));
}

TEST_CASE("log_softmax is shift invariant and normalized") {
  CHECK(log_softmax(std::vector<double>{5, 5}) == log_softmax(std::vector<double>{0, 0}));
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    auto x = testutil::random_logits(rng, 2 + i % 7, 5.0);
    const auto a = log_softmax(x);
    double mass = 0;
    for (double v : a) mass += std::exp(v);
    CHECK(std::abs(mass - 1.0) < 1e-12);
    for (auto& v : x) v += 17.25;
    const auto b = log_softmax(x);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) < 1e-12);
    CHECK(std::abs(entropy(a) - entropy(b)) < 1e-12);
  }
}

TEST_CASE("log_softmax rejects bad input") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(log_softmax(std::vector<double>{0, inf}), InvalidInput);
  CHECK_THROWS_AS(log_softmax(std::vector<double>{std::nan(""), 0}), InvalidInput);
  CHECK_THROWS_AS(log_softmax(std::vector<double>{1}), InvalidInput);
}

TEST_CASE("sample_token on a one-hot distribution") {
  const double ninf = -std::numeric_limits<double>::infinity();
  const std::vector<double> lp{ninf, ninf, 0.0, ninf};
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) CHECK(sample_token(lp, rng).index == 2);
}

TEST_CASE("sample_token frequency for a fair coin") {
  const auto lp = log_softmax(std::vector<double>{0, 0});
  Rng rng(12345);
  int zeros = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) zeros += sample_token(lp, rng).index == 0;
  const double f = static_cast<double>(zeros) / n;
  CHECK(f >= 0.49);
  CHECK(f <= 0.51);
}

TEST_CASE("sample_token is deterministic per seed") {
  const auto lp = log_softmax(std::vector<double>{0.3, -1.0, 2.0, 0.0});
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng a(s), b(s);
    CHECK(sample_token(lp, a) == sample_token(lp, b));
  }
}

TEST_CASE("entropy values") {
  CHECK(entropy(log_softmax(std::vector<double>{0, 0, 0, 0})) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(entropy(std::vector<double>{0.0, ninf, ninf}) == 0.0);
  const std::vector<double> lp{std::log(0.9), std::log(0.1)};
  const double ref = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(entropy(lp) == doctest::Approx(ref).epsilon(1e-14));
  CHECK(entropy(lp) == doctest::Approx(0.3251).epsilon(1e-4));
}

TEST_CASE("entropy stays within [0, ln K]") {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const std::size_t k = 2 + i % 9;
    const double h = entropy(log_softmax(testutil::random_logits(rng, k, 4.0)));
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST_CASE("argmax picks the first maximum") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 0}).index == 1);
}

TEST_CASE("rng streams are keyed, not sequential") {
  auto a = Rng::stream(9, {1, 2, 3});
  auto b = Rng::stream(9, {1, 2, 3});
  auto c = Rng::stream(9, {1, 3, 2});
  CHECK(a.next_u64() == b.next_u64());
  CHECK(Rng::stream(9, {1, 2, 3}).next_u64() != c.next_u64());
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("format_double round-trips") {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, static_cast<int>(rng.next_u64() % 20) - 10);
    CHECK(parse_double(format_double(x)) == x);
  }
  CHECK_THROWS_AS(parse_double("abc"), InvalidInput);
  CHECK_THROWS_AS(parse_double("1.5x"), InvalidInput);
}

TEST_CASE("training_view truncates counterfactual tails") {
  Trajectory t;
  for (int i = 0; i < 5; ++i) {
    StepRecord r;
    r.state_id = static_cast<StateId>(i);
    t.steps.push_back(r);
  }
  t.steps.back().reward = 1.0;
  t.outcome_reward = 1.0;
  t.stop_reason = StopReason::NaturalEnd;
  CHECK(t.effective_length() == 5);
  CHECK(t.training_view(-1.0).steps.size() == 5);

  t.counterfactual = Counterfactual{2, 1.0};
  CHECK(t.effective_length() == 3);
  const auto v = t.training_view(-1.0);
  REQUIRE(v.steps.size() == 3);
  CHECK(v.steps.back().reward == -1.0);
  CHECK(v.stop_reason == StopReason::EarlyStop);
  CHECK(v.outcome_reward == -1.0);
  CHECK_FALSE(v.counterfactual.has_value());
}

TEST_CASE("stop reason names") {
  CHECK(std::string(to_string(StopReason::EarlyStop)) == "early_stop");
}
