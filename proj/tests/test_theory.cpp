#include "airl/datagen.hpp"
#include "airl/theory.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

using namespace airl;

namespace {

const double kLn2 = std::numbers::ln2;

}  // namespace

TEST_CASE("js basics") {
  const FiniteDist p{{0.2, 0.3, 0.5}};
  CHECK(js(p, p) == 0.0);
  const FiniteDist a{{1.0, 0.0}};
  const FiniteDist b{{0.0, 1.0}};
  CHECK(js(a, b) == doctest::Approx(kLn2).epsilon(1e-15));
}

TEST_CASE("js of two Bernoullis matches the four-term sum") {
  const double p0 = 0.5, p1 = 0.5, q0 = 0.25, q1 = 0.75;
  const double m0 = (p0 + q0) / 2, m1 = (p1 + q1) / 2;
  const double oracle =
      0.5 * (p0 * std::log(p0 / m0) + p1 * std::log(p1 / m1)) + 0.5 * (q0 * std::log(q0 / m0) + q1 * std::log(q1 / m1));
  const double v = js(FiniteDist{{p0, p1}}, FiniteDist{{q0, q1}});
  CHECK(v == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(v == doctest::Approx(0.0338).epsilon(1e-3));
}

TEST_CASE("divergence properties on random distributions") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + static_cast<std::size_t>(trial % 5);
    const FiniteDist p = random_dist(m, rng);
    const FiniteDist q = random_dist(m, rng);
    p.validate();
    const double j = js(p, q);
    CHECK(j >= 0.0);
    CHECK(j <= kLn2 + 1e-15);
    CHECK(j == doctest::Approx(js(q, p)).epsilon(1e-13));
    CHECK(kl(p, q) > 0.0);
    CHECK(std::abs(kl(p, p)) < 1e-15);
    CHECK(tv(p, q) <= std::sqrt(kl(p, q) / 2.0) + 1e-15);
  }
}

TEST_CASE("kl flags an absolute-continuity violation") {
  const FiniteDist p{{0.5, 0.5}};
  const FiniteDist q{{1.0, 0.0}};
  const KlValue v = kl_flagged(p, q);
  CHECK_FALSE(v.finite);
  CHECK(std::isinf(v.value));
  CHECK(kl_flagged(q, p).finite);
  CHECK(tv(FiniteDist{{1.0, 0.0}}, FiniteDist{{0.0, 1.0}}) == 1.0);
  CHECK(std::isinf(kl(FiniteDist{{1.0, 0.0}}, FiniteDist{{0.0, 1.0}})));
}

TEST_CASE("distribution validation") {
  const FiniteDist too_much{{0.5, 0.6}};
  const FiniteDist negative{{1.5, -0.5}};
  const FiniteDist fine{{0.25, 0.75}};
  CHECK_THROWS_AS(too_much.validate(), ParameterError);
  CHECK_THROWS_AS(negative.validate(), ParameterError);
  CHECK_NOTHROW(fine.validate());
}

TEST_CASE("joint marginals, reweighting and push-forward") {
  const FiniteJoint j{3, 2, {0.1, 0.2, 0.3, 0.1, 0.05, 0.25}};
  j.validate();
  const FiniteDist py = j.marginal_y();
  CHECK(py.probs[0] == doctest::Approx(0.45));
  CHECK(py.probs[1] == doctest::Approx(0.55));
  const FiniteDist c0 = j.conditional_x(0);
  CHECK(c0.probs[0] == doctest::Approx(0.1 / 0.45));
  // Reweighting to a target label marginal.
  const std::vector<double> target{0.3, 0.7};
  const FiniteJoint w = reweight_labels(j, {target[0] / py.probs[0], target[1] / py.probs[1]});
  CHECK(std::abs(w.marginal_y().probs[0] - 0.3) < 1e-12);
  CHECK(std::abs(w.marginal_y().probs[1] - 0.7) < 1e-12);
  // Many-to-one map keeps labels and merges x mass.
  const FiniteJoint pushed = push_forward(j, {1, 1, 0});
  CHECK(pushed.at(1, 0) == doctest::Approx(0.4));
  CHECK(pushed.at(0, 1) == doctest::Approx(0.25));
  CHECK(pushed.marginal_y().probs[0] == doctest::Approx(py.probs[0]));
}

TEST_CASE("identity map with equal domains makes both sides of the decomposition zero") {
  std::mt19937_64 rng(2);
  const FiniteJoint j = random_joint(4, 3, rng);
  const FiniteJoint same = push_forward(j, {0, 1, 2, 3});
  CHECK(js(j.flat(), same.flat()) == 0.0);
  double rhs = 0.0;
  const FiniteDist py = j.marginal_y();
  for (std::size_t y = 0; y < 3; ++y) rhs += py.probs[y] * js(j.conditional_x(y), same.conditional_x(y));
  CHECK(rhs == 0.0);
}

TEST_CASE("decomposition identity over 1000 random trials") {
  const CheckReport r = check_prop1(1000, TheorySizes{}, 7);
  CHECK(r.trials == 1000);
  CHECK(r.violations == 0);
  CHECK(r.max_abs_error < 1e-10);
  CHECK(r.max_marginal_error <= 1e-12);
}

TEST_CASE("error-transfer bound over 1000 random trials") {
  const CheckReport r = check_lemma1(1000, TheorySizes{}, 1.0, 3);
  CHECK(r.violations == 0);
  CHECK(r.min_slack >= 0.0);
  CHECK(r.pass());
  const CheckReport scaled = check_lemma1(200, TheorySizes{}, 5.0, 4);
  CHECK(scaled.pass());
}

TEST_CASE("error-transfer bound worst case with disjoint supports") {
  // P on x = 0, Q on x = 1, loss C on P's support and 0 on Q's.
  const double C = 1.0;
  const FiniteDist p{{1.0, 0.0}};
  const FiniteDist q{{0.0, 1.0}};
  const double eps_p = C;
  const double eps_q = 0.0;
  const double bound = eps_q + std::sqrt(2.0) * C * std::sqrt(js(p, q));
  CHECK(bound == doctest::Approx(std::sqrt(2.0 * kLn2)).epsilon(1e-15));
  CHECK(eps_p <= bound);
}

TEST_CASE("Pinsker over 1000 random trials") {
  const CheckReport r = check_pinsker(1000, TheorySizes{}, 11);
  CHECK(r.violations == 0);
  CHECK(r.min_slack >= 0.0);
  CHECK(r.max_slack >= r.min_slack);
}

TEST_CASE("checks are reproducible by seed and serialize their slack") {
  const nlohmann::json a = check_pinsker(50, TheorySizes{}, 1);
  const nlohmann::json b = check_pinsker(50, TheorySizes{}, 1);
  CHECK(a == b);
  CHECK(a.contains("max_slack"));
  CHECK(a.contains("min_slack"));
  CHECK(a.at("violations") == 0);
}
