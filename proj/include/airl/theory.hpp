#pragma once
//
// Exact divergences on finite distributions and brute-force checks of the
// error-transfer bound, the conditional decomposition under label
// reweighting, and Pinsker's inequality. All logarithms are natural.
//

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace airl {

struct FiniteDist {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  // Throws ParameterError unless entries are >= 0 and sum to 1 within 1e-12.
  void validate() const;
};

// P(x, y) on an |X| x |Y| grid, row-major by x.
struct FiniteJoint {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<double> p;

  double at(std::size_t x, std::size_t y) const { return p[x * ny + y]; }
  FiniteDist flat() const { return {p}; }
  FiniteDist marginal_x() const;
  FiniteDist marginal_y() const;
  // P(X | Y = y); requires P(Y = y) > 0.
  FiniteDist conditional_x(std::size_t y) const;
  void validate() const;
};

struct KlValue {
  double value = 0.0;
  // False when P puts mass where Q has none; value is then +infinity.
  bool finite = true;
};

KlValue kl_flagged(const FiniteDist& p, const FiniteDist& q);
double kl(const FiniteDist& p, const FiniteDist& q);
double js(const FiniteDist& p, const FiniteDist& q);
double tv(const FiniteDist& p, const FiniteDist& q);

// Symmetric Dirichlet(1) draws.
FiniteDist random_dist(std::size_t m, std::mt19937_64& rng);
FiniteJoint random_joint(std::size_t nx, std::size_t ny, std::mt19937_64& rng);

// P^W(x, y) = P(x, y) w_y.
FiniteJoint reweight_labels(const FiniteJoint& joint, const std::vector<double>& w);
// Law of (m(x), y) for (x, y) ~ joint.
FiniteJoint push_forward(const FiniteJoint& joint, const std::vector<std::size_t>& map);

struct TheorySizes {
  std::size_t max_x = 6;
  std::size_t max_y = 3;
};

struct CheckReport {
  std::string check;
  int trials = 0;
  int violations = 0;
  // Smallest and largest (rhs - lhs) over trials; for the identity check the
  // largest absolute difference is reported in max_abs_error instead.
  double min_slack = 0.0;
  double max_slack = 0.0;
  double max_abs_error = 0.0;
  double max_marginal_error = 0.0;
  std::vector<nlohmann::json> witnesses;

  bool pass() const { return violations == 0; }
};

void to_json(nlohmann::json& j, const CheckReport& r);

// eps_P(h) <= eps_Q(h) + sqrt(2) C sqrt(JS(P, Q)) with random joints and a
// random loss table in [0, C].
CheckReport check_lemma1(int trials, const TheorySizes& sizes, double loss_bound, std::uint64_t seed);

// JS(P_t || m#(P_{t-1}^W)) = E_{y ~ P_t^Y}[JS of the class conditionals] for a
// random label-preserving map m; a violation is a difference above 1e-10 or a
// reweighted label marginal off by more than 1e-12.
CheckReport check_prop1(int trials, const TheorySizes& sizes, std::uint64_t seed);

// TV(P, Q) <= sqrt(KL(P || Q) / 2).
CheckReport check_pinsker(int trials, const TheorySizes& sizes, std::uint64_t seed);

}  // namespace airl
