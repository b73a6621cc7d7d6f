#include "airl/theory.hpp"

#include "airl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace airl {

namespace {

void check_same_support(const FiniteDist& p, const FiniteDist& q, const char* op) {
  if (p.size() != q.size() || p.size() == 0) {
    throw ParameterError(std::string(op) + ": distributions must share a nonempty support");
  }
}

// Sum of p log(p / q) over p > 0, assuming q > 0 there.
double relative_entropy(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

std::size_t draw_size(std::size_t max, std::mt19937_64& rng) {
  if (max < 2) throw ParameterError("theory: grid sizes must be at least 2");
  return std::uniform_int_distribution<std::size_t>(2, max)(rng);
}

}  // namespace

void FiniteDist::validate() const {
  if (probs.empty()) throw ParameterError("distribution: empty support");
  double s = 0.0;
  for (double v : probs) {
    if (!(v >= 0.0)) throw ParameterError("distribution: negative or non-finite probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-12) throw ParameterError("distribution: probabilities do not sum to 1");
}

FiniteDist FiniteJoint::marginal_x() const {
  FiniteDist d{std::vector<double>(nx, 0.0)};
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) d.probs[x] += at(x, y);
  return d;
}

FiniteDist FiniteJoint::marginal_y() const {
  FiniteDist d{std::vector<double>(ny, 0.0)};
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) d.probs[y] += at(x, y);
  return d;
}

FiniteDist FiniteJoint::conditional_x(std::size_t y) const {
  double py = 0.0;
  for (std::size_t x = 0; x < nx; ++x) py += at(x, y);
  if (!(py > 0.0)) throw ParameterError("joint: conditional on a zero-probability label");
  FiniteDist d{std::vector<double>(nx)};
  for (std::size_t x = 0; x < nx; ++x) d.probs[x] = at(x, y) / py;
  return d;
}

void FiniteJoint::validate() const {
  if (p.size() != nx * ny) throw ParameterError("joint: grid size mismatch");
  flat().validate();
}

KlValue kl_flagged(const FiniteDist& p, const FiniteDist& q) {
  check_same_support(p, q, "kl");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.probs[i] > 0.0 && !(q.probs[i] > 0.0)) return {std::numeric_limits<double>::infinity(), false};
  }
  return {relative_entropy(p.probs, q.probs), true};
}

double kl(const FiniteDist& p, const FiniteDist& q) { return kl_flagged(p, q).value; }

double js(const FiniteDist& p, const FiniteDist& q) {
  check_same_support(p, q, "js");
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (p.probs[i] + q.probs[i]);
  return 0.5 * (relative_entropy(p.probs, m) + relative_entropy(q.probs, m));
}

double tv(const FiniteDist& p, const FiniteDist& q) {
  check_same_support(p, q, "tv");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p.probs[i] - q.probs[i]);
  return 0.5 * s;
}

FiniteDist random_dist(std::size_t m, std::mt19937_64& rng) {
  std::exponential_distribution<double> gamma1(1.0);
  FiniteDist d{std::vector<double>(m)};
  double s = 0.0;
  for (auto& v : d.probs) {
    v = gamma1(rng);
    s += v;
  }
  for (auto& v : d.probs) v /= s;
  return d;
}

FiniteJoint random_joint(std::size_t nx, std::size_t ny, std::mt19937_64& rng) {
  return {nx, ny, random_dist(nx * ny, rng).probs};
}

FiniteJoint reweight_labels(const FiniteJoint& joint, const std::vector<double>& w) {
  if (w.size() != joint.ny) throw ParameterError("reweight_labels: one weight per label required");
  FiniteJoint out = joint;
  for (std::size_t x = 0; x < joint.nx; ++x)
    for (std::size_t y = 0; y < joint.ny; ++y) out.p[x * joint.ny + y] *= w[y];
  return out;
}

FiniteJoint push_forward(const FiniteJoint& joint, const std::vector<std::size_t>& map) {
  if (map.size() != joint.nx) throw ParameterError("push_forward: map must cover every x");
  FiniteJoint out{joint.nx, joint.ny, std::vector<double>(joint.p.size(), 0.0)};
  for (std::size_t x = 0; x < joint.nx; ++x) {
    if (map[x] >= joint.nx) throw ParameterError("push_forward: map leaves the support");
    for (std::size_t y = 0; y < joint.ny; ++y) out.p[map[x] * joint.ny + y] += joint.at(x, y);
  }
  return out;
}

void to_json(nlohmann::json& j, const CheckReport& r) {
  j = {{"check", r.check},
       {"trials", r.trials},
       {"violations", r.violations},
       {"min_slack", r.min_slack},
       {"max_slack", r.max_slack},
       {"max_abs_error", r.max_abs_error},
       {"max_marginal_error", r.max_marginal_error},
       {"pass", r.pass()},
       {"witnesses", r.witnesses}};
}

CheckReport check_lemma1(int trials, const TheorySizes& sizes, double loss_bound, std::uint64_t seed) {
  if (trials < 1) throw ParameterError("check_lemma1: trials must be at least 1");
  if (!(loss_bound > 0.0)) throw ParameterError("check_lemma1: loss bound must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> loss(0.0, loss_bound);
  CheckReport r;
  r.check = "lemma1";
  r.trials = trials;
  r.min_slack = std::numeric_limits<double>::infinity();
  r.max_slack = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < trials; ++k) {
    const std::size_t nx = draw_size(sizes.max_x, rng);
    const std::size_t ny = draw_size(sizes.max_y, rng);
    const FiniteJoint p = random_joint(nx, ny, rng);
    const FiniteJoint q = random_joint(nx, ny, rng);
    std::vector<double> table(nx * ny);
    for (auto& v : table) v = loss(rng);
    double eps_p = 0.0;
    double eps_q = 0.0;
    for (std::size_t i = 0; i < table.size(); ++i) {
      eps_p += p.p[i] * table[i];
      eps_q += q.p[i] * table[i];
    }
    const double bound = eps_q + std::sqrt(2.0) * loss_bound * std::sqrt(js(p.flat(), q.flat()));
    const double slack = bound - eps_p;
    r.min_slack = std::min(r.min_slack, slack);
    r.max_slack = std::max(r.max_slack, slack);
    if (slack < 0.0) {
      ++r.violations;
      r.witnesses.push_back({{"trial", k}, {"p", p.p}, {"q", q.p}, {"loss", table}, {"slack", slack}});
    }
  }
  return r;
}

CheckReport check_prop1(int trials, const TheorySizes& sizes, std::uint64_t seed) {
  if (trials < 1) throw ParameterError("check_prop1: trials must be at least 1");
  std::mt19937_64 rng(seed);
  CheckReport r;
  r.check = "prop1";
  r.trials = trials;
  r.min_slack = std::numeric_limits<double>::infinity();
  r.max_slack = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < trials; ++k) {
    const std::size_t nx = draw_size(sizes.max_x, rng);
    const std::size_t ny = draw_size(sizes.max_y, rng);
    FiniteJoint prev;
    FiniteJoint cur;
    FiniteDist prev_y;
    FiniteDist cur_y;
    // Redraw until every label has positive mass in both domains.
    do {
      prev = random_joint(nx, ny, rng);
      cur = random_joint(nx, ny, rng);
      prev_y = prev.marginal_y();
      cur_y = cur.marginal_y();
    } while (std::any_of(prev_y.probs.begin(), prev_y.probs.end(), [](double v) { return !(v > 0.0); }) ||
             std::any_of(cur_y.probs.begin(), cur_y.probs.end(), [](double v) { return !(v > 0.0); }));

    std::vector<double> w(ny);
    for (std::size_t y = 0; y < ny; ++y) w[y] = cur_y.probs[y] / prev_y.probs[y];
    const FiniteJoint weighted = reweight_labels(prev, w);

    // Alternate between permutations and arbitrary many-to-one maps.
    std::vector<std::size_t> map(nx);
    if (k % 2 == 0) {
      for (std::size_t x = 0; x < nx; ++x) map[x] = x;
      std::shuffle(map.begin(), map.end(), rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, nx - 1);
      for (auto& v : map) v = pick(rng);
    }
    const FiniteJoint moved = push_forward(weighted, map);

    const FiniteDist moved_y = moved.marginal_y();
    double marginal_err = 0.0;
    for (std::size_t y = 0; y < ny; ++y) marginal_err = std::max(marginal_err, std::abs(moved_y.probs[y] - cur_y.probs[y]));

    const double lhs = js(cur.flat(), moved.flat());
    double rhs = 0.0;
    for (std::size_t y = 0; y < ny; ++y) rhs += cur_y.probs[y] * js(cur.conditional_x(y), moved.conditional_x(y));
    const double err = std::abs(lhs - rhs);
    r.max_abs_error = std::max(r.max_abs_error, err);
    r.max_marginal_error = std::max(r.max_marginal_error, marginal_err);
    r.min_slack = std::min(r.min_slack, 1e-10 - err);
    r.max_slack = std::max(r.max_slack, 1e-10 - err);
    if (err >= 1e-10 || marginal_err > 1e-12) {
      ++r.violations;
      r.witnesses.push_back({{"trial", k},
                             {"prev", prev.p},
                             {"cur", cur.p},
                             {"map", map},
                             {"lhs", lhs},
                             {"rhs", rhs},
                             {"marginal_error", marginal_err}});
    }
  }
  return r;
}

CheckReport check_pinsker(int trials, const TheorySizes& sizes, std::uint64_t seed) {
  if (trials < 1) throw ParameterError("check_pinsker: trials must be at least 1");
  std::mt19937_64 rng(seed);
  CheckReport r;
  r.check = "pinsker";
  r.trials = trials;
  r.min_slack = std::numeric_limits<double>::infinity();
  r.max_slack = -std::numeric_limits<double>::infinity();
  const std::size_t max_m = sizes.max_x * sizes.max_y;
  for (int k = 0; k < trials; ++k) {
    const std::size_t m = draw_size(max_m, rng);
    const FiniteDist p = random_dist(m, rng);
    const FiniteDist q = random_dist(m, rng);
    const double bound = std::sqrt(kl(p, q) / 2.0);
    const double slack = bound - tv(p, q);
    r.min_slack = std::min(r.min_slack, slack);
    r.max_slack = std::max(r.max_slack, slack);
    if (slack < 0.0) {
      ++r.violations;
      r.witnesses.push_back({{"trial", k}, {"p", p.probs}, {"q", q.probs}, {"slack", slack}});
    }
  }
  return r;
}

}  // namespace airl
