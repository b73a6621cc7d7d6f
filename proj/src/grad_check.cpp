#include "airl/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace airl {

namespace {

constexpr double kKinkRadius = 1e-6;

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

double evaluate(const std::function<Tensor()>& f, std::vector<double>* kinks) {
  NoGradGuard no_grad;
  KinkMonitor monitor;
  const double v = f().item();
  if (kinks != nullptr) *kinks = monitor.values();
  return v;
}

bool straddles_kink(const std::vector<double>& base, const std::vector<double>& plus,
                    const std::vector<double>& minus) {
  if (plus.size() != minus.size() || plus.size() != base.size()) return true;
  for (std::size_t i = 0; i < plus.size(); ++i) {
    if (sign_of(plus[i]) != sign_of(minus[i])) return true;
    if (plus[i] != minus[i] && std::abs(base[i]) < kKinkRadius) return true;
  }
  return false;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double step,
                           double tol) {
  GradCheckReport report;
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
    if (analytic.back().empty()) analytic.back().assign(p.size(), 0.0);
    p.zero_grad();
  }

  std::vector<double> base;
  report.value = evaluate(f, &base);
  std::vector<double> kinks_plus;
  std::vector<double> kinks_minus;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double fp = evaluate(f, &kinks_plus);
      values[i] = original - step;
      const double fm = evaluate(f, &kinks_minus);
      values[i] = original;
      if (straddles_kink(base, kinks_plus, kinks_minus)) {
        ++report.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel >= tol) ++report.failed;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step,
                           double tol) {
  Tensor x = point.detach();
  return grad_check([&f, &x] { return f(x); }, {x}, step, tol);
}

}  // namespace airl
