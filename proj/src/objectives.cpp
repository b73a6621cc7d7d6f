#include "airl/objectives.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace airl {

std::vector<double> estimate_class_priors(std::span<const int> labels, int n_classes, double smoothing) {
  if (labels.empty()) throw ParameterError("estimate_class_priors: empty dataset");
  if (n_classes < 1) throw ParameterError("estimate_class_priors: n_classes must be positive");
  if (smoothing < 0.0) throw ParameterError("estimate_class_priors: smoothing must be nonnegative");
  std::vector<double> counts(static_cast<std::size_t>(n_classes), 0.0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ParameterError("estimate_class_priors: label " + std::to_string(y) + " out of range");
    counts[static_cast<std::size_t>(y)] += 1.0;
  }
  const double denom = static_cast<double>(labels.size()) + smoothing * n_classes;
  for (auto& c : counts) c = (c + smoothing) / denom;
  return counts;
}

std::vector<double> estimate_class_priors(const LabeledDataset& ds, int n_classes, double smoothing) {
  return estimate_class_priors(std::span<const int>(ds.labels), n_classes, smoothing);
}

std::vector<double> importance_weights(std::span<const double> priors_t, std::span<const double> priors_next) {
  if (priors_t.size() != priors_next.size()) throw ParameterError("importance_weights: prior lengths differ");
  std::vector<double> w(priors_t.size());
  for (std::size_t y = 0; y < w.size(); ++y) {
    if (!(priors_t[y] > 0.0)) {
      throw ParameterError("importance_weights: class " + std::to_string(y) + " has zero prior in the current domain");
    }
    w[y] = priors_next[y] / priors_t[y];
  }
  return w;
}

ClassWeightTable::ClassWeightTable(const std::vector<std::vector<double>>& priors) {
  for (std::size_t t = 0; t + 1 < priors.size(); ++t) weights_.push_back(importance_weights(priors[t], priors[t + 1]));
}

ClassWeightTable ClassWeightTable::from_domains(std::span<const LabeledDataset> domains, int n_classes,
                                                double smoothing) {
  std::vector<std::vector<double>> priors;
  for (const auto& d : domains) priors.push_back(estimate_class_priors(d, n_classes, smoothing));
  return ClassWeightTable(priors);
}

std::vector<double> ClassWeightTable::per_sample(int t, std::span<const int> labels) const {
  const auto& w = at(t);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = w.at(static_cast<std::size_t>(labels[i]));
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights) {
  if (logits.rank() != 2 || logits.rows() != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
  }
  if (!weights.empty() && weights.size() != labels.size()) throw DimensionError("cross_entropy: weight count mismatch");
  const std::size_t n = labels.size();
  const bool binary = logits.cols() == 1;
  const std::size_t k = binary ? 2 : logits.cols();
  // Binary: log_softmax over [0, z] gives log(1 - sigmoid(z)), log(sigmoid(z)).
  Tensor full = binary ? concat({Tensor::zeros({n, 1}), logits}, 1) : logits;
  Tensor logp = log_softmax(full, 1);

  std::vector<double> mask(n * k, 0.0);
  std::vector<double> w(n, 1.0);
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (!(total > 0.0)) throw ParameterError("cross_entropy: weights must have positive sum");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ParameterError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    mask[i * k + static_cast<std::size_t>(labels[i])] = w[i] / total;
  }
  return scale(reduce_sum(mul(logp, Tensor::from({n, k}, std::move(mask)))), -1.0);
}

Tensor weighted_cls_loss(const Tensor& logits_f, std::span<const int> labels_t, std::span<const double> sample_weights,
                         const Tensor& logits_g, std::span<const int> labels_next) {
  return add(cross_entropy(logits_f, labels_t, sample_weights), cross_entropy(logits_g, labels_next));
}

Tensor weighted_covariance(const Tensor& z, std::span<const double> weights) {
  const std::size_t n = z.rows();
  std::vector<double> w(n, 1.0);
  if (!weights.empty()) {
    if (weights.size() != n) throw DimensionError("weighted_covariance: weight count mismatch");
    w.assign(weights.begin(), weights.end());
  }
  const double sw = std::accumulate(w.begin(), w.end(), 0.0);
  double sw2 = 0.0;
  for (double v : w) sw2 += v * v;
  const double denom = sw - sw2 / sw;
  if (!(denom > 0.0)) throw ParameterError("weighted_covariance: need at least two weighted rows");

  Tensor wcol = Tensor::from({n, 1}, w);
  Tensor mean = scale(reduce_sum(mul(wcol, z), 0), 1.0 / sw);
  Tensor centered = sub(z, mean);
  return scale(matmul(transpose(mul(wcol, centered)), centered), 1.0 / denom);
}

CoralResult coral_inv_loss(const Tensor& zhat_t, std::span<const int> labels_t, std::span<const double> sample_weights,
                           const Tensor& z_next, std::span<const int> labels_next, int n_classes) {
  if (zhat_t.rank() != 2 || z_next.rank() != 2 || zhat_t.cols() != z_next.cols()) {
    throw DimensionError("coral_inv_loss: representation widths differ: " + shape_str(zhat_t.shape()) + " vs " +
                         shape_str(z_next.shape()));
  }
  if (zhat_t.rows() != labels_t.size() || z_next.rows() != labels_next.size()) {
    throw DimensionError("coral_inv_loss: label count mismatch");
  }
  const double d = static_cast<double>(zhat_t.cols());
  CoralResult out;
  out.loss = Tensor::scalar(0.0);
  for (int y = 0; y < n_classes; ++y) {
    std::vector<std::size_t> rows_t;
    std::vector<std::size_t> rows_n;
    std::vector<double> w;
    for (std::size_t i = 0; i < labels_t.size(); ++i) {
      if (labels_t[i] != y) continue;
      rows_t.push_back(i);
      w.push_back(sample_weights.empty() ? 1.0 : sample_weights[i]);
    }
    for (std::size_t i = 0; i < labels_next.size(); ++i) {
      if (labels_next[i] == y) rows_n.push_back(i);
    }
    if (rows_t.size() < 2 || rows_n.size() < 2) {
      ++out.skipped_classes;
      continue;
    }
    Tensor c_t = weighted_covariance(select_rows(zhat_t, rows_t), w);
    Tensor c_n = weighted_covariance(select_rows(z_next, rows_n), {});
    out.loss = add(out.loss, scale(frobenius_norm_squared(sub(c_t, c_n)), 1.0 / (4.0 * d * d)));
    ++out.counted_classes;
  }
  return out;
}

LossBreakdown total_objective(std::span<const StepLoss> steps, double alpha) {
  if (alpha < 0.0) throw ParameterError("total_objective: alpha must be nonnegative");
  LossBreakdown b;
  b.per_step.assign(steps.begin(), steps.end());
  for (const auto& s : steps) {
    b.l_cls += s.l_cls;
    b.l_inv += s.l_inv;
    b.total += s.l_cls + alpha * s.l_inv;
  }
  return b;
}

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"l_cls", b.l_cls}, {"l_inv", b.l_inv}, {"total", b.total}, {"per_step", nlohmann::json::array()}};
  for (const auto& s : b.per_step) j["per_step"].push_back({{"t", s.t}, {"l_cls", s.l_cls}, {"l_inv", s.l_inv}});
}

}  // namespace airl
