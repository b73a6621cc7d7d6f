#pragma once
//
// Training losses: label-shift importance weights, the prediction loss over a
// consecutive domain pair, the per-class covariance alignment loss and their
// combination into the total objective.
//

#include "airl/datagen.hpp"
#include "airl/tensor.hpp"

#include <span>
#include <vector>

#include <json.hpp>

namespace airl {

// (count_y + smoothing) / (n + smoothing * n_classes).
std::vector<double> estimate_class_priors(std::span<const int> labels, int n_classes, double smoothing = 1.0);
std::vector<double> estimate_class_priors(const LabeledDataset& ds, int n_classes, double smoothing = 1.0);

// w_y = priors_next[y] / priors_t[y]. Throws ParameterError on a zero prior.
std::vector<double> importance_weights(std::span<const double> priors_t, std::span<const double> priors_next);

// w^t_y for each consecutive source pair (t, t+1), t = 1..T-1.
class ClassWeightTable {
 public:
  ClassWeightTable() = default;
  // priors[t-1] holds the label prior of domain t.
  explicit ClassWeightTable(const std::vector<std::vector<double>>& priors);
  static ClassWeightTable from_domains(std::span<const LabeledDataset> domains, int n_classes, double smoothing);

  std::size_t steps() const { return weights_.size(); }
  const std::vector<double>& at(int t) const { return weights_.at(static_cast<std::size_t>(t - 1)); }
  // Maps each label to its class weight for step t.
  std::vector<double> per_sample(int t, std::span<const int> labels) const;

 private:
  std::vector<std::vector<double>> weights_;
};

// Cross-entropy per row, averaged with `weights` (uniform when empty). A
// single logit column is read as the class-1 logit of a logistic model.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights = {});

// Weighted CE of h_t on the attended domain-t batch plus plain CE of h_t on
// the encoded domain-(t+1) batch.
Tensor weighted_cls_loss(const Tensor& logits_f, std::span<const int> labels_t, std::span<const double> sample_weights,
                         const Tensor& logits_g, std::span<const int> labels_next);

// Weighted covariance with weighted mean and (sum w - sum w^2 / sum w) as
// the normalizer; unit weights give the unbiased sample covariance.
Tensor weighted_covariance(const Tensor& z, std::span<const double> weights);

struct CoralResult {
  Tensor loss;
  int counted_classes = 0;
  int skipped_classes = 0;
};

// Sum over classes of ||C_t^y - C_{t+1}^y||_F^2 / (4 d^2). Classes with fewer
// than two rows on either side are skipped.
CoralResult coral_inv_loss(const Tensor& zhat_t, std::span<const int> labels_t, std::span<const double> sample_weights,
                           const Tensor& z_next, std::span<const int> labels_next, int n_classes);

struct StepLoss {
  int t = 0;
  double l_cls = 0.0;
  double l_inv = 0.0;
};

struct LossBreakdown {
  double l_cls = 0.0;
  double l_inv = 0.0;
  double total = 0.0;
  std::vector<StepLoss> per_step;
};

// total = sum_t (l_cls_t + alpha * l_inv_t).
LossBreakdown total_objective(std::span<const StepLoss> steps, double alpha);

void to_json(nlohmann::json& j, const LossBreakdown& b);

}  // namespace airl
