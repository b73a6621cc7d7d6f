#pragma once
//
// Training loops: AIRL over the source sequence, its ablations, and the ERM,
// last-domain and fine-tuning baselines on the same encoder and classifier.
//

#include "airl/datagen.hpp"
#include "airl/model.hpp"
#include "airl/objectives.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace airl {

enum class Method { Airl, Erm, Ld, Ft, NoLstm, NoTrans, NoInv };

// "airl", "erm", "ld", "ft", "ablation:no_lstm", "ablation:no_trans",
// "ablation:no_inv".
std::string method_name(Method m);
Method parse_method(const std::string& name);
bool is_baseline(Method m);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_per_domain = 64;
  int epochs = 100;
  double alpha = 1.0;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int early_stop_patience = 10;
  double prior_smoothing = 1.0;
  SplitSpec split;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Rejects unknown keys.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainedModel {
  Method method = Method::Airl;
  AirlConfig model_config;
  TrainConfig train_config;
  AirlState state;
  // AIRL: h*_1..h*_{T-1}. Baselines and no_lstm: the single fixed classifier.
  std::vector<Tensor> classifiers;
  bool fixed_classifier = false;
  int source_count = 0;
  double best_val_acc = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  std::size_t steps_run = 0;
  // In-distribution test accuracy per source domain 1..T, each using
  // source_classifier(t) on Enc(x).
  std::vector<double> id_test_acc;
  // JSON-lines training log.
  std::vector<nlohmann::json> log;

  // Classifier applied to an unseen domain t: h*_{t-1}, rolled forward as
  // needed. Fixed-classifier models return their only classifier.
  Tensor classifier_for(int t) const;
  // Classifier of source domain t: h*_t, with the last source domain using
  // h*_{T-1}.
  Tensor source_classifier(int t) const;
  double mean_id_test_acc() const;
};

// Training split of every source domain, plus validation and in-distribution
// test splits. Each domain t is split with seed (split_seed + t).
struct SourceSplits {
  std::vector<LabeledDataset> train;
  std::vector<LabeledDataset> val;
  std::vector<LabeledDataset> idtest;
};
SourceSplits split_sources(const DomainSequence& seq, const SplitSpec& spec, std::uint64_t split_seed);

// One AIRL minibatch: T blocks of n rows, block t-1 drawn from source domain t.
struct SequenceBatch {
  Tensor x;                              // (T*n) x input_dim
  std::vector<std::vector<int>> labels;  // T blocks of n labels
};

struct ObjectiveOptions {
  bool use_lstm = true;
  bool use_trans = true;
  double alpha = 1.0;
};

struct ObjectiveValue {
  Tensor total;
  std::vector<StepLoss> steps;
  int coral_skipped = 0;
};

// Sum over t = 1..T-1 of L_cls + alpha * L_inv on one batch. With alpha = 0
// the invariance term is left out of the graph.
ObjectiveValue airl_objective(AirlState& state, const SequenceBatch& batch, const ClassWeightTable& weights,
                              const ObjectiveOptions& options);

// Optional per-step observer, called with the step loss record.
using StepObserver = std::function<void(const nlohmann::json&)>;

TrainedModel train_airl(const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                        const StepObserver& observer = {});
TrainedModel train_baseline(Method kind, const DomainSequence& seq, const AirlConfig& model_cfg,
                            const TrainConfig& cfg, const StepObserver& observer = {});
TrainedModel ablate(Method variant, const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                    const StepObserver& observer = {});
// Dispatches on the method.
TrainedModel train_method(Method method, const DomainSequence& seq, const AirlConfig& model_cfg,
                          const TrainConfig& cfg, const StepObserver& observer = {});

// Fraction of rows whose predicted label equals the true label.
double accuracy(std::span<const int> predicted, std::span<const int> labels);
// Accuracy of `classifier` on Enc(x) for a dataset, in inference mode.
double classifier_accuracy(const TrainedModel& model, const Tensor& classifier, const LabeledDataset& ds);

// <dir>/model.ckpt holds all tensors; <dir>/model.json the metadata.
void save_model(const TrainedModel& model, const std::filesystem::path& dir);
TrainedModel load_model(const std::filesystem::path& dir);

Tensor to_tensor(const LabeledDataset& ds);

}  // namespace airl
