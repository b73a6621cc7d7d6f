#pragma once
//
// Inference on unseen domains, the static and dynamic evaluation protocols,
// multi-seed summaries and decision-boundary grids.
//
// Eval-S trains once on domains 1..T and scores T+1..T+K.
// Eval-D retrains from scratch on 1..t for every t in [T, 2T-K] and scores
// t+1..t+K; OODAvg is the mean over all (window, target) pairs and OODWrt the
// smallest window mean.
//

#include "airl/training.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace airl {

// Labels for domain t_target > T using h*_{t_target-1} on Enc(x). Throws
// UsageError for source-domain indices.
std::vector<int> predict_target(const TrainedModel& model, int t_target, const Tensor& x);
double target_accuracy(const TrainedModel& model, int t_target, const LabeledDataset& ds);

struct TargetAccuracy {
  int t = 0;
  double acc = 0.0;
};

struct WindowResult {
  int trained_through = 0;  // domains 1..trained_through were sources
  std::vector<TargetAccuracy> targets;
  double mean() const;
};

enum class Protocol { EvalS, EvalD };
std::string protocol_name(Protocol p);
Protocol parse_protocol(const std::string& name);

struct EvalReport {
  Protocol protocol = Protocol::EvalS;
  int k = 0;
  std::string method;
  std::string dataset;
  std::vector<WindowResult> windows;  // a single window under Eval-S
  std::vector<TargetAccuracy> per_target_acc;
  double ood_avg = 0.0;
  double ood_wrt = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> per_seed;

  // Aggregates recomputed from the windows.
  static EvalReport from_windows(Protocol protocol, int k, std::vector<WindowResult> windows);
  // Throws ParameterError when an invariant fails.
  void validate() const;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

// Trains a model on a sequence whose source_count marks the training prefix.
using ModelFactory = std::function<TrainedModel(const DomainSequence&)>;
// Called after each window is scored.
using WindowObserver = std::function<void(const TrainedModel&, const WindowResult&)>;

EvalReport eval_s(const ModelFactory& factory, const DomainSequence& seq, int k, const WindowObserver& observer = {});
EvalReport eval_d(const ModelFactory& factory, const DomainSequence& seq, int k, const WindowObserver& observer = {});

// Eval-D window starts T..2T-K; throws ParameterError if the sequence is too
// short or K is out of range.
std::vector<int> eval_d_windows(int source_count, int domain_count, int k);
// Scores a trained model on targets t+1..t+K of `seq`.
WindowResult score_window(const TrainedModel& model, const DomainSequence& seq, int trained_through, int k);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

// Multi-seed aggregate: ood_avg / ood_wrt are seed means, per_seed retained.
EvalReport summarize_seeds(std::vector<EvalReport> per_seed);

// Rows `window,t,acc`.
void write_accuracy_csv(const EvalReport& r, const std::filesystem::path& path);
// One row per report: dataset,method,protocol,K,OODAvg,OODAvg_std,OODWrt,
// OODWrt_std,seeds with accuracies in percent.
void write_summary_csv(std::span<const EvalReport> reports, const std::filesystem::path& path);

struct GridBounds {
  double x_min = -2.0;
  double x_max = 2.0;
  double y_min = -2.0;
  double y_max = 2.0;
};

struct BoundaryGrid {
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<int> pred;  // ys.size() x xs.size(), row-major by y
  int domain = 0;
  std::string model_id;

  int at(std::size_t iy, std::size_t ix) const { return pred[iy * xs.size() + ix]; }
};

// Predictions of predict_target on a resolution x resolution grid.
BoundaryGrid export_boundary(const TrainedModel& model, int t, const GridBounds& bounds, int resolution,
                             const std::string& model_id = "");
// Fraction of grid points (optionally restricted by `keep`) where the
// prediction equals `truth`.
double grid_agreement(const BoundaryGrid& grid, const std::function<int(double, double)>& truth,
                      const std::function<bool(double, double)>& keep = {});
// `x1,x2,pred` CSV plus <stem>.json sidecar.
void write_boundary(const BoundaryGrid& grid, const std::filesystem::path& csv_path);

}  // namespace airl
