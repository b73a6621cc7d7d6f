#include "airl/training.hpp"

#include "airl/checkpoint.hpp"
#include "airl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace airl {

namespace {

constexpr std::uint64_t kBatchStream = 0x9E3779B97F4A7C15ULL;

// Draws index chunks of size n from a fresh permutation each epoch.
class EpochSampler {
 public:
  EpochSampler(std::size_t rows, std::size_t n) : order_(rows), n_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
  std::size_t steps_per_epoch() const { return order_.size() / n_; }
  void shuffle(Rng& rng) { std::shuffle(order_.begin(), order_.end(), rng); }
  std::span<const std::size_t> chunk(std::size_t step) const {
    return std::span<const std::size_t>(order_).subspan(step * n_, n_);
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t n_;
};

struct DomainBatch {
  std::vector<double> x;
  std::vector<int> y;
};

void append_rows(DomainBatch& b, const LabeledDataset& ds, std::span<const std::size_t> rows) {
  for (auto r : rows) {
    b.x.insert(b.x.end(), ds.row(r), ds.row(r) + ds.feature_dim);
    b.y.push_back(ds.labels[r]);
  }
}

Tensor batch_tensor(const DomainBatch& b, std::size_t dim) { return Tensor::from({b.y.size(), dim}, b.x); }

void check_sequence(const DomainSequence& seq, const AirlConfig& model_cfg, int min_sources) {
  seq.validate();
  if (seq.source_count < min_sources) {
    throw TrainingError("degenerate sequence: need at least " + std::to_string(min_sources) + " source domains, got " +
                        std::to_string(seq.source_count));
  }
  if (seq.feature_dim() != model_cfg.input_dim) {
    throw TrainingError("feature dimension " + std::to_string(seq.feature_dim()) + " does not match model input_dim " +
                        std::to_string(model_cfg.input_dim));
  }
  if (seq.n_classes != model_cfg.n_classes) throw TrainingError("class count does not match model config");
}

TrainedModel fresh_model(Method method, const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg) {
  TrainedModel m;
  m.method = method;
  m.model_config = model_cfg;
  m.train_config = cfg;
  m.state = AirlState::init(model_cfg, cfg.seed);
  m.source_count = seq.source_count;
  return m;
}

Tensor detached(const Tensor& t) { return t.detach(); }

std::vector<Tensor> materialize(const AirlState& state, int source_count) {
  NoGradGuard guard;
  std::vector<Tensor> hs{state.h1.detach()};
  hs = roll_classifiers(state, hs, static_cast<std::size_t>(std::max(source_count - 1, 1)));
  std::vector<Tensor> out;
  for (const auto& h : hs) out.push_back(detached(h));
  return out;
}

// Tracks the best validation accuracy and the patience counter.
struct Selector {
  double best = -1.0;
  int best_epoch = 0;
  int since_best = 0;

  // Returns true when the checkpoint should be kept: ties go to the later
  // epoch, while patience only resets on a strict improvement.
  bool offer(double acc, int epoch) {
    if (acc > best) {
      since_best = 0;
    } else {
      ++since_best;
    }
    if (acc >= best) {
      best = acc;
      best_epoch = epoch;
      return true;
    }
    return false;
  }
};

void finish(TrainedModel& m, const SourceSplits& splits) {
  m.id_test_acc.clear();
  for (int t = 1; t <= m.source_count; ++t) {
    m.id_test_acc.push_back(
        classifier_accuracy(m, m.source_classifier(t), splits.idtest[static_cast<std::size_t>(t - 1)]));
  }
}

[[noreturn]] void rethrow_numeric(const NumericError& e, std::size_t step) {
  throw TrainingError("non-finite value at optimization step " + std::to_string(step) + ": " + e.what());
}

// ---- AIRL and its ablations ---------------------------------------------------

TrainedModel run_airl(Method method, const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                      const StepObserver& observer) {
  cfg.validate();
  check_sequence(seq, model_cfg, 2);
  const bool use_lstm = method != Method::NoLstm;
  const bool use_trans = method != Method::NoTrans;
  const double alpha = method == Method::NoInv ? 0.0 : cfg.alpha;

  TrainedModel m = fresh_model(method, seq, model_cfg, cfg);
  m.train_config.alpha = alpha;
  m.fixed_classifier = !use_lstm;
  const auto T = static_cast<std::size_t>(seq.source_count);
  const std::size_t n = cfg.batch_per_domain;
  const std::size_t in_dim = model_cfg.input_dim;
  const SourceSplits splits = split_sources(seq, cfg.split, cfg.seed);
  const ClassWeightTable weights = ClassWeightTable::from_domains(splits.train, seq.n_classes, cfg.prior_smoothing);

  std::vector<EpochSampler> samplers;
  for (const auto& d : splits.train) {
    if (d.size() < n) throw TrainingError("training split smaller than the batch size");
    samplers.emplace_back(d.size(), n);
  }
  std::size_t steps_per_epoch = samplers.front().steps_per_epoch();
  for (const auto& s : samplers) steps_per_epoch = std::min(steps_per_epoch, s.steps_per_epoch());

  std::vector<Tensor> params = m.state.encoder_parameters();
  if (use_trans) {
    for (auto& p : m.state.attention_parameters()) params.push_back(p);
  }
  // The generator only enters the loss from the second pair onwards.
  if (use_lstm && T >= 3) {
    for (auto& p : m.state.generator_parameters()) params.push_back(p);
  }
  params.push_back(m.state.h1);
  Adam opt(params, AdamOptions{.lr = cfg.lr});

  Rng rng(cfg.seed ^ kBatchStream);
  Selector sel;
  AirlState best_state = m.state.clone();
  std::vector<Tensor> best_classifiers = use_lstm ? materialize(m.state, seq.source_count)
                                                  : std::vector<Tensor>{m.state.h1.detach()};
  const LabeledDataset& val = splits.val.back();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (auto& s : samplers) s.shuffle(rng);
    for (std::size_t k = 0; k < steps_per_epoch; ++k) {
      DomainBatch batch;
      std::vector<std::vector<int>> labels(T);
      for (std::size_t t = 0; t < T; ++t) {
        DomainBatch part;
        append_rows(part, splits.train[t], samplers[t].chunk(k));
        batch.x.insert(batch.x.end(), part.x.begin(), part.x.end());
        labels[t] = std::move(part.y);
      }
      try {
        const SequenceBatch sb{Tensor::from({T * n, in_dim}, batch.x), std::move(labels)};
        ObjectiveValue value = airl_objective(m.state, sb, weights, {use_lstm, use_trans, alpha});
        Tensor objective = value.total;
        const std::vector<StepLoss>& steps = value.steps;
        const int skipped = value.coral_skipped;
        backward(objective);
        opt.step();
        ++m.steps_run;

        const LossBreakdown b = total_objective(steps, alpha);
        nlohmann::json rec = {{"step", m.steps_run}, {"epoch", epoch}, {"loss", b}, {"coral_skipped", skipped}};
        if (observer) observer(rec);
        m.log.push_back(std::move(rec));
      } catch (const NumericError& e) {
        GradTape::active().clear();
        rethrow_numeric(e, m.steps_run + 1);
      }
    }
    m.epochs_run = epoch;
    std::vector<Tensor> hs = use_lstm ? materialize(m.state, seq.source_count)
                                      : std::vector<Tensor>{m.state.h1.detach()};
    m.classifiers = hs;
    const double acc = classifier_accuracy(m, m.classifier_for(seq.source_count), val);
    const bool improved = sel.offer(acc, epoch);
    if (improved) {
      best_state = m.state.clone();
      best_classifiers = hs;
    }
    m.log.push_back({{"epoch", epoch}, {"val_acc", acc}, {"best", improved}});
    if (sel.since_best >= cfg.early_stop_patience) break;
  }

  m.state = std::move(best_state);
  m.classifiers = std::move(best_classifiers);
  m.best_val_acc = sel.best;
  m.best_epoch = sel.best_epoch;
  finish(m, splits);
  return m;
}

// ---- baselines -----------------------------------------------------------------

TrainedModel run_baseline(Method kind, const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                          const StepObserver& observer) {
  cfg.validate();
  check_sequence(seq, model_cfg, 1);
  TrainedModel m = fresh_model(kind, seq, model_cfg, cfg);
  m.fixed_classifier = true;
  const auto T = static_cast<std::size_t>(seq.source_count);
  const std::size_t n = cfg.batch_per_domain;
  const SourceSplits splits = split_sources(seq, cfg.split, cfg.seed);
  for (const auto& d : splits.train) {
    if (d.size() < n) throw TrainingError("training split smaller than the batch size");
  }

  std::vector<Tensor> params = m.state.encoder_parameters();
  params.push_back(m.state.h1);
  Adam opt(params, AdamOptions{.lr = cfg.lr});
  Rng rng(cfg.seed ^ kBatchStream);
  const LabeledDataset& val = splits.val.back();

  Selector sel;
  AirlState best_state = m.state.clone();
  int epoch_counter = 0;

  // One phase trains on `domains` (0-based) with n rows per domain per step.
  const auto phase = [&](const std::vector<std::size_t>& domains, int epochs, bool select) {
    std::vector<EpochSampler> samplers;
    for (auto t : domains) samplers.emplace_back(splits.train[t].size(), n);
    std::size_t steps_per_epoch = samplers.front().steps_per_epoch();
    for (const auto& s : samplers) steps_per_epoch = std::min(steps_per_epoch, s.steps_per_epoch());
    for (int e = 1; e <= epochs; ++e) {
      ++epoch_counter;
      for (auto& s : samplers) s.shuffle(rng);
      for (std::size_t k = 0; k < steps_per_epoch; ++k) {
        DomainBatch batch;
        for (std::size_t i = 0; i < domains.size(); ++i) append_rows(batch, splits.train[domains[i]], samplers[i].chunk(k));
        try {
          const Tensor logits = classify(m.state.h1, model_cfg, encode(m.state, batch_tensor(batch, model_cfg.input_dim)));
          const Tensor loss = cross_entropy(logits, batch.y);
          const double value = loss.item();
          backward(loss);
          opt.step();
          ++m.steps_run;
          nlohmann::json rec = {{"step", m.steps_run}, {"epoch", epoch_counter}, {"loss", {{"l_cls", value}, {"l_inv", 0.0}, {"total", value}}}};
          if (observer) observer(rec);
          m.log.push_back(std::move(rec));
        } catch (const NumericError& ex) {
          GradTape::active().clear();
          rethrow_numeric(ex, m.steps_run + 1);
        }
      }
      m.epochs_run = epoch_counter;
      if (!select) continue;
      m.classifiers = {m.state.h1.detach()};
      const double acc = classifier_accuracy(m, m.classifiers.front(), val);
      const bool improved = sel.offer(acc, epoch_counter);
      if (improved) best_state = m.state.clone();
      m.log.push_back({{"epoch", epoch_counter}, {"val_acc", acc}, {"best", improved}});
      if (sel.since_best >= cfg.early_stop_patience) break;
    }
  };

  std::vector<std::size_t> all(T);
  std::iota(all.begin(), all.end(), std::size_t{0});
  switch (kind) {
    case Method::Erm:
      phase(all, cfg.epochs, true);
      break;
    case Method::Ld:
      phase({T - 1}, cfg.epochs, true);
      break;
    case Method::Ft: {
      const int per_domain = std::max(1, cfg.epochs / static_cast<int>(T));
      for (std::size_t t = 0; t < T; ++t) phase({t}, per_domain, t + 1 == T);
      break;
    }
    default:
      throw UsageError("train_baseline: " + method_name(kind) + " is not a baseline");
  }

  m.state = std::move(best_state);
  m.classifiers = {m.state.h1.detach()};
  m.best_val_acc = sel.best;
  m.best_epoch = sel.best_epoch;
  finish(m, splits);
  return m;
}

}  // namespace

ObjectiveValue airl_objective(AirlState& state, const SequenceBatch& batch, const ClassWeightTable& weights,
                              const ObjectiveOptions& options) {
  const std::size_t T = batch.labels.size();
  if (T < 2) throw UsageError("airl_objective: need at least two source domains in the batch");
  const std::size_t n = batch.labels.front().size();
  const std::size_t d = state.config.repr_dim;
  if (batch.x.rank() != 2 || batch.x.dim(0) != T * n || batch.x.dim(1) != state.config.input_dim) {
    throw DimensionError("airl_objective: batch " + shape_str(batch.x.shape()) + " does not hold " +
                         std::to_string(T) + " blocks of " + std::to_string(n) + " rows");
  }
  for (const auto& l : batch.labels) {
    if (l.size() != n) throw DimensionError("airl_objective: label blocks differ in length");
  }
  const Tensor z_all = encode(state, batch.x);
  const Tensor z_cube = reshape(z_all, {T, n, d});
  std::optional<AttentionProjections> proj;
  if (options.use_trans) proj = project_sequence(state, z_all, T);
  const auto z_at = [&](std::size_t t) { return reshape(slice(z_cube, 0, t - 1, t), {n, d}); };

  GeneratorCarry carry = initial_carry(state);
  Tensor h = state.h1;
  ObjectiveValue out{Tensor::scalar(0.0), {}, 0};
  for (std::size_t t = 1; t < T; ++t) {
    if (t > 1 && options.use_lstm) h = generator_step(state, carry, h);
    const Tensor zhat = options.use_trans ? attend_at(state, *proj, t, true) : z_at(t);
    const Tensor z_next = z_at(t + 1);
    const auto w = weights.per_sample(static_cast<int>(t), batch.labels[t - 1]);
    const Classifier clf = devectorize_classifier(h, state.config);
    const Tensor l_cls =
        weighted_cls_loss(classify(clf, zhat), batch.labels[t - 1], w, classify(clf, z_next), batch.labels[t]);
    const CoralResult inv =
        coral_inv_loss(zhat, batch.labels[t - 1], w, z_next, batch.labels[t], state.config.n_classes);
    out.coral_skipped += inv.skipped_classes;
    out.total = add(out.total, l_cls);
    if (options.alpha > 0.0) out.total = add(out.total, scale(inv.loss, options.alpha));
    out.steps.push_back({static_cast<int>(t), l_cls.item(), inv.loss.item()});
  }
  return out;
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Airl: return "airl";
    case Method::Erm: return "erm";
    case Method::Ld: return "ld";
    case Method::Ft: return "ft";
    case Method::NoLstm: return "ablation:no_lstm";
    case Method::NoTrans: return "ablation:no_trans";
    case Method::NoInv: return "ablation:no_inv";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::Airl, Method::Erm, Method::Ld, Method::Ft, Method::NoLstm, Method::NoTrans, Method::NoInv}) {
    if (method_name(m) == name) return m;
  }
  throw ParameterError("unknown method '" + name +
                       "' (expected airl, erm, ld, ft, ablation:no_lstm, ablation:no_trans, ablation:no_inv)");
}

bool is_baseline(Method m) { return m == Method::Erm || m == Method::Ld || m == Method::Ft; }

void TrainConfig::validate() const {
  if (batch_per_domain < 4) throw ParameterError("TrainConfig: batch_per_domain must be at least 4");
  if (epochs < 1) throw ParameterError("TrainConfig: epochs must be at least 1");
  if (!(alpha >= 0.0)) throw ParameterError("TrainConfig: alpha must be nonnegative");
  if (!(lr > 0.0)) throw ParameterError("TrainConfig: lr must be positive");
  if (early_stop_patience < 1) throw ParameterError("TrainConfig: early_stop_patience must be at least 1");
  if (prior_smoothing < 0.0) throw ParameterError("TrainConfig: prior_smoothing must be nonnegative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_per_domain", c.batch_per_domain},
       {"epochs", c.epochs},
       {"alpha", c.alpha},
       {"lr", c.lr},
       {"seed", c.seed},
       {"early_stop_patience", c.early_stop_patience},
       {"prior_smoothing", c.prior_smoothing},
       {"split", {{"train", c.split.train_frac}, {"val", c.split.val_frac}, {"idtest", c.split.idtest_frac}}}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> keys{"batch_per_domain", "epochs", "alpha", "lr", "seed",
                                             "early_stop_patience", "prior_smoothing", "split"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ParameterError("train config: unknown key '" + key + "'");
    }
  }
  c.batch_per_domain = j.value("batch_per_domain", c.batch_per_domain);
  c.epochs = j.value("epochs", c.epochs);
  c.alpha = j.value("alpha", c.alpha);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.prior_smoothing = j.value("prior_smoothing", c.prior_smoothing);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    for (const auto& [key, _] : s.items()) {
      if (key != "train" && key != "val" && key != "idtest") {
        throw ParameterError("train config: unknown split key '" + key + "'");
      }
    }
    c.split.train_frac = s.value("train", c.split.train_frac);
    c.split.val_frac = s.value("val", c.split.val_frac);
    c.split.idtest_frac = s.value("idtest", c.split.idtest_frac);
  }
}

Tensor TrainedModel::classifier_for(int t) const {
  if (classifiers.empty()) throw UsageError("model has no classifiers");
  if (fixed_classifier) return classifiers.front();
  const auto index = static_cast<std::size_t>(std::max(t - 1, 1));
  if (index <= classifiers.size()) return classifiers[index - 1];
  NoGradGuard guard;
  return roll_classifiers(state, classifiers, index).back().detach();
}

Tensor TrainedModel::source_classifier(int t) const {
  if (classifiers.empty()) throw UsageError("model has no classifiers");
  if (fixed_classifier) return classifiers.front();
  const auto index = static_cast<std::size_t>(std::clamp(t, 1, static_cast<int>(classifiers.size())));
  return classifiers[index - 1];
}

double TrainedModel::mean_id_test_acc() const {
  if (id_test_acc.empty()) return 0.0;
  return std::accumulate(id_test_acc.begin(), id_test_acc.end(), 0.0) / static_cast<double>(id_test_acc.size());
}

SourceSplits split_sources(const DomainSequence& seq, const SplitSpec& spec, std::uint64_t split_seed) {
  SourceSplits s;
  for (int t = 1; t <= seq.source_count; ++t) {
    SplitResult r = split(seq.domain(t), spec, split_seed + static_cast<std::uint64_t>(t));
    s.train.push_back(std::move(r.train));
    s.val.push_back(std::move(r.val));
    s.idtest.push_back(std::move(r.idtest));
  }
  return s;
}

TrainedModel train_airl(const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                        const StepObserver& observer) {
  return run_airl(Method::Airl, seq, model_cfg, cfg, observer);
}

TrainedModel train_baseline(Method kind, const DomainSequence& seq, const AirlConfig& model_cfg,
                            const TrainConfig& cfg, const StepObserver& observer) {
  if (!is_baseline(kind)) throw UsageError("train_baseline: " + method_name(kind) + " is not a baseline");
  return run_baseline(kind, seq, model_cfg, cfg, observer);
}

TrainedModel ablate(Method variant, const DomainSequence& seq, const AirlConfig& model_cfg, const TrainConfig& cfg,
                    const StepObserver& observer) {
  if (variant != Method::NoLstm && variant != Method::NoTrans && variant != Method::NoInv) {
    throw UsageError("ablate: " + method_name(variant) + " is not an ablation");
  }
  return run_airl(variant, seq, model_cfg, cfg, observer);
}

TrainedModel train_method(Method method, const DomainSequence& seq, const AirlConfig& model_cfg,
                          const TrainConfig& cfg, const StepObserver& observer) {
  if (method == Method::Airl) return train_airl(seq, model_cfg, cfg, observer);
  if (is_baseline(method)) return train_baseline(method, seq, model_cfg, cfg, observer);
  return ablate(method, seq, model_cfg, cfg, observer);
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw DimensionError("accuracy: prediction count mismatch");
  if (labels.empty()) throw ParameterError("accuracy: empty label set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Tensor to_tensor(const LabeledDataset& ds) { return Tensor::from({ds.size(), ds.feature_dim}, ds.features); }

double classifier_accuracy(const TrainedModel& model, const Tensor& classifier, const LabeledDataset& ds) {
  NoGradGuard guard;
  const Tensor logits = classify(classifier, model.model_config, encode(model.state, to_tensor(ds)));
  return accuracy(predict_labels(logits), ds.labels);
}

void save_model(const TrainedModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<NamedArray> arrays = model.state.to_arrays();
  for (std::size_t k = 0; k < model.classifiers.size(); ++k) {
    const auto& h = model.classifiers[k];
    arrays.push_back({"classifier." + std::to_string(k + 1), h.shape(), {h.data().begin(), h.data().end()}});
  }
  write_checkpoint(dir / "model.ckpt", arrays);
  nlohmann::json meta = {{"method", method_name(model.method)},
                         {"model_config", model.model_config},
                         {"train_config", model.train_config},
                         {"fixed_classifier", model.fixed_classifier},
                         {"source_count", model.source_count},
                         {"classifier_count", model.classifiers.size()},
                         {"best_val_acc", model.best_val_acc},
                         {"best_epoch", model.best_epoch},
                         {"epochs_run", model.epochs_run},
                         {"steps_run", model.steps_run},
                         {"id_test_acc", model.id_test_acc}};
  std::ofstream out(dir / "model.json");
  out << meta.dump(2) << '\n';
  if (!out) throw CheckpointError("cannot write " + (dir / "model.json").string());
}

TrainedModel load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw CheckpointError("cannot open " + (dir / "model.json").string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  TrainedModel m;
  m.method = parse_method(meta.at("method").get<std::string>());
  m.model_config = meta.at("model_config").get<AirlConfig>();
  m.train_config = meta.at("train_config").get<TrainConfig>();
  m.fixed_classifier = meta.at("fixed_classifier").get<bool>();
  m.source_count = meta.at("source_count").get<int>();
  m.best_val_acc = meta.at("best_val_acc").get<double>();
  m.best_epoch = meta.at("best_epoch").get<int>();
  m.epochs_run = meta.at("epochs_run").get<int>();
  m.steps_run = meta.at("steps_run").get<std::size_t>();
  m.id_test_acc = meta.at("id_test_acc").get<std::vector<double>>();
  const auto count = meta.at("classifier_count").get<std::size_t>();

  std::vector<NamedArray> arrays = read_checkpoint(dir / "model.ckpt");
  if (arrays.size() < count) throw CheckpointError("model checkpoint: missing classifier arrays");
  std::vector<NamedArray> state_arrays(arrays.begin(), arrays.end() - static_cast<std::ptrdiff_t>(count));
  m.state = AirlState::from_arrays(m.model_config, state_arrays);
  for (std::size_t k = 0; k < count; ++k) {
    const auto& a = arrays[state_arrays.size() + k];
    if (a.name != "classifier." + std::to_string(k + 1)) {
      throw CheckpointError("model checkpoint: unexpected array '" + a.name + "'");
    }
    m.classifiers.push_back(Tensor::from(a.shape, a.values));
  }
  return m;
}

}  // namespace airl
