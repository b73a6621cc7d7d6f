#include "airl/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace airl {

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<int> predict_target(const TrainedModel& model, int t_target, const Tensor& x) {
  if (t_target <= model.source_count) {
    throw UsageError("predict_target: domain " + std::to_string(t_target) + " is a source domain (T = " +
                     std::to_string(model.source_count) + ")");
  }
  NoGradGuard guard;
  const Tensor logits = classify(model.classifier_for(t_target), model.model_config, encode(model.state, x));
  return predict_labels(logits);
}

double target_accuracy(const TrainedModel& model, int t_target, const LabeledDataset& ds) {
  return accuracy(predict_target(model, t_target, to_tensor(ds)), ds.labels);
}

double WindowResult::mean() const {
  if (targets.empty()) return 0.0;
  double s = 0.0;
  for (const auto& a : targets) s += a.acc;
  return s / static_cast<double>(targets.size());
}

std::string protocol_name(Protocol p) { return p == Protocol::EvalS ? "eval-s" : "eval-d"; }

Protocol parse_protocol(const std::string& name) {
  if (name == "eval-s") return Protocol::EvalS;
  if (name == "eval-d") return Protocol::EvalD;
  throw ParameterError("unknown protocol '" + name + "' (expected eval-s or eval-d)");
}

EvalReport EvalReport::from_windows(Protocol protocol, int k, std::vector<WindowResult> windows) {
  if (windows.empty()) throw ParameterError("eval: no windows");
  EvalReport r;
  r.protocol = protocol;
  r.k = k;
  r.windows = std::move(windows);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& w : r.windows) {
    if (w.targets.empty()) throw ParameterError("eval: window without targets");
    for (const auto& a : w.targets) {
      r.per_target_acc.push_back(a);
      sum += a.acc;
      ++count;
    }
  }
  r.ood_avg = sum / static_cast<double>(count);
  if (protocol == Protocol::EvalS) {
    r.ood_wrt = r.per_target_acc.front().acc;
    for (const auto& a : r.per_target_acc) r.ood_wrt = std::min(r.ood_wrt, a.acc);
  } else {
    r.ood_wrt = r.windows.front().mean();
    for (const auto& w : r.windows) r.ood_wrt = std::min(r.ood_wrt, w.mean());
  }
  return r;
}

void EvalReport::validate() const {
  const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(ood_avg) || !in_unit(ood_wrt)) throw ParameterError("eval report: aggregates outside [0, 1]");
  if (ood_wrt > ood_avg + 1e-12) throw ParameterError("eval report: OODWrt exceeds OODAvg");
  for (const auto& a : per_target_acc) {
    if (!in_unit(a.acc)) throw ParameterError("eval report: accuracy outside [0, 1]");
  }
  if (per_seed.empty()) {
    const EvalReport again = from_windows(protocol, k, windows);
    if (std::abs(again.ood_avg - ood_avg) > 1e-12 || std::abs(again.ood_wrt - ood_wrt) > 1e-12) {
      throw ParameterError("eval report: aggregates do not match per-target accuracies");
    }
  }
  for (const auto& r : per_seed) r.validate();
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"protocol", protocol_name(r.protocol)},
       {"K", r.k},
       {"method", r.method},
       {"dataset", r.dataset},
       {"ood_avg", r.ood_avg},
       {"ood_wrt", r.ood_wrt},
       {"seeds", r.seeds},
       {"windows", nlohmann::json::array()},
       {"per_target_acc", nlohmann::json::array()}};
  for (const auto& w : r.windows) {
    nlohmann::json targets = nlohmann::json::array();
    for (const auto& a : w.targets) targets.push_back({{"t", a.t}, {"acc", a.acc}});
    j["windows"].push_back({{"trained_through", w.trained_through}, {"mean", w.mean()}, {"targets", targets}});
  }
  for (const auto& a : r.per_target_acc) j["per_target_acc"].push_back({{"t", a.t}, {"acc", a.acc}});
  if (!r.per_seed.empty()) j["per_seed"] = r.per_seed;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.protocol = parse_protocol(j.at("protocol").get<std::string>());
  r.k = j.at("K").get<int>();
  r.method = j.value("method", "");
  r.dataset = j.value("dataset", "");
  r.ood_avg = j.at("ood_avg").get<double>();
  r.ood_wrt = j.at("ood_wrt").get<double>();
  r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  r.windows.clear();
  r.per_target_acc.clear();
  for (const auto& w : j.at("windows")) {
    WindowResult wr;
    wr.trained_through = w.at("trained_through").get<int>();
    for (const auto& a : w.at("targets")) wr.targets.push_back({a.at("t").get<int>(), a.at("acc").get<double>()});
    r.windows.push_back(std::move(wr));
  }
  for (const auto& a : j.at("per_target_acc")) r.per_target_acc.push_back({a.at("t").get<int>(), a.at("acc").get<double>()});
  r.per_seed.clear();
  if (j.contains("per_seed")) r.per_seed = j.at("per_seed").get<std::vector<EvalReport>>();
}

WindowResult score_window(const TrainedModel& model, const DomainSequence& seq, int trained_through, int k) {
  if (trained_through + k > seq.domain_count()) throw ParameterError("eval: window runs past the last domain");
  WindowResult w;
  w.trained_through = trained_through;
  for (int t = trained_through + 1; t <= trained_through + k; ++t) {
    w.targets.push_back({t, target_accuracy(model, t, seq.domain(t))});
  }
  return w;
}

EvalReport eval_s(const ModelFactory& factory, const DomainSequence& seq, int k, const WindowObserver& observer) {
  const int T = seq.source_count;
  if (k < 1) throw ParameterError("eval-s: K must be at least 1");
  if (T + k > seq.domain_count()) {
    throw ParameterError("eval-s: K = " + std::to_string(k) + " needs " + std::to_string(T + k) +
                         " domains, sequence has " + std::to_string(seq.domain_count()));
  }
  const TrainedModel model = factory(seq.prefix(T, T));
  WindowResult w = score_window(model, seq, T, k);
  if (observer) observer(model, w);
  return EvalReport::from_windows(Protocol::EvalS, k, {std::move(w)});
}

std::vector<int> eval_d_windows(int source_count, int domain_count, int k) {
  if (k < 1 || k > source_count) {
    throw ParameterError("eval-d: K = " + std::to_string(k) + " must lie in [1, T = " + std::to_string(source_count) +
                         "]");
  }
  if (2 * source_count > domain_count) {
    throw ParameterError("eval-d: needs 2T = " + std::to_string(2 * source_count) + " domains, sequence has " +
                         std::to_string(domain_count));
  }
  std::vector<int> out;
  for (int t = source_count; t <= 2 * source_count - k; ++t) out.push_back(t);
  return out;
}

EvalReport eval_d(const ModelFactory& factory, const DomainSequence& seq, int k, const WindowObserver& observer) {
  std::vector<WindowResult> windows;
  for (int t : eval_d_windows(seq.source_count, seq.domain_count(), k)) {
    const TrainedModel model = factory(seq.prefix(t, t));
    windows.push_back(score_window(model, seq, t, k));
    if (observer) observer(model, windows.back());
  }
  return EvalReport::from_windows(Protocol::EvalD, k, std::move(windows));
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ParameterError("mean_std: no values");
  MeanStd m;
  m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return m;
}

EvalReport summarize_seeds(std::vector<EvalReport> per_seed) {
  if (per_seed.empty()) throw ParameterError("summary: no per-seed reports");
  EvalReport r;
  r.protocol = per_seed.front().protocol;
  r.k = per_seed.front().k;
  r.method = per_seed.front().method;
  r.dataset = per_seed.front().dataset;
  std::vector<double> avg;
  std::vector<double> wrt;
  for (const auto& s : per_seed) {
    if (s.protocol != r.protocol || s.k != r.k) throw ParameterError("summary: mixed protocols or K");
    avg.push_back(s.ood_avg);
    wrt.push_back(s.ood_wrt);
    r.seeds.insert(r.seeds.end(), s.seeds.begin(), s.seeds.end());
  }
  r.ood_avg = mean_std(avg).mean;
  r.ood_wrt = mean_std(wrt).mean;
  r.per_seed = std::move(per_seed);
  return r;
}

void write_accuracy_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "window,t,acc\n";
  for (const auto& w : r.windows) {
    for (const auto& a : w.targets) out << w.trained_through << ',' << a.t << ',' << fmt(a.acc) << '\n';
  }
}

void write_summary_csv(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  out << "dataset,method,protocol,K,OODAvg,OODAvg_std,OODWrt,OODWrt_std,seeds\n";
  for (const auto& r : reports) {
    std::vector<double> avg;
    std::vector<double> wrt;
    if (r.per_seed.empty()) {
      avg.push_back(r.ood_avg);
      wrt.push_back(r.ood_wrt);
    }
    for (const auto& s : r.per_seed) {
      avg.push_back(s.ood_avg);
      wrt.push_back(s.ood_wrt);
    }
    const MeanStd a = mean_std(avg);
    const MeanStd w = mean_std(wrt);
    out << r.dataset << ',' << r.method << ',' << protocol_name(r.protocol) << ',' << r.k << ',' << fmt(100.0 * a.mean)
        << ',' << fmt(100.0 * a.std) << ',' << fmt(100.0 * w.mean) << ',' << fmt(100.0 * w.std) << ',' << avg.size()
        << '\n';
  }
}

BoundaryGrid export_boundary(const TrainedModel& model, int t, const GridBounds& bounds, int resolution,
                             const std::string& model_id) {
  if (model.model_config.input_dim != 2) throw UsageError("export_boundary: requires a 2-D feature space");
  if (resolution < 2) throw ParameterError("export_boundary: resolution must be at least 2");
  if (!(bounds.x_max > bounds.x_min) || !(bounds.y_max > bounds.y_min)) {
    throw ParameterError("export_boundary: empty bounds");
  }
  BoundaryGrid g;
  g.domain = t;
  g.model_id = model_id;
  const auto res = static_cast<std::size_t>(resolution);
  for (std::size_t i = 0; i < res; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(res - 1);
    g.xs.push_back(bounds.x_min + f * (bounds.x_max - bounds.x_min));
    g.ys.push_back(bounds.y_min + f * (bounds.y_max - bounds.y_min));
  }
  std::vector<double> points;
  points.reserve(res * res * 2);
  for (double y : g.ys) {
    for (double x : g.xs) {
      points.push_back(x);
      points.push_back(y);
    }
  }
  g.pred = predict_target(model, t, Tensor::from({res * res, 2}, std::move(points)));
  return g;
}

double grid_agreement(const BoundaryGrid& grid, const std::function<int(double, double)>& truth,
                      const std::function<bool(double, double)>& keep) {
  std::size_t agree = 0;
  std::size_t total = 0;
  for (std::size_t iy = 0; iy < grid.ys.size(); ++iy) {
    for (std::size_t ix = 0; ix < grid.xs.size(); ++ix) {
      const double x = grid.xs[ix];
      const double y = grid.ys[iy];
      if (keep && !keep(x, y)) continue;
      ++total;
      agree += grid.at(iy, ix) == truth(x, y) ? 1 : 0;
    }
  }
  if (total == 0) throw ParameterError("grid_agreement: no grid points selected");
  return static_cast<double>(agree) / static_cast<double>(total);
}

void write_boundary(const BoundaryGrid& grid, const std::filesystem::path& csv_path) {
  {
    std::ofstream out = open_out(csv_path);
    out << "x1,x2,pred\n";
    for (std::size_t iy = 0; iy < grid.ys.size(); ++iy) {
      for (std::size_t ix = 0; ix < grid.xs.size(); ++ix) {
        out << fmt(grid.xs[ix]) << ',' << fmt(grid.ys[iy]) << ',' << grid.at(iy, ix) << '\n';
      }
    }
  }
  nlohmann::json meta = {{"format", "airl-boundary"},
                         {"version", 1},
                         {"domain", grid.domain},
                         {"model_id", grid.model_id},
                         {"resolution", grid.xs.size()},
                         {"x_range", {grid.xs.front(), grid.xs.back()}},
                         {"y_range", {grid.ys.front(), grid.ys.back()}},
                         {"rows", grid.pred.size()}};
  std::filesystem::path side = csv_path;
  side.replace_extension(".json");
  std::ofstream out = open_out(side);
  out << meta.dump(2) << '\n';
}

}  // namespace airl
