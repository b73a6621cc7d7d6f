#include "airl/cli.hpp"

#include "airl/evaluation.hpp"
#include "airl/run_config.hpp"
#include "airl/theory.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace airl {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open " + path.string());
  return json::parse(in);
}

std::string dataset_label(const DataSpec& d) { return d.generated() ? d.source : fs::path(d.source).stem().string(); }

// Shared flags of train and eval; values only override the config file when
// given on the command line.
struct RunFlags {
  std::string config_path;
  std::string data;
  std::string seeds = "0";
  int sources = 0;
  int domains = 0;
  int per_domain = 0;
  double alpha = 0.0;
  int epochs = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  int patience = 0;
  bool attention_softmax = false;
  int jobs = 1;
  bool force = false;

  CLI::Option* o_data = nullptr;
  CLI::Option* o_sources = nullptr;
  CLI::Option* o_domains = nullptr;
  CLI::Option* o_per_domain = nullptr;
  CLI::Option* o_alpha = nullptr;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_patience = nullptr;
  CLI::Option* o_softmax = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run config (flags override it)");
    o_data = app->add_option("--data", data, "circle, circle-hard or a dataset CSV path");
    app->add_option("--seed,--seeds", seeds, "seed, range a..b or list a,b,c")->capture_default_str();
    o_sources = app->add_option("--sources", sources, "number of source domains T");
    o_domains = app->add_option("--domains", domains, "domains to generate");
    o_per_domain = app->add_option("--per-domain", per_domain, "instances per generated domain");
    o_alpha = app->add_option("--alpha", alpha, "weight of the invariance loss");
    o_epochs = app->add_option("--epochs", epochs, "maximum training epochs");
    o_lr = app->add_option("--lr", lr, "Adam learning rate");
    o_batch = app->add_option("--batch", batch, "batch size per domain");
    o_patience = app->add_option("--patience", patience, "early-stopping patience in epochs");
    o_softmax = app->add_flag("--attention-softmax", attention_softmax, "normalize attention scores with softmax");
    app->add_option("--jobs", jobs, "parallel worker processes")->capture_default_str();
    app->add_flag("--force", force, "recompute runs whose outputs already exist");
  }

  RunConfig build(const std::string& command, const std::string& method) const {
    RunConfig c = config_path.empty() ? RunConfig{} : run_config_from_json(read_json(config_path));
    c.command = command;
    if (!method.empty()) c.method = method;
    parse_method(c.method);
    if (o_data->count()) c.data.source = data;
    if (o_sources->count()) c.data.sources = sources;
    if (o_domains->count()) c.data.domains = domains;
    if (o_per_domain->count()) c.data.per_domain = per_domain;
    if (o_alpha->count()) c.train.alpha = alpha;
    if (o_epochs->count()) c.train.epochs = epochs;
    if (o_lr->count()) c.train.lr = lr;
    if (o_batch->count()) c.train.batch_per_domain = batch;
    if (o_patience->count()) c.train.early_stop_patience = patience;
    if (o_softmax->count()) c.model.attention_softmax = attention_softmax;
    if (jobs < 1) throw ParameterError("--jobs must be at least 1");
    return c;
  }
};

struct ResolvedRun {
  RunConfig config;
  DomainSequence data;
  json doc;
  std::string hash;
};

ResolvedRun resolve_run(const RunConfig& base, std::uint64_t seed) {
  ResolvedRun r;
  r.data = load_data(base.data, seed);
  r.config = resolve(base, seed, r.data);
  r.doc = to_json(r.config);
  r.hash = config_hash(r.doc);
  return r;
}

// Trains one model, leaving error.txt behind on failure.
template <typename Fn>
void guarded(const fs::path& dir, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    write_text(dir / "error.txt", std::string(e.what()) + "\n");
    throw;
  }
}

int cmd_generate(const std::string& dataset, const DataSpec& spec, std::uint64_t seed, const std::string& out) {
  DataSpec d = spec;
  d.source = dataset;
  if (!d.generated()) throw ParameterError("generate: unknown dataset '" + dataset + "'");
  d.seed = seed;
  const DomainSequence seq = load_data(d, seed);
  const fs::path path = out.empty() ? run_root() / "data" / (dataset + "-seed" + std::to_string(seed) + ".csv")
                                    : fs::path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_sequence(seq, path);
  std::size_t rows = 0;
  for (const auto& dom : seq.domains) rows += dom.size();
  std::cout << "wrote " << path.string() << " (" << seq.domain_count() << " domains, " << rows << " rows)\n";
  return 0;
}

int cmd_train(const RunFlags& flags, const std::string& method) {
  const RunConfig base = flags.build("train", method);
  const auto seeds = parse_seed_list(flags.seeds);
  std::vector<std::function<void()>> tasks;
  for (auto seed : seeds) {
    tasks.push_back([run = resolve_run(base, seed), seed, force = flags.force] {
      const fs::path dir = run_root() / "runs" / run.hash;
      if (!force && fs::exists(dir / "metrics.json")) {
        std::cout << "seed " << seed << ": " << dir.string() << " already complete\n";
        return;
      }
      fs::create_directories(dir);
      fs::remove(dir / "error.txt");
      write_text(dir / "config.json", run.doc.dump(2) + "\n");
      guarded(dir, [&] {
        const Method m = parse_method(run.config.method);
        const TrainedModel model = train_method(m, run.data, run.config.model, run.config.train);
        std::ostringstream log;
        for (const auto& rec : model.log) log << rec.dump() << '\n';
        write_text(dir / "train.jsonl", log.str());
        save_model(model, dir / "model");
        json targets = json::array();
        const int T = run.data.source_count;
        for (int t = T + 1; t <= std::min(T + run.config.k, run.data.domain_count()); ++t) {
          targets.push_back({{"t", t}, {"acc", target_accuracy(model, t, run.data.domain(t))}});
        }
        const json metrics = {{"method", run.config.method},
                              {"seed", seed},
                              {"best_val_acc", model.best_val_acc},
                              {"best_epoch", model.best_epoch},
                              {"epochs_run", model.epochs_run},
                              {"steps_run", model.steps_run},
                              {"id_test_acc", model.id_test_acc},
                              {"mean_id_test_acc", model.mean_id_test_acc()},
                              {"target_acc", targets}};
        write_text(dir / "metrics.json", metrics.dump(2) + "\n");
        std::cout << "seed " << seed << ": " << dir.string() << " val " << model.best_val_acc << " id "
                  << model.mean_id_test_acc() << "\n";
      });
    });
  }
  return run_tasks(tasks, flags.jobs) == 0 ? 0 : 1;
}

int cmd_eval(const RunFlags& flags, const std::string& protocol, int k, const std::string& method,
             const std::string& out) {
  RunConfig base = flags.build("eval", method);
  base.protocol = protocol;
  base.k = k;
  const Protocol proto = parse_protocol(protocol);
  const auto seeds = parse_seed_list(flags.seeds);

  struct SeedPlan {
    std::uint64_t seed;
    fs::path dir;
    std::vector<int> windows;
  };
  std::vector<SeedPlan> plans;
  std::vector<std::function<void()>> tasks;
  for (auto seed : seeds) {
    ResolvedRun run = resolve_run(base, seed);
    const int T = run.data.source_count;
    std::vector<int> windows;
    if (proto == Protocol::EvalS) {
      if (k < 1 || T + k > run.data.domain_count()) {
        throw ParameterError("eval-s: K = " + std::to_string(k) + " exceeds the " +
                             std::to_string(run.data.domain_count() - T) + " available target domains");
      }
      windows = {T};
    } else {
      windows = eval_d_windows(T, run.data.domain_count(), k);
    }
    const fs::path dir = run_root() / "evals" / run.hash;
    fs::create_directories(dir);
    fs::remove(dir / "error.txt");
    write_text(dir / "config.json", run.doc.dump(2) + "\n");
    plans.push_back({seed, dir, windows});
    for (int t : windows) {
      const fs::path file = dir / ("window-" + std::to_string(t) + ".json");
      if (!flags.force && fs::exists(file)) continue;
      tasks.push_back([run, t, k, dir, file] {
        guarded(dir, [&] {
          const TrainedModel model = train_method(parse_method(run.config.method), run.data.prefix(t, t),
                                                  run.config.model, run.config.train);
          const WindowResult w = score_window(model, run.data, t, k);
          json targets = json::array();
          for (const auto& a : w.targets) targets.push_back({{"t", a.t}, {"acc", a.acc}});
          write_text(file, json{{"trained_through", t}, {"targets", targets}}.dump(2) + "\n");
          std::cout << "window " << t << " (" << dir.filename().string() << "): mean " << w.mean() << "\n";
        });
      });
    }
  }
  if (run_tasks(tasks, flags.jobs) != 0) return 1;

  std::vector<EvalReport> per_seed;
  for (const auto& plan : plans) {
    std::vector<WindowResult> windows;
    for (int t : plan.windows) {
      const json w = read_json(plan.dir / ("window-" + std::to_string(t) + ".json"));
      WindowResult wr;
      wr.trained_through = w.at("trained_through").get<int>();
      for (const auto& a : w.at("targets")) wr.targets.push_back({a.at("t").get<int>(), a.at("acc").get<double>()});
      windows.push_back(std::move(wr));
    }
    EvalReport r = EvalReport::from_windows(proto, k, std::move(windows));
    r.method = base.method;
    r.dataset = dataset_label(base.data);
    r.seeds = {plan.seed};
    r.validate();
    write_text(plan.dir / "report.json", json(r).dump(2) + "\n");
    write_accuracy_csv(r, plan.dir / "accuracy.csv");
    std::cout << "seed " << plan.seed << ": OODAvg " << 100.0 * r.ood_avg << " OODWrt " << 100.0 * r.ood_wrt << "  ("
              << plan.dir.string() << ")\n";
    per_seed.push_back(std::move(r));
  }
  const EvalReport summary = summarize_seeds(std::move(per_seed));
  json key = to_json(base);
  key["seeds"] = seeds;
  const fs::path sdir = out.empty() ? run_root() / "summaries" /
                                          (summary.dataset + "-" + base.method + "-" + protocol + "-k" +
                                           std::to_string(k) + "-" + config_hash(key))
                                    : fs::path(out);
  write_text(sdir / "summary.json", json(summary).dump(2) + "\n");
  write_summary_csv(std::span<const EvalReport>(&summary, 1), sdir / "summary.csv");
  std::vector<double> avg;
  std::vector<double> wrt;
  for (const auto& r : summary.per_seed) {
    avg.push_back(r.ood_avg);
    wrt.push_back(r.ood_wrt);
  }
  const MeanStd a = mean_std(avg);
  const MeanStd w = mean_std(wrt);
  std::printf("%s %s %s K=%d  OODAvg %.2f (%.2f)  OODWrt %.2f (%.2f)  seeds=%zu\n", summary.dataset.c_str(),
              base.method.c_str(), protocol.c_str(), k, 100.0 * a.mean, 100.0 * a.std, 100.0 * w.mean, 100.0 * w.std,
              avg.size());
  std::cout << "summary: " << sdir.string() << "\n";
  return 0;
}

int cmd_verify_theory(const std::string& check, int trials, std::uint64_t seed, const TheorySizes& sizes,
                      double loss_bound, const std::string& out) {
  if (trials < 1) throw ParameterError("verify-theory: --trials must be at least 1");
  if (check != "lemma1" && check != "prop1" && check != "pinsker" && check != "all") {
    throw ParameterError("verify-theory: unknown check '" + check + "'");
  }
  std::vector<CheckReport> reports;
  if (check == "lemma1" || check == "all") reports.push_back(check_lemma1(trials, sizes, loss_bound, seed));
  if (check == "prop1" || check == "all") reports.push_back(check_prop1(trials, sizes, seed));
  if (check == "pinsker" || check == "all") reports.push_back(check_pinsker(trials, sizes, seed));
  bool ok = true;
  for (const auto& r : reports) {
    ok = ok && r.pass();
    std::printf("%-8s trials=%d violations=%d min_slack=%.3e max_slack=%.3e max_abs_error=%.3e\n", r.check.c_str(),
                r.trials, r.violations, r.min_slack, r.max_slack, r.max_abs_error);
  }
  if (!out.empty()) {
    const json doc = {{"seed", seed},
                      {"trials", trials},
                      {"sizes", {{"max_x", sizes.max_x}, {"max_y", sizes.max_y}}},
                      {"loss_bound", loss_bound},
                      {"checks", reports}};
    write_text(out, doc.dump(2) + "\n");
  }
  return ok ? 0 : 1;
}

int cmd_export_boundary(const std::string& run, int target, int resolution, const std::vector<double>& bounds,
                        const std::string& out) {
  if (bounds.size() != 4) throw ParameterError("export-boundary: --bounds needs x_min,x_max,y_min,y_max");
  const fs::path dir(run);
  const TrainedModel model = load_model(dir / "model");
  const BoundaryGrid grid = export_boundary(model, target, {bounds[0], bounds[1], bounds[2], bounds[3]}, resolution,
                                            dir.filename().string());
  const fs::path path = out.empty() ? dir / ("boundary-t" + std::to_string(target) + ".csv") : fs::path(out);
  write_boundary(grid, path);
  std::cout << "wrote " << path.string() << " (" << grid.pred.size() << " rows)\n";
  return 0;
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  const auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ParameterError("invalid seed list '" + text + "'");
    }
    return static_cast<std::uint64_t>(std::stoull(s));
  };
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const auto lo = number(text.substr(0, dots));
    const auto hi = number(text.substr(dots + 2));
    if (hi < lo) throw ParameterError("invalid seed range '" + text + "'");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(number(part));
  if (out.empty()) throw ParameterError("empty seed list");
  return out;
}

int run_tasks(const std::vector<std::function<void()>>& tasks, int jobs) {
  int failed = 0;
  if (jobs <= 1) {
    for (const auto& task : tasks) {
      try {
        task();
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        ++failed;
      }
    }
    return failed;
  }
  std::size_t next = 0;
  int running = 0;
  std::cout.flush();
  while (next < tasks.size() || running > 0) {
    while (running < jobs && next < tasks.size()) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          tasks[next]();
        } catch (const std::exception& e) {
          std::cerr << "error: " << e.what() << "\n";
          code = 1;
        }
        std::cout.flush();
        std::cerr.flush();
        _exit(code);
      }
      ++next;
      ++running;
    }
    int status = 0;
    if (wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failed;
    }
  }
  return failed;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Adaptive invariant representation learning toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "generate a synthetic domain sequence");
  std::string gen_dataset;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  DataSpec gen_spec;
  gen->add_option("dataset", gen_dataset, "circle or circle-hard")->required();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--domains", gen_spec.domains, "number of domains")->capture_default_str();
  gen->add_option("--per-domain", gen_spec.per_domain, "instances per domain")->capture_default_str();
  gen->add_option("--radius", gen_spec.radius, "semicircle radius")->capture_default_str();
  gen->add_option("--sigma", gen_spec.noise_sigma, "Gaussian standard deviation")->capture_default_str();
  gen->add_option("--out", gen_out, "output CSV path");

  auto* train = app.add_subcommand("train", "train one model per seed");
  std::string train_method_name;
  RunFlags train_flags;
  train->add_option("method", train_method_name,
                    "airl, erm, ld, ft, ablation:no_lstm, ablation:no_trans, ablation:no_inv")
      ->required();
  train_flags.attach(train);

  auto* eval = app.add_subcommand("eval", "evaluate a method under eval-s or eval-d");
  std::string eval_protocol;
  int eval_k = 5;
  std::string eval_method = "airl";
  std::string eval_out;
  RunFlags eval_flags;
  eval->add_option("protocol", eval_protocol, "eval-s or eval-d")->required();
  eval->add_option("--k", eval_k, "number of target domains per window")->capture_default_str();
  eval->add_option("--method", eval_method, "method to train")->capture_default_str();
  eval->add_option("--out", eval_out, "summary directory");
  eval_flags.attach(eval);

  auto* theory = app.add_subcommand("verify-theory", "brute-force checks on finite distributions");
  std::string theory_check;
  int theory_trials = 1000;
  std::uint64_t theory_seed = 0;
  TheorySizes sizes;
  double loss_bound = 1.0;
  std::string theory_out;
  theory->add_option("check", theory_check, "lemma1, prop1, pinsker or all")->required();
  theory->add_option("--trials", theory_trials, "random trials per check")->capture_default_str();
  theory->add_option("--seed", theory_seed, "random seed")->capture_default_str();
  theory->add_option("--max-x", sizes.max_x, "largest |X|")->capture_default_str();
  theory->add_option("--max-y", sizes.max_y, "largest |Y|")->capture_default_str();
  theory->add_option("--loss-bound", loss_bound, "loss bound C")->capture_default_str();
  theory->add_option("--out", theory_out, "JSON report path");

  auto* boundary = app.add_subcommand("export-boundary", "export a decision-boundary grid");
  std::string boundary_run;
  int boundary_target = 0;
  int boundary_resolution = 100;
  std::vector<double> boundary_bounds{-2.0, 2.0, -2.0, 2.0};
  std::string boundary_out;
  boundary->add_option("--run", boundary_run, "training run directory")->required();
  boundary->add_option("--target", boundary_target, "target domain index")->required();
  boundary->add_option("--resolution", boundary_resolution, "grid points per axis")->capture_default_str();
  boundary->add_option("--bounds", boundary_bounds, "x_min x_max y_min y_max")->expected(4)->delimiter(',');
  boundary->add_option("--out", boundary_out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(gen_dataset, gen_spec, gen_seed, gen_out);
    if (*train) return cmd_train(train_flags, train_method_name);
    if (*eval) return cmd_eval(eval_flags, eval_protocol, eval_k, eval_method, eval_out);
    if (*theory) return cmd_verify_theory(theory_check, theory_trials, theory_seed, sizes, loss_bound, theory_out);
    if (*boundary) {
      return cmd_export_boundary(boundary_run, boundary_target, boundary_resolution, boundary_bounds, boundary_out);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace airl
