#include "airl/evaluation.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace airl;

namespace {

WindowResult window(int through, std::vector<double> accs) {
  WindowResult w;
  w.trained_through = through;
  for (std::size_t i = 0; i < accs.size(); ++i) w.targets.push_back({through + 1 + static_cast<int>(i), accs[i]});
  return w;
}

AirlConfig small_model() {
  AirlConfig c;
  c.repr_dim = 8;
  c.classifier_hidden = 8;
  c.lstm_hidden = 16;
  c.encoder_layers = 2;
  return c;
}

DomainSequence small_circle(int domains, int sources) {
  CircleParams p;
  p.domains = domains;
  p.per_domain = 120;
  p.seed = 2;
  DomainSequence seq = gen_circle(p);
  seq.source_count = sources;
  return seq;
}

ModelFactory quick_factory(Method method) {
  return [method](const DomainSequence& s) {
    TrainConfig cfg;
    cfg.batch_per_domain = 16;
    cfg.epochs = 2;
    cfg.seed = 1;
    return train_method(method, s, small_model(), cfg);
  };
}

TrainedModel zero_classifier_model(int sources) {
  TrainedModel m;
  m.model_config = AirlConfig{};
  m.state = AirlState::init(m.model_config, 0);
  m.classifiers = {Tensor::zeros({1, m.model_config.classifier_size()})};
  m.fixed_classifier = true;
  m.source_count = sources;
  return m;
}

}  // namespace

TEST_CASE("eval-s aggregates") {
  const EvalReport r = EvalReport::from_windows(Protocol::EvalS, 3, {window(5, {0.9, 0.8, 0.7})});
  CHECK(r.ood_avg == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(r.ood_wrt == 0.7);
  const EvalReport one = EvalReport::from_windows(Protocol::EvalS, 1, {window(5, {0.63})});
  CHECK(one.ood_avg == one.ood_wrt);
  r.validate();
}

TEST_CASE("eval-d hand example") {
  const EvalReport r = EvalReport::from_windows(Protocol::EvalD, 2, {window(3, {0.9, 0.7}), window(4, {0.8, 0.6})});
  CHECK(std::abs(r.ood_avg - 0.75) < 1e-15);
  CHECK(std::abs(r.ood_wrt - 0.7) < 1e-15);
  CHECK(r.per_target_acc.size() == 4);
  r.validate();
}

TEST_CASE("eval-d window ranges") {
  CHECK(eval_d_windows(3, 6, 2) == std::vector<int>{3, 4});
  CHECK(eval_d_windows(15, 30, 5).size() == 11);
  CHECK(eval_d_windows(15, 30, 5).front() == 15);
  CHECK(eval_d_windows(15, 30, 5).back() == 25);
  CHECK(eval_d_windows(4, 8, 4) == std::vector<int>{4});
  CHECK_THROWS_AS(eval_d_windows(15, 30, 16), ParameterError);
  CHECK_THROWS_AS(eval_d_windows(15, 29, 5), ParameterError);
  CHECK_THROWS_AS(eval_d_windows(15, 30, 0), ParameterError);
}

TEST_CASE("report validation catches broken invariants") {
  EvalReport r = EvalReport::from_windows(Protocol::EvalD, 2, {window(3, {0.9, 0.7}), window(4, {0.8, 0.6})});
  r.ood_wrt = 0.9;
  CHECK_THROWS_AS(r.validate(), ParameterError);
  r = EvalReport::from_windows(Protocol::EvalD, 2, {window(3, {0.9, 0.7})});
  r.ood_avg += 1e-9;
  CHECK_THROWS_AS(r.validate(), ParameterError);
}

TEST_CASE("report json round trip") {
  EvalReport r = EvalReport::from_windows(Protocol::EvalD, 2, {window(3, {0.9, 0.7}), window(4, {0.8, 0.6})});
  r.method = "airl";
  r.dataset = "circle";
  r.seeds = {3};
  const nlohmann::json j = r;
  const EvalReport back = j.get<EvalReport>();
  CHECK(nlohmann::json(back) == j);
  back.validate();
}

TEST_CASE("seed summary uses the sample standard deviation") {
  std::vector<EvalReport> seeds;
  for (double a : {0.7, 0.8, 0.9}) {
    EvalReport r = EvalReport::from_windows(Protocol::EvalD, 1, {window(3, {a})});
    r.seeds = {static_cast<std::uint64_t>(a * 10)};
    seeds.push_back(r);
  }
  const EvalReport s = summarize_seeds(seeds);
  CHECK(s.ood_avg == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(s.seeds.size() == 3);
  const std::vector<double> v{0.7, 0.8, 0.9};
  CHECK(mean_std(v).std == doctest::Approx(0.1).epsilon(1e-12));
  s.validate();

  airl::test::TempDir dir("summary");
  const std::vector<EvalReport> reports{s};
  write_summary_csv(reports, dir.path() / "s.csv");
  std::ifstream in(dir.path() / "s.csv");
  std::string header;
  std::string row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "dataset,method,protocol,K,OODAvg,OODAvg_std,OODWrt,OODWrt_std,seeds");
  CHECK(row.find(",eval-d,1,80,") != std::string::npos);
  CHECK(row.substr(row.size() - 2) == ",3");
}

TEST_CASE("accuracy csv rows") {
  const EvalReport r = EvalReport::from_windows(Protocol::EvalD, 2, {window(3, {0.9, 0.7}), window(4, {0.8, 0.6})});
  airl::test::TempDir dir("acc");
  write_accuracy_csv(r, dir.path() / "a.csv");
  std::ifstream in(dir.path() / "a.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "window,t,acc\n3,4,0.9\n3,5,0.7\n4,5,0.8\n4,6,0.6\n");
}

TEST_CASE("prediction on a source domain is a usage error") {
  const TrainedModel m = zero_classifier_model(5);
  CHECK_THROWS_AS(predict_target(m, 5, Tensor::zeros({1, 2})), UsageError);
  CHECK_THROWS_AS(predict_target(m, 1, Tensor::zeros({1, 2})), UsageError);
}

TEST_CASE("a zero classifier predicts class 0 everywhere") {
  const TrainedModel m = zero_classifier_model(5);
  for (int p : predict_target(m, 6, airl::test::random_tensor({20, 2}, 1, -3.0, 3.0))) CHECK(p == 0);
  const BoundaryGrid g = export_boundary(m, 6, GridBounds{}, 100);
  CHECK(g.pred.size() == 10000);
  for (int p : g.pred) CHECK(p == 0);
  airl::test::TempDir dir("grid");
  write_boundary(g, dir.path() / "grid.csv");
  std::ifstream in(dir.path() / "grid.csv");
  std::size_t lines = 0;
  std::string line;
  std::getline(in, line);
  CHECK(line == "x1,x2,pred");
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 10000);
  CHECK(std::filesystem::exists(dir.path() / "grid.json"));
}

TEST_CASE("boundary export needs two features") {
  TrainedModel m = zero_classifier_model(5);
  m.model_config.input_dim = 3;
  CHECK_THROWS_AS(export_boundary(m, 6, GridBounds{}, 10), UsageError);
}

TEST_CASE("the first target uses the classifier after the last source") {
  const DomainSequence seq = small_circle(8, 4);
  TrainConfig cfg;
  cfg.batch_per_domain = 16;
  cfg.epochs = 1;
  const TrainedModel m = train_airl(seq, small_model(), cfg);
  REQUIRE(m.classifiers.size() == 3);
  const Tensor x = to_tensor(seq.domain(5));
  const Tensor h4 = generate_classifier(m.state, m.classifiers);
  NoGradGuard guard;
  const auto expected = predict_labels(classify(h4, m.model_config, encode(m.state, x)));
  CHECK(predict_target(m, 5, x) == expected);
  // Deterministic on repeated calls.
  CHECK(predict_target(m, 7, x) == predict_target(m, 7, x));
  // Reported accuracy equals the count of correct raw predictions.
  const auto pred = predict_target(m, 6, to_tensor(seq.domain(6)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == seq.domain(6).labels[i] ? 1 : 0;
  CHECK(target_accuracy(m, 6, seq.domain(6)) ==
        static_cast<double>(correct) / static_cast<double>(seq.domain(6).size()));
}

TEST_CASE("eval-s with K = 1 equals the first eval-d window") {
  const DomainSequence seq = small_circle(8, 4);
  const EvalReport s = eval_s(quick_factory(Method::Erm), seq, 1);
  const EvalReport d = eval_d(quick_factory(Method::Erm), seq, 1);
  REQUIRE(d.windows.size() == 4);
  CHECK(d.windows.front().trained_through == 4);
  CHECK(s.ood_avg == d.windows.front().targets.front().acc);
  CHECK(s.ood_wrt == s.ood_avg);
  d.validate();
  CHECK_THROWS_AS(eval_s(quick_factory(Method::Erm), seq, 5), ParameterError);
}

TEST_CASE("eval-d with K = T is a single window with the eval-s average") {
  const DomainSequence seq = small_circle(8, 4);
  const EvalReport d = eval_d(quick_factory(Method::Airl), seq, 4);
  const EvalReport s = eval_s(quick_factory(Method::Airl), seq, 4);
  REQUIRE(d.windows.size() == 1);
  CHECK(d.ood_avg == s.ood_avg);
  CHECK(d.ood_wrt == d.ood_avg);
  CHECK(s.ood_wrt <= s.ood_avg);
}

TEST_CASE("AIRL boundary on a far Circle-Hard target agrees with the truth more than ERM's") {
  const DomainSequence seq = gen_circle_hard(CircleParams{}).prefix(30, 15);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 0;
  const TrainedModel airl = train_airl(seq, AirlConfig{}, cfg);
  const TrainedModel erm = train_baseline(Method::Erm, seq, AirlConfig{}, cfg);
  const int target = 20;
  const double angle = circle_hard_angle(target);
  const auto truth = [](double x, double y) { return x * x + y * y <= 1.0 ? 1 : 0; };
  // Only the region where the target domain has mass matters.
  const auto keep = [angle](double x, double y) {
    const double dx = x - std::cos(angle);
    const double dy = y - std::sin(angle);
    return dx * dx + dy * dy <= 0.6 * 0.6;
  };
  const double a = grid_agreement(export_boundary(airl, target, GridBounds{}, 120), truth, keep);
  const double e = grid_agreement(export_boundary(erm, target, GridBounds{}, 120), truth, keep);
  CAPTURE(a);
  CAPTURE(e);
  CHECK(a > e);
}
