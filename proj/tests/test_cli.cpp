#include "airl/cli.hpp"
#include "airl/run_config.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace airl;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "airl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Points the run root at a fresh temporary directory for one test.
struct RunRoot {
  airl::test::TempDir dir{"cli"};
  RunRoot() { setenv("AIRL_RUN_ROOT", dir.path().c_str(), 1); }
  ~RunRoot() { unsetenv("AIRL_RUN_ROOT"); }
  fs::path operator/(const std::string& s) const { return dir.path() / s; }
};

std::vector<fs::path> subdirs(const fs::path& p) {
  std::vector<fs::path> out;
  if (!fs::exists(p)) return out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

const std::vector<std::string> kSmall = {"--domains", "8",     "--per-domain", "120", "--sources", "4",
                                         "--epochs",  "2",     "--batch",      "16"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return args;
}

nlohmann::json metrics_without_method(const fs::path& dir) {
  nlohmann::json m = read_json(dir / "metrics.json");
  m.erase("method");
  return m;
}

}  // namespace

TEST_CASE("seed lists") {
  CHECK(parse_seed_list("3") == std::vector<std::uint64_t>{3});
  CHECK(parse_seed_list("0..4") == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(parse_seed_list("0,2,5") == std::vector<std::uint64_t>{0, 2, 5});
  CHECK_THROWS_AS(parse_seed_list("4..1"), ParameterError);
  CHECK_THROWS_AS(parse_seed_list("x"), ParameterError);
}

TEST_CASE("config hashing and strict parsing") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  RunConfig c;
  const nlohmann::json j = to_json(c);
  CHECK(to_json(run_config_from_json(j)) == j);
  CHECK(config_hash(j).size() == 16);
  nlohmann::json bad = j;
  bad["train"]["warmup"] = 3;
  CHECK_THROWS_AS(run_config_from_json(bad), std::invalid_argument);
  bad = j;
  bad["colour"] = "red";
  CHECK_THROWS_AS(run_config_from_json(bad), std::invalid_argument);
}

TEST_CASE("generate writes reproducible dataset files") {
  RunRoot root;
  CHECK(cli({"generate", "circle", "--seed", "0", "--out", (root / "a.csv").string()}) == 0);
  CHECK(cli({"generate", "circle", "--seed", "0", "--out", (root / "b.csv").string()}) == 0);
  const std::string a = slurp(root / "a.csv");
  CHECK(a == slurp(root / "b.csv"));
  CHECK(slurp(root / "a.json") == slurp(root / "b.json"));
  CHECK(std::count(a.begin(), a.end(), '\n') == 30001);
  const DomainSequence seq = read_sequence(root / "a.csv");
  CHECK(seq.domain_count() == 30);

  CHECK(cli({"generate", "circle-hard", "--domains", "20", "--out", (root / "h.csv").string()}) == 0);
  const DomainSequence hard = read_sequence(root / "h.csv");
  CHECK(hard.domain_count() == 20);
  CHECK(hard.generator == "circle-hard");
  CHECK(hard.mappings.at(2) == GroundTruthMap::rotation(std::numbers::pi * 3 / 180));

  CHECK(cli({"generate", "spiral"}) == 2);
}

TEST_CASE("train writes one run directory per seed and is reproducible") {
  RunRoot root;
  CHECK(cli(with_small({"train", "erm", "--seed", "0..1"})) == 0);
  const auto runs = subdirs(root / "runs");
  REQUIRE(runs.size() == 2);
  for (const auto& r : runs) {
    CHECK(fs::exists(r / "config.json"));
    CHECK(fs::exists(r / "train.jsonl"));
    CHECK(fs::exists(r / "model" / "model.ckpt"));
    CHECK(fs::exists(r / "metrics.json"));
    CHECK(r.filename().string().size() == 16);
  }
  const std::string before = slurp(runs[0] / "metrics.json");
  const std::string ckpt = slurp(runs[0] / "model" / "model.ckpt");
  CHECK(cli(with_small({"train", "erm", "--seed", "0", "--force"})) == 0);
  CHECK(slurp(runs[0] / "metrics.json") == before);
  CHECK(slurp(runs[0] / "model" / "model.ckpt") == ckpt);

  // Parallel workers produce the same files.
  RunRoot other;
  CHECK(cli(with_small({"train", "erm", "--seed", "0..1", "--jobs", "2"})) == 0);
  const auto runs2 = subdirs(other / "runs");
  REQUIRE(runs2.size() == 2);
  CHECK(runs2[0].filename() == runs[0].filename());
  CHECK(slurp(runs2[0] / "metrics.json") == before);
}

TEST_CASE("the resolved config reproduces its run") {
  RunRoot root;
  CHECK(cli(with_small({"train", "airl", "--seed", "3"})) == 0);
  const auto runs = subdirs(root / "runs");
  REQUIRE(runs.size() == 1);
  const std::string metrics = slurp(runs[0] / "metrics.json");
  const fs::path config = root / "resolved.json";
  fs::copy_file(runs[0] / "config.json", config);
  fs::remove_all(runs[0]);
  CHECK(cli({"train", "airl", "--config", config.string(), "--seed", "3"}) == 0);
  CHECK(slurp(runs[0] / "metrics.json") == metrics);
}

TEST_CASE("no_inv matches airl with alpha 0") {
  RunRoot root;
  CHECK(cli(with_small({"train", "ablation:no_inv", "--seed", "1"})) == 0);
  CHECK(cli(with_small({"train", "airl", "--alpha", "0", "--seed", "1"})) == 0);
  const auto runs = subdirs(root / "runs");
  REQUIRE(runs.size() == 2);
  CHECK(metrics_without_method(runs[0]) == metrics_without_method(runs[1]));
}

TEST_CASE("a failed run leaves a diagnostic and a nonzero status") {
  RunRoot root;
  CHECK(cli({"train", "airl", "--seed", "0", "--domains", "6", "--per-domain", "120", "--sources", "4", "--epochs", "1", "--batch", "500"}) == 1);
  const auto runs = subdirs(root / "runs");
  REQUIRE(runs.size() == 1);
  CHECK(fs::exists(runs[0] / "error.txt"));
  CHECK_FALSE(fs::exists(runs[0] / "metrics.json"));
  CHECK(cli(with_small({"train", "sgd"})) == 2);
  CHECK(cli({"train", "airl", "--epochs", "0"}) == 2);
}

TEST_CASE("eval writes per-seed reports and a recomputable summary") {
  RunRoot root;
  CHECK(cli(with_small({"eval", "eval-d", "--k", "2", "--method", "erm", "--seed", "0..1"})) == 0);
  const auto evals = subdirs(root / "evals");
  REQUIRE(evals.size() == 2);
  std::vector<double> avg;
  for (const auto& e : evals) {
    CHECK(fs::exists(e / "accuracy.csv"));
    CHECK(fs::exists(e / "window-4.json"));
    CHECK(fs::exists(e / "window-6.json"));
    const EvalReport r = read_json(e / "report.json").get<EvalReport>();
    r.validate();
    CHECK(r.windows.size() == 3);
    avg.push_back(r.ood_avg);
  }
  const auto sums = subdirs(root / "summaries");
  REQUIRE(sums.size() == 1);
  const EvalReport summary = read_json(sums[0] / "summary.json").get<EvalReport>();
  CHECK(summary.per_seed.size() == 2);
  CHECK(summary.ood_avg == doctest::Approx((avg[0] + avg[1]) / 2.0).epsilon(1e-15));
  const std::string csv = slurp(sums[0] / "summary.csv");
  CHECK(csv.rfind("dataset,method,protocol,K,OODAvg,OODAvg_std,OODWrt,OODWrt_std,seeds\n", 0) == 0);
  CHECK(csv.find("circle,erm,eval-d,2,") != std::string::npos);

  CHECK(cli(with_small({"eval", "eval-d", "--k", "5", "--method", "erm"})) == 2);
  CHECK(cli(with_small({"eval", "eval-s", "--k", "5", "--method", "erm"})) == 2);
}

TEST_CASE("verify-theory") {
  RunRoot root;
  const fs::path out = root / "theory.json";
  CHECK(cli({"verify-theory", "all", "--trials", "1000", "--out", out.string()}) == 0);
  const nlohmann::json doc = read_json(out);
  REQUIRE(doc.at("checks").size() == 3);
  for (const auto& c : doc.at("checks")) {
    CHECK(c.at("violations") == 0);
    CHECK(c.contains("max_slack"));
  }
  CHECK(cli({"verify-theory", "all", "--trials", "0"}) == 2);
  CHECK(cli({"verify-theory", "entropy"}) == 2);
}

TEST_CASE("export-boundary from a trained run") {
  RunRoot root;
  CHECK(cli(with_small({"train", "airl", "--seed", "0"})) == 0);
  const auto runs = subdirs(root / "runs");
  REQUIRE(runs.size() == 1);
  const fs::path out = root / "grid.csv";
  CHECK(cli({"export-boundary", "--run", runs[0].string(), "--target", "6", "--resolution", "50", "--out",
             out.string()}) == 0);
  const std::string csv = slurp(out);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2501);
  CHECK(fs::exists(root / "grid.json"));
  CHECK(cli({"export-boundary", "--run", runs[0].string(), "--target", "2"}) == 2);
}
