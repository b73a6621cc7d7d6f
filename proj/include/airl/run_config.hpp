#pragma once
//
// Resolved run configurations. A RunConfig serializes to a JSON document with
// sections {command, method, data, model, train, eval}; unknown keys are
// rejected at every level. Run directories are named by the FNV-1a 64-bit
// hash of the resolved document.
//

#include "airl/datagen.hpp"
#include "airl/evaluation.hpp"
#include "airl/model.hpp"
#include "airl/training.hpp"

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

namespace airl {

struct DataSpec {
  // "circle", "circle-hard" or a path to a dataset CSV.
  std::string source = "circle";
  int domains = 30;
  int per_domain = 1000;
  double radius = 1.0;
  double noise_sigma = 0.2;
  // Generator seed; follows the run seed when unset.
  std::optional<std::uint64_t> seed;
  // Number of source domains T; 0 keeps the dataset's own value.
  int sources = 0;

  bool generated() const { return source == "circle" || source == "circle-hard"; }
};

void to_json(nlohmann::json& j, const DataSpec& d);
void from_json(const nlohmann::json& j, DataSpec& d);

struct RunConfig {
  std::string command = "train";
  std::string method = "airl";
  DataSpec data;
  AirlConfig model;
  TrainConfig train;
  std::string protocol = "eval-d";
  int k = 5;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// Fixes the run seed, the data seed and the data-derived model dimensions.
RunConfig resolve(RunConfig c, std::uint64_t seed, const DomainSequence& data);

// Loads or generates the dataset described by `spec`, using `seed` when
// it leaves the generator seed open.
DomainSequence load_data(const DataSpec& spec, std::uint64_t seed);

std::uint64_t fnv1a64(std::string_view bytes);
// 16 lowercase hex digits of fnv1a64 over the compact JSON dump.
std::string config_hash(const nlohmann::json& resolved);

// $AIRL_RUN_ROOT, or ./airl_runs when unset.
std::filesystem::path run_root();

}  // namespace airl
