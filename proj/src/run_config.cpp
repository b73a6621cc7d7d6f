#include "airl/run_config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>

namespace airl {

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) throw ParameterError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw ParameterError(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace

void to_json(nlohmann::json& j, const DataSpec& d) {
  j = {{"source", d.source}, {"sources", d.sources}};
  if (d.generated()) {
    j["domains"] = d.domains;
    j["per_domain"] = d.per_domain;
    j["radius"] = d.radius;
    j["noise_sigma"] = d.noise_sigma;
    j["seed"] = d.seed ? nlohmann::json(*d.seed) : nlohmann::json(nullptr);
  }
}

void from_json(const nlohmann::json& j, DataSpec& d) {
  reject_unknown(j, {"source", "domains", "per_domain", "radius", "noise_sigma", "seed", "sources"}, "data config");
  d.source = j.value("source", d.source);
  d.domains = j.value("domains", d.domains);
  d.per_domain = j.value("per_domain", d.per_domain);
  d.radius = j.value("radius", d.radius);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  if (j.contains("seed") && !j.at("seed").is_null()) d.seed = j.at("seed").get<std::uint64_t>();
  d.sources = j.value("sources", d.sources);
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"command", c.command},
          {"method", c.method},
          {"data", c.data},
          {"model", c.model},
          {"train", c.train},
          {"eval", {{"protocol", c.protocol}, {"K", c.k}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"command", "method", "data", "model", "train", "eval"}, "run config");
  RunConfig c;
  c.command = j.value("command", c.command);
  c.method = j.value("method", c.method);
  parse_method(c.method);
  if (j.contains("data")) c.data = j.at("data").get<DataSpec>();
  if (j.contains("model")) c.model = j.at("model").get<AirlConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"protocol", "K"}, "eval config");
    c.protocol = e.value("protocol", c.protocol);
    c.k = e.value("K", c.k);
    parse_protocol(c.protocol);
  }
  return c;
}

RunConfig resolve(RunConfig c, std::uint64_t seed, const DomainSequence& data) {
  c.train.seed = seed;
  if (c.data.generated() && !c.data.seed) c.data.seed = seed;
  c.data.sources = data.source_count;
  c.model.input_dim = data.feature_dim();
  c.model.n_classes = data.n_classes;
  c.model.validate();
  c.train.validate();
  return c;
}

DomainSequence load_data(const DataSpec& spec, std::uint64_t seed) {
  DomainSequence seq;
  if (spec.generated()) {
    CircleParams p;
    p.domains = spec.domains;
    p.per_domain = spec.per_domain;
    p.radius = spec.radius;
    p.noise_sigma = spec.noise_sigma;
    p.seed = spec.seed.value_or(seed);
    seq = spec.source == "circle" ? gen_circle(p) : gen_circle_hard(p);
  } else {
    seq = read_sequence(spec.source);
  }
  if (spec.sources > 0) {
    if (spec.sources > seq.domain_count()) throw ParameterError("data config: more sources than domains");
    seq.source_count = spec.sources;
  }
  return seq;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const nlohmann::json& resolved) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(resolved.dump())));
  return buf;
}

std::filesystem::path run_root() {
  const char* env = std::getenv("AIRL_RUN_ROOT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("airl_runs");
}

}  // namespace airl
