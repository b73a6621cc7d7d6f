#pragma once
//
// Synthetic evolving-domain sequences with known push-forward mechanisms.
//
// Randomness: every generator uses std::mt19937_64. Domain t draws from its
// own stream seeded with (seed + t), so domains are decoupled and a sequence
// is fully determined by (generator parameters, seed).
//

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace airl {

using Rng = std::mt19937_64;

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LabeledDataset {
  std::size_t feature_dim = 0;
  std::vector<double> features;  // n x feature_dim, row-major
  std::vector<int> labels;
  int domain_index = 1;

  std::size_t size() const { return labels.size(); }
  const double* row(std::size_t i) const { return features.data() + i * feature_dim; }
  LabeledDataset subset(const std::vector<std::size_t>& rows) const;
  // Throws ParameterError when a row is non-finite, a label is out of range
  // or the dataset is empty.
  void validate(int n_classes) const;

  bool operator==(const LabeledDataset&) const = default;
};

using Matrix2 = std::array<std::array<double, 2>, 2>;

struct GroundTruthMap {
  std::string kind = "rotation2d";
  Matrix2 matrix{};

  static GroundTruthMap rotation(double angle);
  bool operator==(const GroundTruthMap&) const = default;
};

struct DomainSequence {
  std::vector<LabeledDataset> domains;
  int source_count = 1;  // T: domains 1..T are sources
  int n_classes = 2;
  std::vector<GroundTruthMap> mappings;  // m_t maps domain t to t+1; empty when unknown
  std::string generator;
  std::uint64_t seed = 0;
  nlohmann::json params = nlohmann::json::object();

  int domain_count() const { return static_cast<int>(domains.size()); }
  std::size_t feature_dim() const { return domains.empty() ? 0 : domains.front().feature_dim; }
  // 1-based access, matching domain_index.
  const LabeledDataset& domain(int t) const { return domains.at(static_cast<std::size_t>(t - 1)); }
  // Copy restricted to domains 1..count with source_count set to `sources`.
  DomainSequence prefix(int count, int sources) const;
  void validate() const;

  bool operator==(const DomainSequence&) const = default;
};

struct SplitSpec {
  double train_frac = 0.81;
  double val_frac = 0.09;
  double idtest_frac = 0.10;
};

struct CircleParams {
  int domains = 30;
  int per_domain = 1000;
  double radius = 1.0;
  double noise_sigma = 0.2;
  std::uint64_t seed = 0;
};

// Domain t has mean radius * (cos(pi (t-1) / T), sin(pi (t-1) / T)); every map
// is the rotation by pi / T.
DomainSequence gen_circle(const CircleParams& p);

// Domain angles follow theta_1 = 0, theta_t = theta_{t-1} + pi (t-1) / 180;
// map m_t is the rotation by pi t / 180.
DomainSequence gen_circle_hard(const CircleParams& p);

// Angle of domain t's mean under the Circle-Hard recurrence.
double circle_hard_angle(int t);

struct RotatingGaussianSpec {
  std::vector<double> class_priors;
  std::vector<std::array<double, 2>> means;
  std::vector<Matrix2> covariances;
};

// Class-conditional Gaussians for domain 1 pushed through the rotation by
// step_angle(t) to obtain domain t + 1.
DomainSequence gen_rotating_gaussian(const RotatingGaussianSpec& spec, const std::function<double(int)>& step_angle,
                                     int domains, int per_domain, std::uint64_t seed);

LabeledDataset apply_ground_truth_map(const LabeledDataset& ds, const GroundTruthMap& m);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> idtest;
};

struct SplitResult {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset idtest;
};

// Deterministic shuffle by seed; val and idtest get floor(n * frac) rows and
// the remainder goes to train.
SplitIndices split_indices(std::size_t n, const SplitSpec& spec, std::uint64_t seed);
SplitResult split(const LabeledDataset& ds, const SplitSpec& spec, std::uint64_t seed);

struct RmnistParams {
  int domains = 30;
  double step_deg = 6.0;
  int downsample_to = 7;
  int per_domain = 1000;
  std::uint64_t seed = 0;
};

// Reads MNIST IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte)
// from `dir`, rotates domain t by step_deg * (t - 1) degrees counterclockwise
// and block-averages each image to downsample_to x downsample_to pixels.
DomainSequence load_rmnist_lite(const std::filesystem::path& dir, const RmnistParams& p);

// Image helpers shared with the loader, exposed for tests.
std::vector<double> rotate_image(const std::vector<double>& img, int side, double degrees);
std::vector<double> downsample_image(const std::vector<double>& img, int side, int target);

// ---- dataset files ----------------------------------------------------------
//
// <stem>.csv  header `domain,y,x1,...,xd`, one row per instance, values in
//             shortest round-trip decimal form
// <stem>.json sidecar {format, version, generator, seed, params, n_domains,
//             source_count, n_classes, feature_dim, maps:[{kind, matrix}]}
//
inline constexpr int kDatasetFormatVersion = 1;

void write_sequence(const DomainSequence& seq, const std::filesystem::path& csv_path);
DomainSequence read_sequence(const std::filesystem::path& csv_path);
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

}  // namespace airl
