#include "airl/datagen.hpp"
#include "airl/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace airl {

namespace {

constexpr double kPi = std::numbers::pi;

Rng domain_rng(std::uint64_t seed, int t) { return Rng(seed + static_cast<std::uint64_t>(t)); }

void check_circle_params(const CircleParams& p) {
  if (p.domains < 2) throw ParameterError("circle: need at least 2 domains");
  if (p.per_domain < 2) throw ParameterError("circle: need at least 2 instances per domain");
  if (!(p.radius > 0.0)) throw ParameterError("circle: radius must be positive");
  if (!(p.noise_sigma > 0.0)) throw ParameterError("circle: noise_sigma must be positive");
}

// Isotropic Gaussian around (radius cos a, radius sin a), labelled by the
// disc of the same radius around the origin.
LabeledDataset circle_domain(const CircleParams& p, int t, double angle) {
  Rng rng = domain_rng(p.seed, t);
  std::normal_distribution<double> noise(0.0, p.noise_sigma);
  LabeledDataset ds;
  ds.feature_dim = 2;
  ds.domain_index = t;
  const double cx = p.radius * std::cos(angle);
  const double cy = p.radius * std::sin(angle);
  const double r2 = p.radius * p.radius;
  for (int i = 0; i < p.per_domain; ++i) {
    const double x1 = cx + noise(rng);
    const double x2 = cy + noise(rng);
    ds.features.push_back(x1);
    ds.features.push_back(x2);
    ds.labels.push_back(x1 * x1 + x2 * x2 <= r2 ? 1 : 0);
  }
  return ds;
}

nlohmann::json circle_json(const CircleParams& p) {
  return {{"domains", p.domains},
          {"per_domain", p.per_domain},
          {"radius", p.radius},
          {"noise_sigma", p.noise_sigma}};
}

Matrix2 mat_mul(const Matrix2& a, const Matrix2& b) {
  Matrix2 r{};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
  return r;
}

}  // namespace

// ---- containers -------------------------------------------------------------

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& rows) const {
  LabeledDataset out;
  out.feature_dim = feature_dim;
  out.domain_index = domain_index;
  out.features.reserve(rows.size() * feature_dim);
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    out.features.insert(out.features.end(), row(r), row(r) + feature_dim);
    out.labels.push_back(labels.at(r));
  }
  return out;
}

void LabeledDataset::validate(int n_classes) const {
  if (labels.empty()) throw ParameterError("dataset: domain " + std::to_string(domain_index) + " is empty");
  if (features.size() != labels.size() * feature_dim) throw ParameterError("dataset: feature matrix size mismatch");
  for (double v : features) {
    if (!std::isfinite(v)) throw ParameterError("dataset: non-finite feature in domain " + std::to_string(domain_index));
  }
  for (int y : labels) {
    if (y < 0 || y >= n_classes) {
      throw ParameterError("dataset: label " + std::to_string(y) + " outside [0," + std::to_string(n_classes) + ")");
    }
  }
}

GroundTruthMap GroundTruthMap::rotation(double angle) {
  GroundTruthMap m;
  m.kind = "rotation2d";
  m.matrix = {{{std::cos(angle), -std::sin(angle)}, {std::sin(angle), std::cos(angle)}}};
  return m;
}

DomainSequence DomainSequence::prefix(int count, int sources) const {
  if (count < 1 || count > domain_count()) throw ParameterError("prefix: domain count out of range");
  if (sources < 1 || sources > count) throw ParameterError("prefix: source count out of range");
  DomainSequence out = *this;
  out.domains.resize(static_cast<std::size_t>(count));
  if (!out.mappings.empty()) out.mappings.resize(static_cast<std::size_t>(count - 1));
  out.source_count = sources;
  return out;
}

void DomainSequence::validate() const {
  if (domains.empty()) throw ParameterError("sequence: no domains");
  if (source_count < 1 || source_count > domain_count()) {
    throw ParameterError("sequence: source count must satisfy 1 <= T <= #domains");
  }
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].domain_index != static_cast<int>(i) + 1) {
      throw ParameterError("sequence: domain indices must be consecutive from 1");
    }
    if (domains[i].feature_dim != feature_dim()) throw ParameterError("sequence: feature dimension differs");
    domains[i].validate(n_classes);
  }
  if (!mappings.empty() && mappings.size() + 1 != domains.size()) {
    throw ParameterError("sequence: expected one mapping per consecutive domain pair");
  }
}

// ---- generators -------------------------------------------------------------

DomainSequence gen_circle(const CircleParams& p) {
  check_circle_params(p);
  DomainSequence seq;
  seq.generator = "circle";
  seq.seed = p.seed;
  seq.params = circle_json(p);
  seq.n_classes = 2;
  seq.source_count = p.domains / 2;
  const double step = kPi / p.domains;
  for (int t = 1; t <= p.domains; ++t) seq.domains.push_back(circle_domain(p, t, step * (t - 1)));
  for (int t = 1; t < p.domains; ++t) seq.mappings.push_back(GroundTruthMap::rotation(step));
  return seq;
}

double circle_hard_angle(int t) {
  double theta = 0.0;
  for (int s = 2; s <= t; ++s) theta += kPi * (s - 1) / 180.0;
  return theta;
}

DomainSequence gen_circle_hard(const CircleParams& p) {
  check_circle_params(p);
  DomainSequence seq;
  seq.generator = "circle-hard";
  seq.seed = p.seed;
  seq.params = circle_json(p);
  seq.n_classes = 2;
  seq.source_count = p.domains / 2;
  for (int t = 1; t <= p.domains; ++t) seq.domains.push_back(circle_domain(p, t, circle_hard_angle(t)));
  for (int t = 1; t < p.domains; ++t) seq.mappings.push_back(GroundTruthMap::rotation(kPi * t / 180.0));
  return seq;
}

DomainSequence gen_rotating_gaussian(const RotatingGaussianSpec& spec, const std::function<double(int)>& step_angle,
                                     int domains, int per_domain, std::uint64_t seed) {
  const std::size_t k = spec.class_priors.size();
  if (k == 0) throw ParameterError("rotating_gaussian: need at least one class");
  if (spec.means.size() != k || spec.covariances.size() != k) {
    throw ParameterError("rotating_gaussian: priors, means and covariances differ in length");
  }
  if (domains < 1 || per_domain < 1) throw ParameterError("rotating_gaussian: empty sequence");
  double prior_sum = 0.0;
  for (double p : spec.class_priors) {
    if (!(p >= 0.0)) throw ParameterError("rotating_gaussian: negative class prior");
    prior_sum += p;
  }
  if (!(prior_sum > 0.0)) throw ParameterError("rotating_gaussian: class priors sum to zero");

  // Lower Cholesky factors of the domain-1 covariances.
  std::vector<Matrix2> chol(k);
  for (std::size_t y = 0; y < k; ++y) {
    const auto& c = spec.covariances[y];
    if (std::abs(c[0][1] - c[1][0]) > 1e-12) throw ParameterError("rotating_gaussian: covariance not symmetric");
    const double det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    if (!(c[0][0] > 0.0) || !(det > 1e-15)) {
      throw ParameterError("rotating_gaussian: covariance of class " + std::to_string(y) + " is singular");
    }
    const double l00 = std::sqrt(c[0][0]);
    const double l10 = c[1][0] / l00;
    const double l11 = std::sqrt(c[1][1] - l10 * l10);
    chol[y] = {{{l00, 0.0}, {l10, l11}}};
  }

  DomainSequence seq;
  seq.generator = "rotating-gaussian";
  seq.seed = seed;
  seq.n_classes = static_cast<int>(k);
  seq.source_count = std::max(1, domains / 2);
  seq.params = {{"domains", domains}, {"per_domain", per_domain}, {"class_priors", spec.class_priors}};

  Matrix2 cumulative = {{{1.0, 0.0}, {0.0, 1.0}}};
  std::discrete_distribution<int> pick(spec.class_priors.begin(), spec.class_priors.end());
  for (int t = 1; t <= domains; ++t) {
    if (t > 1) {
      seq.mappings.push_back(GroundTruthMap::rotation(step_angle(t - 1)));
      cumulative = mat_mul(seq.mappings.back().matrix, cumulative);
    }
    Rng rng = domain_rng(seed, t);
    std::normal_distribution<double> unit(0.0, 1.0);
    LabeledDataset ds;
    ds.feature_dim = 2;
    ds.domain_index = t;
    for (int i = 0; i < per_domain; ++i) {
      const int y = pick(rng);
      const double e0 = unit(rng);
      const double e1 = unit(rng);
      // x = R (mu + L e): the rotated class distribution N(R mu, R S R^T).
      const double u0 = spec.means[y][0] + chol[y][0][0] * e0;
      const double u1 = spec.means[y][1] + chol[y][1][0] * e0 + chol[y][1][1] * e1;
      ds.features.push_back(cumulative[0][0] * u0 + cumulative[0][1] * u1);
      ds.features.push_back(cumulative[1][0] * u0 + cumulative[1][1] * u1);
      ds.labels.push_back(y);
    }
    seq.domains.push_back(std::move(ds));
  }
  if (seq.domains.size() == 1) seq.source_count = 1;
  return seq;
}

LabeledDataset apply_ground_truth_map(const LabeledDataset& ds, const GroundTruthMap& m) {
  if (m.kind != "rotation2d") throw ParameterError("apply_ground_truth_map: unknown map kind '" + m.kind + "'");
  if (ds.feature_dim != 2) {
    throw DimensionError("apply_ground_truth_map: rotation2d needs 2 features, dataset has " +
                         std::to_string(ds.feature_dim));
  }
  LabeledDataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x1 = ds.features[2 * i];
    const double x2 = ds.features[2 * i + 1];
    out.features[2 * i] = m.matrix[0][0] * x1 + m.matrix[0][1] * x2;
    out.features[2 * i + 1] = m.matrix[1][0] * x1 + m.matrix[1][1] * x2;
  }
  return out;
}

// ---- splitting --------------------------------------------------------------

SplitIndices split_indices(std::size_t n, const SplitSpec& spec, std::uint64_t seed) {
  const double total = spec.train_frac + spec.val_frac + spec.idtest_frac;
  if (std::abs(total - 1.0) > 1e-9 || spec.train_frac < 0 || spec.val_frac < 0 || spec.idtest_frac < 0) {
    throw ParameterError("split: fractions must be non-negative and sum to 1");
  }
  // The epsilon keeps products such as 0.29 * 100 from flooring one short.
  const auto part = [n](double frac) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac + 1e-9));
  };
  const std::size_t n_val = part(spec.val_frac);
  const std::size_t n_test = part(spec.idtest_frac);
  if (n_val == 0 || n_test == 0 || n_val + n_test >= n) {
    throw ParameterError("split: " + std::to_string(n) + " rows leave an empty split part");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  SplitIndices s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.idtest.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val),
                  idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), idx.end());
  return s;
}

SplitResult split(const LabeledDataset& ds, const SplitSpec& spec, std::uint64_t seed) {
  const SplitIndices s = split_indices(ds.size(), spec, seed);
  return {ds.subset(s.train), ds.subset(s.val), ds.subset(s.idtest)};
}

// ---- rotated digits ---------------------------------------------------------

std::vector<double> rotate_image(const std::vector<double>& img, int side, double degrees) {
  if (degrees == 0.0) return img;
  const double a = degrees * kPi / 180.0;
  const double c = std::cos(a);
  const double s = std::sin(a);
  const double center = (side - 1) / 2.0;
  std::vector<double> out(img.size(), 0.0);
  const auto pixel = [&](int r, int col) -> double {
    if (r < 0 || r >= side || col < 0 || col >= side) return 0.0;
    return img[static_cast<std::size_t>(r * side + col)];
  };
  for (int r = 0; r < side; ++r) {
    for (int col = 0; col < side; ++col) {
      // y axis points up so positive angles turn the content counterclockwise.
      const double x = col - center;
      const double y = center - r;
      const double sx = c * x + s * y;
      const double sy = -s * x + c * y;
      const double src_col = sx + center;
      const double src_row = center - sy;
      const int r0 = static_cast<int>(std::floor(src_row));
      const int c0 = static_cast<int>(std::floor(src_col));
      const double fr = src_row - r0;
      const double fc = src_col - c0;
      out[static_cast<std::size_t>(r * side + col)] =
          (1 - fr) * ((1 - fc) * pixel(r0, c0) + fc * pixel(r0, c0 + 1)) +
          fr * ((1 - fc) * pixel(r0 + 1, c0) + fc * pixel(r0 + 1, c0 + 1));
    }
  }
  return out;
}

std::vector<double> downsample_image(const std::vector<double>& img, int side, int target) {
  if (target <= 0 || target > side) throw ParameterError("downsample: target size out of range");
  std::vector<double> out(static_cast<std::size_t>(target * target), 0.0);
  std::vector<int> counts(out.size(), 0);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const std::size_t o = static_cast<std::size_t>((r * target / side) * target + (c * target / side));
      out[o] += img[static_cast<std::size_t>(r * side + c)];
      ++counts[o];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= counts[i];
  return out;
}

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataFormatError("idx: truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

struct IdxImages {
  int count = 0;
  int side = 0;
  std::vector<unsigned char> pixels;
};

IdxImages read_idx_images(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("rmnist: missing image archive " + path.string());
  if (read_be32(in) != 0x00000803) throw DataFormatError("rmnist: bad image magic in " + path.string());
  IdxImages out;
  out.count = static_cast<int>(read_be32(in));
  const auto rows = read_be32(in);
  const auto cols = read_be32(in);
  if (rows != cols || rows == 0) throw DataFormatError("rmnist: images must be square");
  out.side = static_cast<int>(rows);
  out.pixels.resize(static_cast<std::size_t>(out.count) * rows * cols);
  if (!in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()))) {
    throw DataFormatError("rmnist: truncated image data");
  }
  return out;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("rmnist: missing label archive " + path.string());
  if (read_be32(in) != 0x00000801) throw DataFormatError("rmnist: bad label magic in " + path.string());
  const auto n = read_be32(in);
  std::vector<unsigned char> raw(n);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n))) {
    throw DataFormatError("rmnist: truncated label data");
  }
  std::vector<int> labels(raw.begin(), raw.end());
  for (int y : labels) {
    if (y > 9) throw DataFormatError("rmnist: label out of range");
  }
  return labels;
}

}  // namespace

DomainSequence load_rmnist_lite(const std::filesystem::path& dir, const RmnistParams& p) {
  if (p.domains < 2 || p.per_domain < 1) throw ParameterError("rmnist: need >= 2 domains and >= 1 image per domain");
  const IdxImages images = read_idx_images(dir / "train-images-idx3-ubyte");
  const std::vector<int> labels = read_idx_labels(dir / "train-labels-idx1-ubyte");
  if (static_cast<int>(labels.size()) != images.count) throw DataFormatError("rmnist: image/label count mismatch");
  if (images.count < p.per_domain) throw ParameterError("rmnist: archive has fewer images than per_domain");

  DomainSequence seq;
  seq.generator = "rmnist-lite";
  seq.seed = p.seed;
  seq.n_classes = 10;
  seq.source_count = p.domains / 2;
  seq.params = {{"domains", p.domains},
                {"step_deg", p.step_deg},
                {"downsample_to", p.downsample_to},
                {"per_domain", p.per_domain}};
  const std::size_t area = static_cast<std::size_t>(images.side * images.side);
  for (int t = 1; t <= p.domains; ++t) {
    Rng rng = domain_rng(p.seed, t);
    std::vector<std::size_t> pick(static_cast<std::size_t>(images.count));
    for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
    std::shuffle(pick.begin(), pick.end(), rng);
    LabeledDataset ds;
    ds.feature_dim = static_cast<std::size_t>(p.downsample_to * p.downsample_to);
    ds.domain_index = t;
    for (int i = 0; i < p.per_domain; ++i) {
      const std::size_t k = pick[static_cast<std::size_t>(i)];
      std::vector<double> img(area);
      for (std::size_t j = 0; j < area; ++j) img[j] = images.pixels[k * area + j] / 255.0;
      auto small = downsample_image(rotate_image(img, images.side, p.step_deg * (t - 1)), images.side,
                                    p.downsample_to);
      ds.features.insert(ds.features.end(), small.begin(), small.end());
      ds.labels.push_back(labels[k]);
    }
    seq.domains.push_back(std::move(ds));
  }
  // Rotations act on the full-resolution image, not on the downsampled
  // features, so no feature-space maps are recorded; the angles are.
  nlohmann::json angles = nlohmann::json::array();
  for (int t = 1; t <= p.domains; ++t) angles.push_back(p.step_deg * (t - 1));
  seq.params["angles_deg"] = angles;
  return seq;
}

// ---- files ------------------------------------------------------------------

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".json");
  return p;
}

namespace {

void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw DataFormatError("dataset csv: bad number '" + std::string(s) + "' on line " + std::to_string(line));
  }
  return v;
}

}  // namespace

void write_sequence(const DomainSequence& seq, const std::filesystem::path& csv_path) {
  seq.validate();
  const std::size_t d = seq.feature_dim();
  std::string out = "domain,y";
  for (std::size_t j = 1; j <= d; ++j) out += ",x" + std::to_string(j);
  out += '\n';
  for (const auto& ds : seq.domains) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out += std::to_string(ds.domain_index);
      out += ',';
      out += std::to_string(ds.labels[i]);
      for (std::size_t j = 0; j < d; ++j) {
        out += ',';
        append_double(out, ds.row(i)[j]);
      }
      out += '\n';
    }
  }
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw DataFormatError("cannot write " + csv_path.string());
  csv << out;

  nlohmann::json maps = nlohmann::json::array();
  for (const auto& m : seq.mappings) {
    maps.push_back({{"kind", m.kind},
                    {"matrix", {{m.matrix[0][0], m.matrix[0][1]}, {m.matrix[1][0], m.matrix[1][1]}}}});
  }
  nlohmann::json meta = {{"format", "airl-domain-sequence"},
                         {"version", kDatasetFormatVersion},
                         {"generator", seq.generator},
                         {"seed", seq.seed},
                         {"params", seq.params},
                         {"n_domains", seq.domain_count()},
                         {"source_count", seq.source_count},
                         {"n_classes", seq.n_classes},
                         {"feature_dim", d},
                         {"maps", maps}};
  std::ofstream side(sidecar_path(csv_path), std::ios::binary | std::ios::trunc);
  if (!side) throw DataFormatError("cannot write " + sidecar_path(csv_path).string());
  side << meta.dump(2) << '\n';
}

DomainSequence read_sequence(const std::filesystem::path& csv_path) {
  std::ifstream side(sidecar_path(csv_path));
  if (!side) throw DataFormatError("missing sidecar " + sidecar_path(csv_path).string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(side);
  } catch (const nlohmann::json::exception& e) {
    throw DataFormatError("sidecar: " + std::string(e.what()));
  }
  if (meta.value("format", "") != "airl-domain-sequence") throw DataFormatError("sidecar: unknown format");
  if (meta.value("version", 0) != kDatasetFormatVersion) throw DataFormatError("sidecar: unsupported version");

  DomainSequence seq;
  seq.generator = meta.at("generator").get<std::string>();
  seq.seed = meta.at("seed").get<std::uint64_t>();
  seq.params = meta.at("params");
  seq.source_count = meta.at("source_count").get<int>();
  seq.n_classes = meta.at("n_classes").get<int>();
  const auto d = meta.at("feature_dim").get<std::size_t>();
  const int n_domains = meta.at("n_domains").get<int>();
  for (const auto& m : meta.at("maps")) {
    GroundTruthMap g;
    g.kind = m.at("kind").get<std::string>();
    const auto& mat = m.at("matrix");
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) g.matrix[i][j] = mat.at(i).at(j).get<double>();
    seq.mappings.push_back(g);
  }
  for (int t = 1; t <= n_domains; ++t) {
    LabeledDataset ds;
    ds.feature_dim = d;
    ds.domain_index = t;
    seq.domains.push_back(std::move(ds));
  }

  std::ifstream csv(csv_path, std::ios::binary);
  if (!csv) throw DataFormatError("cannot open " + csv_path.string());
  std::string line;
  std::getline(csv, line);
  std::string expected = "domain,y";
  for (std::size_t j = 1; j <= d; ++j) expected += ",x" + std::to_string(j);
  if (line != expected) throw DataFormatError("dataset csv: unexpected header '" + line + "'");
  std::size_t line_no = 1;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() != d + 2) throw DataFormatError("dataset csv: wrong column count on line " + std::to_string(line_no));
    const int t = static_cast<int>(parse_double(cells[0], line_no));
    if (t < 1 || t > n_domains) throw DataFormatError("dataset csv: domain out of range on line " + std::to_string(line_no));
    auto& ds = seq.domains[static_cast<std::size_t>(t - 1)];
    ds.labels.push_back(static_cast<int>(parse_double(cells[1], line_no)));
    for (std::size_t j = 0; j < d; ++j) ds.features.push_back(parse_double(cells[j + 2], line_no));
  }
  seq.validate();
  return seq;
}

}  // namespace airl
