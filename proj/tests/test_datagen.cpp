#include "airl/datagen.hpp"
#include "helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

using namespace airl;

namespace {

constexpr double kPi = std::numbers::pi;

double det(const Matrix2& m) { return m[0][0] * m[1][1] - m[0][1] * m[1][0]; }

bool orthogonal(const Matrix2& m) {
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double dot = m[0][i] * m[0][j] + m[1][i] * m[1][j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-12) return false;
    }
  }
  return true;
}

std::array<double, 2> mean_of(const LabeledDataset& ds, int label = -1) {
  std::array<double, 2> m{0.0, 0.0};
  std::size_t count = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (label >= 0 && ds.labels[i] != label) continue;
    m[0] += ds.row(i)[0];
    m[1] += ds.row(i)[1];
    ++count;
  }
  m[0] /= static_cast<double>(count);
  m[1] /= static_cast<double>(count);
  return m;
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_fake_mnist(const std::filesystem::path& dir, int count) {
  std::ofstream img(dir / "train-images-idx3-ubyte", std::ios::binary);
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(count));
  write_be32(img, 28);
  write_be32(img, 28);
  std::mt19937_64 rng(3);
  for (int i = 0; i < count * 28 * 28; ++i) img.put(static_cast<char>(rng() % 256));
  std::ofstream lab(dir / "train-labels-idx1-ubyte", std::ios::binary);
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(count));
  for (int i = 0; i < count; ++i) lab.put(static_cast<char>(i % 10));
}

}  // namespace

TEST_CASE("circle defaults hold 30000 instances") {
  const DomainSequence seq = gen_circle(CircleParams{});
  CHECK(seq.domain_count() == 30);
  std::size_t total = 0;
  for (const auto& d : seq.domains) total += d.size();
  CHECK(total == 30000);
  CHECK(seq.mappings.size() == 29);
  seq.validate();
}

TEST_CASE("circle ground-truth map is the rotation by pi/30") {
  const DomainSequence seq = gen_circle(CircleParams{});
  const Matrix2& m = seq.mappings.front().matrix;
  CHECK(m[0][0] == doctest::Approx(std::cos(kPi / 30)).epsilon(1e-15));
  CHECK(m[0][1] == doctest::Approx(-std::sin(kPi / 30)).epsilon(1e-15));
  CHECK(m[1][0] == doctest::Approx(std::sin(kPi / 30)).epsilon(1e-15));
  CHECK(m[1][1] == doctest::Approx(std::cos(kPi / 30)).epsilon(1e-15));
  for (const auto& map : seq.mappings) {
    CHECK(orthogonal(map.matrix));
    CHECK(std::abs(det(map.matrix) - 1.0) < 1e-12);
  }
}

TEST_CASE("circle label rule puts the origin inside") {
  CircleParams p;
  p.domains = 2;
  p.per_domain = 500;
  const DomainSequence seq = gen_circle(p);
  for (const auto& d : seq.domains) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double r2 = d.row(i)[0] * d.row(i)[0] + d.row(i)[1] * d.row(i)[1];
      CHECK(d.labels[i] == (r2 <= 1.0 ? 1 : 0));
    }
  }
  // A point at the center satisfies the rule: 0 <= r^2.
  CHECK(0.0 * 0.0 + 0.0 * 0.0 <= p.radius * p.radius);
}

TEST_CASE("circle domain means follow the documented angles") {
  CircleParams p;
  p.per_domain = 4000;
  const DomainSequence seq = gen_circle(p);
  for (int t : {1, 8, 30}) {
    const auto m = mean_of(seq.domain(t));
    const double angle = kPi * (t - 1) / 30.0;
    const double tol = 4.0 * p.noise_sigma / std::sqrt(static_cast<double>(p.per_domain));
    CHECK(std::abs(m[0] - std::cos(angle)) < tol);
    CHECK(std::abs(m[1] - std::sin(angle)) < tol);
  }
}

TEST_CASE("circle positive rate stays balanced") {
  const DomainSequence seq = gen_circle(CircleParams{});
  for (const auto& d : seq.domains) {
    double pos = 0.0;
    for (int y : d.labels) pos += y;
    pos /= static_cast<double>(d.size());
    CHECK(pos >= 0.40);
    CHECK(pos <= 0.60);
  }
}

TEST_CASE("circle parameters are validated") {
  CircleParams p;
  p.radius = 0.0;
  CHECK_THROWS_AS(gen_circle(p), ParameterError);
  p.radius = 1.0;
  p.noise_sigma = -1.0;
  CHECK_THROWS_AS(gen_circle_hard(p), ParameterError);
}

TEST_CASE("circle-hard angle recurrence and maps") {
  CHECK(circle_hard_angle(1) == 0.0);
  CHECK(circle_hard_angle(2) == doctest::Approx(kPi / 180).epsilon(1e-15));
  CHECK(circle_hard_angle(4) == doctest::Approx(kPi / 30).epsilon(1e-14));
  const DomainSequence seq = gen_circle_hard(CircleParams{});
  const Matrix2 m3 = seq.mappings.at(2).matrix;
  CHECK(m3[0][0] == doctest::Approx(std::cos(kPi * 3 / 180)).epsilon(1e-15));
  CHECK(m3[1][0] == doctest::Approx(std::sin(kPi * 3 / 180)).epsilon(1e-15));
  for (const auto& map : seq.mappings) {
    CHECK(orthogonal(map.matrix));
    CHECK(std::abs(det(map.matrix) - 1.0) < 1e-12);
  }
}

TEST_CASE("pushing a domain through its map matches the next domain") {
  for (bool hard : {false, true}) {
    CircleParams p;
    p.per_domain = 4000;
    const DomainSequence seq = hard ? gen_circle_hard(p) : gen_circle(p);
    for (int t : {1, 5, 20}) {
      const LabeledDataset pushed = apply_ground_truth_map(seq.domain(t), seq.mappings[static_cast<std::size_t>(t - 1)]);
      CHECK(pushed.labels == seq.domain(t).labels);
      const auto a = mean_of(pushed);
      const auto b = mean_of(seq.domain(t + 1));
      // Difference of two independent sample means: sd sigma * sqrt(2/n).
      const double tol3 = 3.0 * p.noise_sigma * std::sqrt(2.0 / p.per_domain);
      CAPTURE(hard);
      CAPTURE(t);
      CHECK(std::abs(a[0] - b[0]) < tol3);
      CHECK(std::abs(a[1] - b[1]) < tol3);
      for (int y : {0, 1}) {
        const auto ay = mean_of(pushed, y);
        const auto by = mean_of(seq.domain(t + 1), y);
        CHECK(std::abs(ay[0] - by[0]) < 4.0 * p.noise_sigma * std::sqrt(2.0 / 1000.0));
        CHECK(std::abs(ay[1] - by[1]) < 4.0 * p.noise_sigma * std::sqrt(2.0 / 1000.0));
      }
    }
  }
}

TEST_CASE("apply_ground_truth_map basics") {
  LabeledDataset ds;
  ds.feature_dim = 2;
  ds.features = {1.0, 0.0, 0.3, -0.7};
  ds.labels = {1, 0};
  const LabeledDataset r = apply_ground_truth_map(ds, GroundTruthMap::rotation(kPi / 2));
  CHECK(r.features[0] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.features[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.labels == ds.labels);
  GroundTruthMap identity;
  identity.matrix = {{{1.0, 0.0}, {0.0, 1.0}}};
  CHECK(apply_ground_truth_map(ds, identity) == ds);
  LabeledDataset wide;
  wide.feature_dim = 3;
  wide.features = {1, 2, 3};
  wide.labels = {0};
  CHECK_THROWS(apply_ground_truth_map(wide, identity));
}

TEST_CASE("rotating gaussian generator") {
  RotatingGaussianSpec spec;
  spec.class_priors = {0.5, 0.5};
  spec.means = {{{1.0, 0.0}}, {{-1.0, 0.0}}};
  spec.covariances = {Matrix2{{{0.04, 0.0}, {0.0, 0.04}}}, Matrix2{{{0.04, 0.0}, {0.0, 0.04}}}};

  SUBCASE("zero step keeps every domain identically distributed") {
    const DomainSequence seq = gen_rotating_gaussian(spec, [](int) { return 0.0; }, 4, 3000, 1);
    const auto m1 = mean_of(seq.domain(1), 0);
    const auto m4 = mean_of(seq.domain(4), 0);
    CHECK(std::abs(m1[0] - m4[0]) < 4.0 * 0.2 * std::sqrt(2.0 / 1500.0));
    CHECK(std::abs(m1[1] - m4[1]) < 4.0 * 0.2 * std::sqrt(2.0 / 1500.0));
    for (const auto& m : seq.mappings) CHECK(m.matrix[0][0] == 1.0);
  }
  SUBCASE("rotation by pi/30 reproduces the circle mean path") {
    const DomainSequence seq = gen_rotating_gaussian(spec, [](int) { return kPi / 30; }, 30, 3000, 2);
    for (int t : {1, 11, 30}) {
      const auto m = mean_of(seq.domain(t), 0);
      const double angle = kPi * (t - 1) / 30.0;
      const double tol = 4.0 * 0.2 / std::sqrt(1000.0);
      CHECK(std::abs(m[0] - std::cos(angle)) < tol);
      CHECK(std::abs(m[1] - std::sin(angle)) < tol);
    }
  }
  SUBCASE("one domain has no mappings") {
    const DomainSequence seq = gen_rotating_gaussian(spec, [](int) { return 1.0; }, 1, 10, 3);
    CHECK(seq.mappings.empty());
  }
  SUBCASE("singular covariance is rejected") {
    spec.covariances[1] = Matrix2{{{1.0, 1.0}, {1.0, 1.0}}};
    CHECK_THROWS_AS(gen_rotating_gaussian(spec, [](int) { return 0.0; }, 2, 10, 3), ParameterError);
  }
}

TEST_CASE("split sizes, determinism and coverage") {
  const SplitIndices s = split_indices(1000, SplitSpec{}, 5);
  CHECK(s.train.size() == 810);
  CHECK(s.val.size() == 90);
  CHECK(s.idtest.size() == 100);
  const SplitIndices again = split_indices(1000, SplitSpec{}, 5);
  CHECK(s.train == again.train);
  CHECK(s.val == again.val);
  CHECK(s.idtest == again.idtest);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.idtest.begin(), s.idtest.end());
  CHECK(all.size() == 1000);
  CHECK(*all.rbegin() == 999);
  CHECK(split_indices(1000, SplitSpec{}, 6).train != s.train);
  CHECK_THROWS_AS(split_indices(5, SplitSpec{}, 1), ParameterError);
  CHECK_THROWS_AS(split_indices(1000, SplitSpec{0.5, 0.5, 0.5}, 1), ParameterError);
}

TEST_CASE("split datasets hold the selected rows") {
  CircleParams p;
  p.domains = 2;
  p.per_domain = 100;
  const DomainSequence seq = gen_circle(p);
  const SplitResult r = split(seq.domain(2), SplitSpec{}, 3);
  CHECK(r.train.size() + r.val.size() + r.idtest.size() == 100);
  CHECK(r.val.domain_index == 2);
  const SplitIndices idx = split_indices(100, SplitSpec{}, 3);
  CHECK(r.val == seq.domain(2).subset(idx.val));
}

TEST_CASE("generators are deterministic by seed") {
  CircleParams p;
  p.domains = 4;
  p.per_domain = 50;
  CHECK(gen_circle(p) == gen_circle(p));
  CircleParams q = p;
  q.seed = 1;
  CHECK_FALSE(gen_circle(p) == gen_circle(q));
}

TEST_CASE("sequence files round trip bit-exactly") {
  airl::test::TempDir dir("seq");
  CircleParams p;
  p.domains = 5;
  p.per_domain = 40;
  p.seed = 9;
  DomainSequence seq = gen_circle_hard(p);
  seq.source_count = 3;
  const auto path = dir.path() / "hard.csv";
  write_sequence(seq, path);
  CHECK(std::filesystem::exists(sidecar_path(path)));
  const DomainSequence back = read_sequence(path);
  CHECK(back == seq);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "domain,y,x1,x2");
}

TEST_CASE("reading a malformed file fails") {
  airl::test::TempDir dir("bad");
  const auto path = dir.path() / "bad.csv";
  CHECK_THROWS_AS(read_sequence(path), DataFormatError);
  CircleParams p;
  p.domains = 2;
  p.per_domain = 5;
  write_sequence(gen_circle(p), path);
  {
    std::ofstream out(path, std::ios::app);
    out << "1,0,not-a-number,2\n";
  }
  CHECK_THROWS_AS(read_sequence(path), DataFormatError);
}

TEST_CASE("prefix keeps the first domains") {
  CircleParams p;
  p.domains = 6;
  p.per_domain = 10;
  const DomainSequence seq = gen_circle(p);
  const DomainSequence pre = seq.prefix(4, 3);
  CHECK(pre.domain_count() == 4);
  CHECK(pre.source_count == 3);
  CHECK(pre.mappings.size() == 3);
  CHECK(pre.domain(4) == seq.domain(4));
  CHECK_THROWS_AS(seq.prefix(7, 3), ParameterError);
}

TEST_CASE("image helpers") {
  std::vector<double> img(28 * 28);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 17) / 16.0;
  CHECK(rotate_image(img, 28, 0.0) == img);
  const auto quarter = rotate_image(rotate_image(rotate_image(rotate_image(img, 28, 90.0), 28, 90.0), 28, 90.0), 28, 90.0);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(quarter[i] == doctest::Approx(img[i]).epsilon(1e-9));
  const auto small = downsample_image(img, 28, 7);
  CHECK(small.size() == 49);
  double block = 0.0;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) block += img[static_cast<std::size_t>(r * 28 + c)];
  }
  CHECK(small[0] == doctest::Approx(block / 16.0));
}

TEST_CASE("rotated digit loader on a synthetic archive") {
  airl::test::TempDir dir("idx");
  write_fake_mnist(dir.path(), 60);
  RmnistParams p;
  p.per_domain = 50;
  const DomainSequence seq = load_rmnist_lite(dir.path(), p);
  CHECK(seq.domain_count() == 30);
  CHECK(seq.feature_dim() == 49);
  CHECK(seq.n_classes == 10);
  const auto& angles = seq.params.at("angles_deg");
  CHECK(angles.front().get<double>() == 0.0);
  CHECK(angles.back().get<double>() == doctest::Approx(174.0));
  seq.validate();
  CHECK_THROWS_AS(load_rmnist_lite(dir.path() / "missing", p), DataFormatError);
  p.per_domain = 1000;
  CHECK_THROWS_AS(load_rmnist_lite(dir.path(), p), ParameterError);
}
