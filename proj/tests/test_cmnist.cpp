#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "rex/cmnist.hpp"
#include "rex/loss.hpp"

using namespace rex;

namespace {

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> label_bytes(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> bytes = be32(2049);
  const auto n = be32(static_cast<std::uint32_t>(labels.size()));
  bytes.insert(bytes.end(), n.begin(), n.end());
  bytes.insert(bytes.end(), labels.begin(), labels.end());
  return bytes;
}

std::vector<std::uint8_t> image_bytes(std::uint32_t count, std::size_t payload) {
  std::vector<std::uint8_t> bytes = be32(2051);
  for (std::uint32_t d : {count, 28u, 28u}) {
    const auto enc = be32(d);
    bytes.insert(bytes.end(), enc.begin(), enc.end());
  }
  bytes.resize(bytes.size() + payload, 0x11);
  return bytes;
}

// Synthetic stand-in with random pixels; the color/label structure of the
// construction does not depend on image content.
MnistData synthetic_mnist(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  MnistData data;
  data.images.resize(n, 784);
  data.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < 784; ++j) data.images(i, j) = unit(rng);
    data.labels[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 10);
  }
  return data;
}

bool row_is_green(const EnvDataset& env, Index i) {
  return env.x.row(i).head(196).cwiseAbs().sum() == 0.0;
}

}  // namespace

TEST_CASE("parse_idx: label file with two entries") {
  std::vector<std::uint8_t> bytes = label_bytes({7, 3});
  const IdxFile f = parse_idx(bytes);
  CHECK(f.magic == 2049);
  REQUIRE(f.dims.size() == 1);
  CHECK(f.dims[0] == 2);
  REQUIRE(f.payload.size() == 2);
  CHECK(f.payload[0] == 7);
  CHECK(f.payload[1] == 3);
}

TEST_CASE("parse_idx: one 28x28 image") {
  const IdxFile f = parse_idx(image_bytes(1, 784));
  CHECK(f.magic == 2051);
  REQUIRE(f.dims.size() == 3);
  CHECK(f.dims[0] == 1);
  CHECK(f.payload.size() == 784);
}

TEST_CASE("parse_idx: truncated payload and bad magic are rejected") {
  CHECK_THROWS(parse_idx(image_bytes(1, 783)));
  CHECK_THROWS(parse_idx(image_bytes(1, 785)));
  std::vector<std::uint8_t> bad = be32(1234);
  bad.resize(16, 0);
  CHECK_THROWS(parse_idx(bad));
  CHECK_THROWS(parse_idx(std::vector<std::uint8_t>{0, 0, 8}));  // < 8 bytes
}

TEST_CASE("mean_pool_2x2: block averages") {
  Matrix img = Matrix::Zero(1, 784);
  img(0, 0) = 1.0;   // (0,0)
  img(0, 1) = 0.5;   // (0,1)
  img(0, 28) = 0.25; // (1,0)
  img(0, 29) = 0.25; // (1,1)
  const Matrix pooled = mean_pool_2x2(img);
  CHECK(pooled(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pooled.row(0).sum() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("make_cmnist_environment: e=0 makes color equal the label exactly") {
  MnistData data = synthetic_mnist(500, 1);
  EnvDataset env = make_cmnist_environment(data.images, data.labels, 0.0, 0.25, false, 3, "e");
  for (Index i = 0; i < env.rows(); ++i)
    CHECK(row_is_green(env, i) == (env.y(i, 0) == 1.0));
}

TEST_CASE("make_cmnist_environment: channel sum reproduces the pooled image") {
  MnistData data = synthetic_mnist(50, 2);
  EnvDataset env = make_cmnist_environment(data.images, data.labels, 0.3, 0.25, false, 5, "e");
  const Matrix pooled = mean_pool_2x2(data.images);
  for (Index i = 0; i < env.rows(); ++i) {
    const Matrix sum = env.x.row(i).head(196) + env.x.row(i).tail(196);
    CHECK((sum - pooled.row(i)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("build_cmnist: per-env class-color correlations match the spec") {
  MnistData data = synthetic_mnist(30000, 7);
  CmnistSpec spec;  // (0.2, 0.1, 0.9)
  const auto envs = build_cmnist(data, spec, 11);
  REQUIRE(envs.size() == 3);
  const std::vector<double> expect = {0.8, 0.9, 0.1};
  for (std::size_t e = 0; e < 3; ++e) {
    Index green = 0, green_and_one = 0;
    for (Index i = 0; i < envs[e].rows(); ++i) {
      if (row_is_green(envs[e], i)) {
        ++green;
        green_and_one += envs[e].y(i, 0) == 1.0;
      }
    }
    const double p = static_cast<double>(green_and_one) / static_cast<double>(green);
    CHECK(std::abs(p - expect[e]) < 0.02);
  }
}

TEST_CASE("build_cmnist: examples are partitioned without reuse") {
  MnistData data = synthetic_mnist(1200, 9);
  CmnistSpec spec;
  const auto envs = build_cmnist(data, spec, 1);
  Index total = 0;
  for (const auto& env : envs) total += env.rows();
  CHECK(total == 1200);
  // test pool = n/6 here (min rule), train split round-robin
  CHECK(envs[2].env_id == "test");
  CHECK(envs[0].rows() + envs[1].rows() == 1000);
}

TEST_CASE("build_cmnist: identical seeds give bit-identical environments") {
  MnistData data = synthetic_mnist(600, 13);
  CmnistSpec spec;
  const auto a = build_cmnist(data, spec, 77);
  const auto b = build_cmnist(data, spec, 77);
  for (std::size_t e = 0; e < a.size(); ++e) {
    CHECK(a[e].x == b[e].x);
    CHECK(a[e].y == b[e].y);
    CHECK(a[e].shape_labels == b[e].shape_labels);
  }
  const auto c = build_cmnist(data, spec, 78);
  CHECK(a[0].y != c[0].y);
}

TEST_CASE("build_cmnist: color-only decision rule hits 1-e per env") {
  MnistData data = synthetic_mnist(30000, 17);
  CmnistSpec spec;
  const auto envs = build_cmnist(data, spec, 19);
  const std::vector<double> expect = {0.8, 0.9, 0.1};
  double train_acc = 0.0;
  for (std::size_t e = 0; e < 3; ++e) {
    Index hits = 0;
    for (Index i = 0; i < envs[e].rows(); ++i)
      hits += (row_is_green(envs[e], i) ? 1.0 : 0.0) == envs[e].y(i, 0);
    const double acc = static_cast<double>(hits) / static_cast<double>(envs[e].rows());
    CHECK(std::abs(acc - expect[e]) < 0.02);
    if (e < 2) train_acc += acc / 2.0;
  }
  CHECK(std::abs(train_acc - 0.85) < 0.02);
}

TEST_CASE("grayscale control: both channels filled, color carries nothing") {
  MnistData data = synthetic_mnist(200, 23);
  CmnistSpec spec;
  spec.grayscale = true;
  const auto envs = build_cmnist(data, spec, 3);
  for (const auto& env : envs)
    for (Index i = 0; i < env.rows(); ++i) {
      CHECK(env.x.row(i).head(196) == env.x.row(i).tail(196));
    }
}

TEST_CASE("apply_variant: p=0.5 keeps groups balanced") {
  MnistData data = synthetic_mnist(12000, 29);
  CmnistSpec spec;
  auto envs = build_cmnist(data, spec, 31);
  const auto out = apply_variant(envs, CmnistVariant::ClassImbalance, 0.5, 37);
  for (std::size_t e = 0; e < 2; ++e) {
    Index low = 0;
    for (int d : out[e].shape_labels) low += d <= 4;
    const double frac = static_cast<double>(low) / static_cast<double>(out[e].rows());
    CHECK(std::abs(frac - 0.5) < 0.01);
  }
}

TEST_CASE("apply_variant: p=0 class imbalance gives disjoint digit supports") {
  MnistData data = synthetic_mnist(12000, 41);
  CmnistSpec spec;
  auto envs = build_cmnist(data, spec, 43);
  const auto out = apply_variant(envs, CmnistVariant::ClassImbalance, 0.0, 47);
  for (int d : out[0].shape_labels) CHECK(d >= 5);
  for (int d : out[1].shape_labels) CHECK(d <= 4);
  // Test env untouched.
  CHECK(out[2].rows() == envs[2].rows());
}

TEST_CASE("apply_variant: digit imbalance removes 0 and 5 everywhere") {
  MnistData data = synthetic_mnist(12000, 53);
  CmnistSpec spec;
  auto envs = build_cmnist(data, spec, 59);
  const auto out = apply_variant(envs, CmnistVariant::DigitImbalance, 0.3, 61);
  for (const auto& env : out)
    for (int d : env.shape_labels) {
      CHECK(d != 0);
      CHECK(d != 5);
    }
  // Group A = {1,2,6,7} carries mass 0.3 in env 1 and 0.7 in env 2.
  for (std::size_t e = 0; e < 2; ++e) {
    Index a = 0;
    for (int d : out[e].shape_labels) a += d == 1 || d == 2 || d == 6 || d == 7;
    const double frac = static_cast<double>(a) / static_cast<double>(out[e].rows());
    CHECK(std::abs(frac - (e == 0 ? 0.3 : 0.7)) < 0.01);
  }
}

TEST_CASE("apply_variant: p=0 color imbalance separates channel versions") {
  MnistData data = synthetic_mnist(6000, 67);
  CmnistSpec spec;
  auto envs = build_cmnist(data, spec, 71);
  const auto out = apply_variant(envs, CmnistVariant::ColorImbalance, 0.0, 73);
  REQUIRE(out[0].cols() == 784);
  // env 1: version 2 only (R2 = block 1, G2 = block 3).
  for (Index i = 0; i < out[0].rows(); ++i) {
    CHECK(out[0].x.row(i).segment(0, 196).cwiseAbs().sum() == 0.0);
    CHECK(out[0].x.row(i).segment(392, 196).cwiseAbs().sum() == 0.0);
  }
  // env 2: version 1 only (R1 = block 0, G1 = block 2).
  for (Index i = 0; i < out[1].rows(); ++i) {
    CHECK(out[1].x.row(i).segment(196, 196).cwiseAbs().sum() == 0.0);
    CHECK(out[1].x.row(i).segment(588, 196).cwiseAbs().sum() == 0.0);
  }
}

TEST_CASE("apply_variant: empty group after filtering is an error") {
  MnistData data = synthetic_mnist(600, 79);
  for (auto& l : data.labels) l = 1 + (l % 4);  // digits 1..4 only
  CmnistSpec spec;
  auto envs = build_cmnist(data, spec, 83);
  // p=0 drops group A entirely; env 2 wants only group A and has none... so
  // env 1 (p=0 -> keep only B=5..9, absent) must throw.
  CHECK_THROWS_AS(apply_variant(envs, CmnistVariant::ClassImbalance, 0.0, 89),
                  EmptyDomainError);
}

TEST_CASE("eval_color_grid: color-only rule tracks P(Y=0|red)") {
  MnistData data = synthetic_mnist(12000, 97);
  // Linear probe that reads only the color placement: positive mass on the
  // green block, negative on the red block.
  Predictor probe = Predictor::linear(392, 1);
  for (Index j = 0; j < 196; ++j) {
    probe.weights()[0](j, 0) = -1.0;
    probe.weights()[0](196 + j, 0) = 1.0;
  }
  CmnistSpec spec;
  const auto grid = eval_color_grid(probe, {0.0, 0.5, 1.0}, data, spec, 101);
  REQUIRE(grid.size() == 3);
  CHECK(grid[0].accuracy < 0.03);   // P(Y=0|red)=0: rule is exactly wrong
  CHECK(grid[2].accuracy > 0.97);   // P(Y=0|red)=1: rule is exactly right
  CHECK(std::abs(grid[1].accuracy - 0.5) < 0.03);
  for (const auto& pt : grid) CHECK(std::isfinite(pt.risk));
}

TEST_CASE("eval_color_grid: a color-blind probe is flat across the grid") {
  MnistData data = synthetic_mnist(12000, 103);
  // Reads the channel sum only: weights identical across color blocks.
  Predictor blind = Predictor::linear(392, 1);
  std::mt19937_64 rng(107);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Index j = 0; j < 196; ++j) {
    const double w = gauss(rng);
    blind.weights()[0](j, 0) = w;
    blind.weights()[0](196 + j, 0) = w;
  }
  CmnistSpec spec;
  const auto grid = eval_color_grid(blind, {0.0, 0.25, 0.5, 0.75, 1.0}, data, spec, 109);
  double lo = 1.0, hi = 0.0;
  for (const auto& pt : grid) {
    lo = std::min(lo, pt.accuracy);
    hi = std::max(hi, pt.accuracy);
  }
  CHECK(hi - lo < 0.02);
}

TEST_CASE("env cache: header + flat doubles round-trip bit-exactly") {
  MnistData data = synthetic_mnist(300, 113);
  CmnistSpec spec;
  const auto envs = build_cmnist(data, spec, 127);
  const std::string dir = (std::filesystem::temp_directory_path() / "rex_cache_test").string();
  save_env_cache(envs, dir);
  const auto loaded = load_env_cache(dir);
  REQUIRE(loaded.size() == envs.size());
  for (std::size_t e = 0; e < envs.size(); ++e) {
    CHECK(loaded[e].env_id == envs[e].env_id);
    CHECK(loaded[e].x == envs[e].x);
    CHECK(loaded[e].y == envs[e].y);
    CHECK(loaded[e].shape_labels == envs[e].shape_labels);
    CHECK(loaded[e].meta == envs[e].meta);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("canonical MNIST file table") {
  const auto files = canonical_mnist_files();
  CHECK(files[0].bytes == 47040016);
  CHECK(files[3].bytes == 10008);
  CHECK(verify_mnist_dir("/definitely/not/a/dir") != "");
}
