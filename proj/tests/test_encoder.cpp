#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "coredi/encoder.hpp"
#include "oracle.hpp"

using namespace coredi;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.dataset_size = 64;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("coredi_test_" + name)).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Dataset, DeterministicBytes) {
  const auto c = small_config();
  const std::string a = temp_path("a.crds"), b = temp_path("b.crds");
  write_dataset(make_dataset(c, 3), a);
  write_dataset(make_dataset(c, 3), b);
  EXPECT_EQ(file_bytes(a), file_bytes(b));
  write_dataset(make_dataset(c, 4), b);
  EXPECT_NE(file_bytes(a), file_bytes(b));
}

TEST(Dataset, RoundTrip) {
  auto c = small_config();
  c.mode = Mode::kPixel;
  const Dataset ds = make_dataset(c, 1);
  const std::string path = temp_path("rt.crds");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  ASSERT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.image_scale, 2u);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, ds.samples[i].label);
    EXPECT_EQ(back.samples[i].x0.values(), ds.samples[i].x0.values());
    EXPECT_EQ(back.samples[i].z0.values(), ds.samples[i].z0.values());
    EXPECT_EQ(back.samples[i].x0.shape(), ds.samples[i].x0.shape());
  }
}

TEST(Dataset, CorruptFilesAreIoErrors) {
  const std::string path = temp_path("bad.crds");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  EXPECT_THROW(read_dataset(path), IoError);
  write_dataset(make_dataset(small_config(), 0), path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(read_dataset(path), IoError);
  EXPECT_THROW(read_dataset(temp_path("does_not_exist.crds")), IoError);
}

TEST(Dataset, StoredFeaturesAreEncodedImages) {
  const auto c = small_config();
  const Dataset ds = make_dataset(c, 2);
  const FrozenEncoder enc = dataset_encoder(c, 2);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(enc.encode(ds.samples[i].x0).values(), ds.samples[i].z0.values());
}

TEST(Dataset, PixelModeEncodesPooledImage) {
  auto c = small_config();
  c.mode = Mode::kPixel;
  const Dataset ds = make_dataset(c, 2);
  const FrozenEncoder enc = dataset_encoder(c, 2);
  const auto& s = ds.samples[0];
  ASSERT_EQ(s.x0.dim(0), 4 * c.tokens);
  // Brute-force 2x2 average of the fine grid.
  const std::size_t side = c.grid_side(), C = c.image_channels;
  std::vector<double> pooled(c.tokens * C, 0.0);
  for (std::size_t r = 0; r < 2 * side; ++r)
    for (std::size_t col = 0; col < 2 * side; ++col)
      for (std::size_t ch = 0; ch < C; ++ch)
        pooled[((r / 2) * side + col / 2) * C + ch] += 0.25 * s.x0[(r * 2 * side + col) * C + ch];
  const Tensor z = enc.encode(Tensor::constant({c.tokens, C}, pooled));
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z[i], s.z0[i], 1e-12);
}

TEST(Dataset, ClassMeansDiffer) {
  auto c = small_config();
  c.dataset_size = 400;
  const Dataset ds = make_dataset(c, 0);
  const std::size_t n = ds.samples[0].x0.size();
  std::vector<std::vector<double>> mean(c.classes, std::vector<double>(n, 0.0));
  std::vector<double> count(c.classes, 0.0);
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < n; ++i) mean[s.label][i] += s.x0[i];
    count[s.label] += 1.0;
  }
  for (std::size_t k = 0; k < c.classes; ++k) {
    ASSERT_GT(count[k], 0.0);
    for (double& v : mean[k]) v /= count[k];
  }
  for (std::size_t a = 0; a < c.classes; ++a)
    for (std::size_t b = a + 1; b < c.classes; ++b) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < n; ++i) d2 += (mean[a][i] - mean[b][i]) * (mean[a][i] - mean[b][i]);
      EXPECT_GT(std::sqrt(d2), 1.0);
    }
}

TEST(Dataset, ConfigErrors) {
  auto c = small_config();
  c.classes = 0;
  EXPECT_THROW(make_dataset(c, 0), ConfigError);
  c = small_config();
  c.tokens = 15;
  EXPECT_THROW(make_dataset(c, 0), ConfigError);
}

TEST(Encoder, ZeroInputGivesIdenticalBiasRows) {
  const FrozenEncoder enc(4, 16, 9);
  const Tensor z = enc.encode(Tensor::zeros({6, 4}));
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(z[t * 16 + j], z[j]);
      EXPECT_DOUBLE_EQ(z[j], std::tanh(enc.bias()[j]));
    }
}

TEST(Encoder, Frozen) {
  const FrozenEncoder enc(4, 8, 1);
  EXPECT_FALSE(enc.weight().requires_grad());
  EXPECT_FALSE(enc.bias().requires_grad());
  Rng rng(1);
  const Tensor x = oracle::random_param({3, 4}, rng);
  const Tensor z = enc.encode(x);
  EXPECT_FALSE(z.requires_grad());
}

TEST(Encoder, ShapeMismatch) {
  const FrozenEncoder enc(4, 8, 1);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 5})), DimensionError);
}

TEST(Encoder, LipschitzBoundMatchesPowerIteration) {
  const FrozenEncoder enc(4, 64, 5);
  const auto& w = enc.weight();
  // Power iteration on W W^T (4x4).
  std::vector<double> v{1.0, 0.5, -0.3, 0.2};
  double lambda = 0.0;
  for (int it = 0; it < 500; ++it) {
    std::vector<double> u(64, 0.0), next(4, 0.0);
    for (std::size_t j = 0; j < 64; ++j)
      for (std::size_t i = 0; i < 4; ++i) u[j] += v[i] * w[i * 64 + j];
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 64; ++j) next[i] += w[i * 64 + j] * u[j];
    double n = 0.0;
    for (double x : next) n += x * x;
    n = std::sqrt(n);
    lambda = n;
    for (std::size_t i = 0; i < 4; ++i) v[i] = next[i] / n;
  }
  EXPECT_NEAR(enc.lipschitz_bound(), std::sqrt(lambda), 1e-9);

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = oracle::random_const({1, 4}, rng, 2.0);
    const Tensor d = oracle::random_const({1, 4}, rng, 0.1);
    const Tensor a = enc.encode(x), b = enc.encode(add(x, d));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
    for (double e : d.values()) den += e * e;
    EXPECT_LE(std::sqrt(num), enc.lipschitz_bound() * std::sqrt(den) + 1e-12);
  }
}

TEST(Pca, MatchesPowerIterationWithDeflation) {
  Rng rng(4);
  // Anisotropic Gaussian cloud in 6 dims.
  const double scales[6] = {3.0, 2.0, 1.5, 1.0, 0.5, 0.25};
  std::vector<Tensor> feats;
  for (int n = 0; n < 200; ++n) {
    std::vector<double> v(6);
    for (int j = 0; j < 6; ++j) v[j] = scales[j] * rng.normal() + 0.1 * j;
    feats.push_back(Tensor::constant({1, 6}, v));
  }
  const PcaProjection pca = fit_pca(feats, 3);

  // Oracle covariance and power iteration.
  std::vector<double> mu(6, 0.0);
  for (const auto& f : feats)
    for (int j = 0; j < 6; ++j) mu[j] += f[j] / 200.0;
  std::vector<std::vector<double>> cov(6, std::vector<double>(6, 0.0));
  for (const auto& f : feats)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) cov[i][j] += (f[i] - mu[i]) * (f[j] - mu[j]) / 200.0;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> v(6, 1.0);
    double lambda = 0.0;
    for (int it = 0; it < 3000; ++it) {
      std::vector<double> next(6, 0.0);
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) next[i] += cov[i][j] * v[j];
      double n = 0.0;
      for (double x : next) n += x * x;
      n = std::sqrt(n);
      lambda = n;
      for (int i = 0; i < 6; ++i) v[i] = next[i] / n;
    }
    EXPECT_NEAR(pca.eigenvalues[k], lambda, 1e-8 * lambda);
    double dot = 0.0;
    for (int j = 0; j < 6; ++j) dot += v[j] * pca.components[j * 3 + k];
    EXPECT_NEAR(std::abs(dot), 1.0, 1e-8);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) cov[i][j] -= lambda * v[i] * v[j];
  }
}

TEST(Pca, OrthonormalComponentsAndSignConvention) {
  const auto c = small_config();
  const Dataset ds = make_dataset(c, 0);
  std::vector<Tensor> feats;
  for (const auto& s : ds.samples) feats.push_back(s.z0);
  const PcaProjection pca = fit_pca(feats, 8);
  const auto& p = pca.components;
  for (std::size_t a = 0; a < 8; ++a) {
    double biggest = 0.0;
    for (std::size_t j = 0; j < 64; ++j)
      if (std::abs(p[j * 8 + a]) > std::abs(biggest)) biggest = p[j * 8 + a];
    EXPECT_GT(biggest, 0.0);
    for (std::size_t b = 0; b < 8; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 64; ++j) dot += p[j * 8 + a] * p[j * 8 + b];
      EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-10);
    }
  }
  for (std::size_t k = 1; k < 8; ++k) EXPECT_GE(pca.eigenvalues[k - 1], pca.eigenvalues[k]);
}

TEST(Pca, AppliesCenteredProjection) {
  Rng rng(2);
  std::vector<Tensor> feats;
  for (int n = 0; n < 30; ++n) feats.push_back(oracle::random_const({2, 5}, rng));
  const PcaProjection pca = fit_pca(feats, 2);
  const Tensor y = pca.apply(feats[0]);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t k = 0; k < 2; ++k) {
      double ref = 0.0;
      for (std::size_t j = 0; j < 5; ++j) ref += (feats[0][t * 5 + j] - pca.mean[j]) * pca.components[j * 2 + k];
      EXPECT_NEAR(y[t * 2 + k], ref, 1e-12);
    }
}

TEST(Pca, Errors) {
  std::vector<Tensor> rank_one;
  for (int n = 0; n < 10; ++n) rank_one.push_back(Tensor::constant({1, 3}, {double(n), 2.0 * n, -1.0 * n}));
  EXPECT_THROW(fit_pca(rank_one, 2), NumericError);
  EXPECT_THROW(fit_pca(rank_one, 4), ConfigError);
  EXPECT_THROW(fit_pca({Tensor::constant({1, 3}, {1.0, 2.0, 3.0})}, 2), ContractError);
}

}  // namespace
