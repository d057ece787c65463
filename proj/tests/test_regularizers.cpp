#include <gtest/gtest.h>

#include "coredi/projection.hpp"
#include "coredi/regularizers.hpp"
#include "oracle.hpp"

using namespace coredi;

namespace {

Tensor tokens(std::size_t B, std::size_t L, std::size_t d, std::vector<double> v) {
  return Tensor::constant({B, L, d}, std::move(v));
}

TEST(Lvar, HandValues) {
  // Constant token: channel std 0 -> hinge gives gamma.
  EXPECT_NEAR(l_var(tokens(1, 1, 4, {3.0, 3.0, 3.0, 3.0}), 1.0, 0.0).item(), 1.0, 1e-12);
  EXPECT_NEAR(l_var(tokens(1, 1, 2, {0.0, 2.0}), 1.0, 0.0).item(), 0.0, 1e-12);
  EXPECT_NEAR(l_var(tokens(1, 1, 2, {0.0, 1.0}), 1.0, 0.0).item(), 0.5, 1e-12);
  // Mean over tokens.
  EXPECT_NEAR(l_var(tokens(1, 2, 2, {0.0, 1.0, 0.0, 2.0}), 1.0, 0.0).item(), 0.25, 1e-12);
  EXPECT_NEAR(l_var(tokens(1, 1, 2, {-3.0, 3.0}), 1.0, 0.0).item(), 0.0, 1e-12);
}

TEST(Lvar, RequiresTwoChannels) {
  EXPECT_THROW(l_var(Tensor::zeros({1, 2, 1}), 1.0, 1e-5), NumericError);
}

TEST(Lorth, HandValues) {
  const Tensor q = random_orthonormal(16, 4, 0);
  EXPECT_NEAR(l_orth(q).item(), 0.0, 1e-12);
  EXPECT_NEAR(l_orth(scale(q, 2.0)).item(), 9.0 * 4, 1e-10);
  // Duplicated unit column: W^T W = [[1,1],[1,1]] -> off-diagonals contribute 2.
  const Tensor dup = Tensor::constant({3, 2}, {1.0, 1.0, 0.0, 0.0, 0.0, 0.0});
  EXPECT_NEAR(l_orth(dup).item(), 2.0, 1e-12);
}

TEST(Lcov, HandValues) {
  // d = 2, channel 2 duplicates channel 1 -> correlation 1 -> (1/2)(1+1) = 1.
  std::vector<double> v;
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const double a = rng.normal();
    v.insert(v.end(), {a, a});
  }
  EXPECT_NEAR(l_cov(tokens(2, 5, 2, v)).item(), 1.0, 1e-10);
  // Anti-correlated duplicate gives the same value.
  for (std::size_t i = 1; i < v.size(); i += 2) v[i] = -v[i];
  EXPECT_NEAR(l_cov(tokens(2, 5, 2, v)).item(), 1.0, 1e-10);
  // Exactly decorrelated channels.
  const Tensor decor = tokens(1, 4, 2, {1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0});
  EXPECT_NEAR(l_cov(decor).item(), 0.0, 1e-14);
}

TEST(Lcov, RawCovarianceToggle) {
  // Channel 2 = 2 * channel 1, population variance of channel 1 = 1.
  const Tensor z = tokens(1, 2, 2, {1.0, 2.0, -1.0, -2.0});
  // Cov = [[1, 2], [2, 4]] -> (1/2)(4 + 4) = 4.
  EXPECT_NEAR(l_cov(z, CovNorm::kRaw).item(), 4.0, 1e-12);
  EXPECT_NEAR(l_cov(z, CovNorm::kCorrelation).item(), 1.0, 1e-12);
}

TEST(Lcov, Errors) { EXPECT_THROW(l_cov(Tensor::zeros({1, 1, 3})), NumericError); }

TEST(Regularizers, NonNegativeOnRandomInputs) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = oracle::random_const({2, 4, 4}, rng, 0.1 + 3.0 * rng.uniform());
    const Tensor w = oracle::random_const({8, 4}, rng, rng.uniform());
    EXPECT_GE(l_var(z, 1.0, 1e-5).item(), 0.0);
    EXPECT_GE(l_cov(z).item(), 0.0);
    EXPECT_GE(l_orth(w).item(), 0.0);
  }
}

TEST(Regularizers, Symmetries) {
  Rng rng(3);
  const Tensor z = oracle::random_const({2, 3, 4}, rng);
  // Channel permutation (reverse) leaves l_cov unchanged.
  std::vector<double> perm(z.size());
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t k = 0; k < 4; ++k) perm[r * 4 + k] = z[r * 4 + (3 - k)];
  EXPECT_NEAR(l_cov(Tensor::constant(z.shape(), perm)).item(), l_cov(z).item(), 1e-12);
  // Token permutation (reverse) leaves l_var unchanged.
  std::vector<double> tok(z.size());
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t k = 0; k < 4; ++k) tok[r * 4 + k] = z[(5 - r) * 4 + k];
  EXPECT_NEAR(l_var(Tensor::constant(z.shape(), tok), 1.0, 1e-5).item(), l_var(z, 1.0, 1e-5).item(), 1e-12);
}

TEST(Regularizers, OrthIgnoresBatch) {
  Rng rng(4);
  const Tensor w = oracle::random_const({8, 3}, rng);
  RegConfig rc;
  rc.kind = RegKind::kOrthogonality;
  EXPECT_EQ(regularize(rc, oracle::random_const({2, 2, 3}, rng), w).item(),
            regularize(rc, oracle::random_const({2, 2, 3}, rng), w).item());
}

TEST(Regularizers, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Tensor z0 = oracle::random_const({2, 4, 16}, rng);
    const Tensor w = oracle::random_param({16, 4}, rng, 0.5);
    for (RegKind kind : {RegKind::kVariance, RegKind::kCovariance, RegKind::kOrthogonality}) {
      auto f = [&](const std::vector<Tensor>& in) {
        ProjectionState s = init_projection(16, 4, 0);
        s.weight = in[0];
        RegConfig rc;
        rc.kind = kind;
        rc.gamma = 1.5;  // keeps the hinge active on most tokens
        return regularize(rc, project(s, z0, true), in[0]);
      };
      EXPECT_LT(oracle::max_gradient_error(f, {w}), 1e-4) << enum_name(kind) << " seed " << seed;
    }
  }
}

TEST(Regularizers, NoneIsExactZeroWithoutGradient) {
  Rng rng(5);
  const Tensor w = oracle::random_param({8, 2}, rng);
  ProjectionState s = init_projection(8, 2, 0);
  s.weight = w;
  RegConfig rc;
  rc.kind = RegKind::kNone;
  const Tensor r = regularize(rc, project(s, oracle::random_const({2, 2, 8}, rng), true), w);
  EXPECT_EQ(r.item(), 0.0);
  EXPECT_FALSE(r.requires_grad());
  EXPECT_FALSE(backward(r).reached(w));
}

TEST(Regularizers, DispatchMatchesDirectCalls) {
  Rng rng(6);
  const Tensor z = oracle::random_const({2, 3, 4}, rng);
  const Tensor w = oracle::random_const({6, 4}, rng);
  RegConfig rc;
  rc.gamma = 1.2;
  rc.eps = 1e-4;
  rc.kind = RegKind::kVariance;
  EXPECT_EQ(regularize(rc, z, w).item(), l_var(z, 1.2, 1e-4).item());
  rc.kind = RegKind::kOrthogonality;
  EXPECT_EQ(regularize(rc, z, w).item(), l_orth(w).item());
  rc.kind = RegKind::kCovariance;
  EXPECT_EQ(regularize(rc, z, w).item(), l_cov(z, CovNorm::kCorrelation, 1e-4).item());
}

}  // namespace
