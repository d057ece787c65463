#pragma once

// Spatial self-similarity metrics on square token grids (LDS, CDS, RMSC),
// channel-collapse diagnostics, and a Gaussian Frechet distance between two
// sets of feature vectors.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "coredi/autodiff.hpp"
#include "coredi/errors.hpp"

namespace coredi {

inline constexpr double kCosineNormFloor = 1e-8;

struct TokenGrid {
  Tensor features;  // [L, d]
  std::size_t side = 0;

  TokenGrid(Tensor f) : features(std::move(f)) {
    if (features.rank() != 2) throw DimensionError("TokenGrid expects [L, d], got " + to_string(features.shape()));
    side = static_cast<std::size_t>(std::lround(std::sqrt(double(features.dim(0)))));
    if (side * side != features.dim(0)) throw ConfigError("TokenGrid: token count is not a perfect square");
  }

  std::size_t tokens() const { return features.dim(0); }
  std::size_t channels() const { return features.dim(1); }
  std::size_t distance(std::size_t a, std::size_t b) const {
    const auto ra = static_cast<long>(a / side), ca = static_cast<long>(a % side);
    const auto rb = static_cast<long>(b / side), cb = static_cast<long>(b % side);
    return static_cast<std::size_t>(std::labs(ra - rb) + std::labs(ca - cb));
  }
};

struct MetricReport {
  double lds = 0.0;
  double cds = 0.0;
  double rmsc = 0.0;
  double offdiag_cov_mass = 0.0;
  double effective_rank = 1.0;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline RowMatrix as_matrix(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  return Eigen::Map<const RowMatrix>(t.values().data() + offset, static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(cols));
}

// Sum and count of pairwise cosine similarities per Manhattan distance,
// over ordered pairs t != t'.
struct Correlogram {
  std::map<std::size_t, std::pair<double, std::size_t>> bins;

  double mean_where(auto pred) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& [delta, bin] : bins) {
      if (pred(delta)) {
        s += bin.first;
        n += bin.second;
      }
    }
    if (n == 0) throw ConfigError("distance class is empty on this grid");
    return s / static_cast<double>(n);
  }
};

inline Correlogram correlogram(const TokenGrid& grid) {
  RowMatrix x = as_matrix(grid.features, grid.tokens(), grid.channels());
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) /= std::max(x.row(i).norm(), kCosineNormFloor);
  const RowMatrix k = x * x.transpose();
  Correlogram out;
  for (std::size_t a = 0; a < grid.tokens(); ++a) {
    for (std::size_t b = 0; b < grid.tokens(); ++b) {
      if (a == b) continue;
      auto& bin = out.bins[grid.distance(a, b)];
      bin.first += k(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      ++bin.second;
    }
  }
  return out;
}

}  // namespace detail

/// E[K | d < r_near] - E[K | d >= r_far], K the cosine similarity, d the
/// Manhattan distance, self-pairs excluded.
inline double lds(const TokenGrid& grid, std::size_t r_near, std::size_t r_far) {
  if (r_near > r_far) throw ConfigError("lds: r_near must be <= r_far");
  const auto g = detail::correlogram(grid);
  return g.mean_where([&](std::size_t d) { return d < r_near; }) -
         g.mean_where([&](std::size_t d) { return d >= r_far; });
}

/// -slope of the unweighted least-squares line through (delta, g(delta)).
inline double cds_from_correlogram(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 2) throw NumericError("cds: need at least 2 distinct distances for a slope");
  double mx = 0.0, my = 0.0;
  for (const auto& [x, y] : points) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(points.size());
  my /= static_cast<double>(points.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& [x, y] : points) {
    sxy += (x - mx) * (y - my);
    sxx += (x - mx) * (x - mx);
  }
  if (sxx == 0.0) throw NumericError("cds: distances do not vary");
  return -sxy / sxx;
}

inline double cds(const TokenGrid& grid) {
  const auto g = detail::correlogram(grid);
  std::vector<std::pair<double, double>> points;
  for (const auto& [delta, bin] : g.bins) points.emplace_back(static_cast<double>(delta), bin.first / double(bin.second));
  return cds_from_correlogram(points);
}

/// sqrt(mean_t ||x_hat_t - mean(x_hat)||^2) over unit-normalized tokens of
/// [L, d]. A zero-norm token is an error unless `guard` floors norms at 1e-8.
inline double rmsc(const Tensor& features, bool guard = false) {
  if (features.rank() != 2) throw DimensionError("rmsc expects [L, d], got " + to_string(features.shape()));
  detail::RowMatrix x = detail::as_matrix(features, features.dim(0), features.dim(1));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n == 0.0 && !guard) throw NumericError("rmsc: zero-norm token " + std::to_string(i));
    x.row(i) /= std::max(n, kCosineNormFloor);
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  return std::sqrt((x.rowwise() - mu).rowwise().squaredNorm().mean());
}

inline double rmsc(const TokenGrid& grid, bool guard = false) { return rmsc(grid.features, guard); }

/// Channel covariance of pooled token vectors [N, d] (population).
inline Eigen::MatrixXd pooled_covariance(const Tensor& batch) {
  const std::size_t d = batch.shape().back();
  const std::size_t n = batch.size() / d;
  if (n < 2) throw NumericError("covariance needs at least 2 vectors");
  detail::RowMatrix x = detail::as_matrix(batch, n, d);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  return (x.transpose() * x) / static_cast<double>(n);
}

/// exp(entropy of normalized covariance eigenvalues), in [1, d].
inline double effective_rank(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0);
  const double total = lam.sum();
  if (!(total > 0.0)) return 1.0;
  double h = 0.0;
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    const double p = lam(i) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(std::exp(h), 1.0, static_cast<double>(lam.size()));
}

/// (1/d) sum_{i != j} C_ij^2 with C the channel correlation matrix
/// (variances floored at `eps`).
inline double offdiag_cov_mass(const Eigen::MatrixXd& cov, double eps = 1e-5) {
  const Eigen::Index d = cov.rows();
  double s = 0.0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      if (i != j) {
        const double c = cov(i, j) / std::sqrt(std::max(cov(i, i), eps) * std::max(cov(j, j), eps));
        s += c * c;
      }
  return s / static_cast<double>(d);
}

struct CollapseDiagnostics {
  double offdiag_cov_mass;
  double effective_rank;
};

inline CollapseDiagnostics collapse_diagnostics(const Tensor& batch) {
  const Eigen::MatrixXd cov = pooled_covariance(batch);
  return {offdiag_cov_mass(cov), effective_rank(cov)};
}

/// Symmetric PSD square root via eigendecomposition.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
inline double frechet_from_stats(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                                 const Eigen::MatrixXd& cov_b) {
  if (mu_a.size() != mu_b.size() || cov_a.rows() != cov_b.rows()) throw DimensionError("frechet: dimension mismatch");
  const Eigen::MatrixXd root_a = psd_sqrt(cov_a);
  const Eigen::MatrixXd inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(value, 0.0);
}

/// Frechet distance between Gaussians fitted (unbiased covariance) to two
/// sets of row vectors [N, k] and [M, k].
inline double frechet_gaussian(const Tensor& a, const Tensor& b) {
  auto stats = [](const Tensor& t) {
    if (t.rank() != 2 || t.dim(0) < 2) throw DimensionError("frechet: expects [N >= 2, k], got " + to_string(t.shape()));
    detail::RowMatrix x = detail::as_matrix(t, t.dim(0), t.dim(1));
    const Eigen::VectorXd mu = x.colwise().mean().transpose();
    x.rowwise() -= mu.transpose();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(t.dim(0) - 1);
    return std::make_pair(mu, cov);
  };
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw DimensionError("frechet: dimension mismatch");
  const auto [mu_a, cov_a] = stats(a);
  const auto [mu_b, cov_b] = stats(b);
  return frechet_from_stats(mu_a, cov_a, mu_b, cov_b);
}

/// Spatial metrics averaged over the B grids of `batch` [B, L, d], plus
/// collapse diagnostics over all pooled tokens.
inline MetricReport metric_report(const Tensor& batch, std::size_t r_near, std::size_t r_far) {
  if (batch.rank() != 3) throw DimensionError("metric_report expects [B, L, d], got " + to_string(batch.shape()));
  const std::size_t B = batch.dim(0), L = batch.dim(1), d = batch.dim(2);
  MetricReport r;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> f(batch.values().begin() + static_cast<std::ptrdiff_t>(b * L * d),
                          batch.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * L * d));
    const TokenGrid grid(Tensor::constant({L, d}, std::move(f)));
    r.lds += lds(grid, r_near, r_far);
    r.cds += cds(grid);
    r.rmsc += rmsc(grid, true);
  }
  r.lds /= static_cast<double>(B);
  r.cds /= static_cast<double>(B);
  r.rmsc /= static_cast<double>(B);
  const auto diag = collapse_diagnostics(batch);
  r.offdiag_cov_mass = diag.offdiag_cov_mass;
  r.effective_rank = diag.effective_rank;
  return r;
}

}  // namespace coredi
