#pragma once

// The learnable linear projection of frozen encoder features followed by
// batch normalization without affine parameters. Running statistics are EMA
// estimates used in eval mode.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "coredi/autodiff.hpp"
#include "coredi/rng.hpp"

namespace coredi {

struct ProjectionState {
  Tensor weight;                     // [D, d], requires_grad
  std::vector<double> running_mean;  // one per normalized channel
  std::vector<double> running_var;
  double momentum = 0.9;  // weight on the previous running value
  double eps = 1e-5;
  bool normalize = true;    // false: the no-bn ablation
  bool pool_tokens = true;  // statistics over B*L (true) or over B per token

  std::size_t input_dim() const { return weight.dim(0); }
  std::size_t channels() const { return weight.dim(1); }
};

/// Random orthonormal columns via QR of a Gaussian matrix (sign-fixed so R
/// has a positive diagonal).
inline Tensor random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (cols > rows) throw ConfigError("projection channels (" + std::to_string(cols) + ") exceed feature dim (" +
                                     std::to_string(rows) + ")");
  Rng rng = stream(seed, Stream::kProjection);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
  const Eigen::MatrixXd r = qr.matrixQR().topRows(g.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  std::vector<double> w(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) w[i * cols + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return Tensor::parameter({rows, cols}, std::move(w));
}

/// Orthonormal W, running mean 0, running variance 1. With
/// `pool_tokens = false` the statistics are kept per (token, channel).
inline ProjectionState init_projection(std::size_t feature_dim, std::size_t channels, std::uint64_t seed,
                                       std::size_t tokens = 1, bool pool_tokens = true) {
  ProjectionState s;
  s.weight = random_orthonormal(feature_dim, channels, seed);
  s.pool_tokens = pool_tokens;
  const std::size_t stats = pool_tokens ? channels : channels * tokens;
  s.running_mean.assign(stats, 0.0);
  s.running_var.assign(stats, 1.0);
  return s;
}

/// z_tilde = BN(z0 W) for z0 [B, L, D] -> [B, L, d].
///
/// Training mode normalizes with the batch statistics (population variance,
/// floored at `eps` under the radical) and folds them into the running EMA;
/// eval mode uses the running statistics.
inline Tensor project(ProjectionState& state, const Tensor& z0, bool training) {
  if (z0.rank() != 3 || z0.dim(2) != state.input_dim()) {
    throw DimensionError("project expects [B, L, " + std::to_string(state.input_dim()) + "], got " +
                         to_string(z0.shape()));
  }
  const std::size_t B = z0.dim(0), L = z0.dim(1), d = state.channels();
  const Tensor y = matmul(z0, state.weight);
  if (!state.normalize) return y;

  const std::size_t rows = state.pool_tokens ? B * L : B;
  const std::size_t width = state.pool_tokens ? d : L * d;
  if (state.running_mean.size() != width) {
    throw DimensionError("projection statistics hold " + std::to_string(state.running_mean.size()) +
                         " channels, input needs " + std::to_string(width));
  }
  const Tensor flat = reshape(y, {rows, width});
  if (!training) {
    std::vector<double> shift(width), inv(width);
    for (std::size_t c = 0; c < width; ++c) {
      shift[c] = state.running_mean[c];
      inv[c] = 1.0 / std::sqrt(std::max(state.running_var[c], state.eps));
    }
    const Tensor out = mul(sub(flat, Tensor::constant({width}, shift)), Tensor::constant({width}, inv));
    return reshape(out, {B, L, d});
  }
  if (rows < 2) throw NumericError("batch statistics need at least 2 rows, got " + std::to_string(rows));
  const Tensor mu = mean_axis(flat, 0);
  const Tensor centered = sub(flat, mu);
  const Tensor var = mean_axis(square(centered), 0);
  const Tensor out = div(centered, sqrt(clamp_min(var, state.eps)));
  for (std::size_t c = 0; c < width; ++c) {
    state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mu[c];
    state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * var[c];
  }
  return reshape(out, {B, L, d});
}

}  // namespace coredi
