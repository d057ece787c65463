#pragma once

// Anti-collapse penalties on the projected features z_tilde [B, L, d] or on
// the projection weight W [D, d]. All variances use the population (1/n)
// convention.

#include "coredi/autodiff.hpp"
#include "coredi/config.hpp"

namespace coredi {

struct RegConfig {
  RegKind kind = RegKind::kVariance;
  double gamma = 1.0;
  double eps = 1e-5;
  double lambda_reg = 1.0;
  CovNorm cov_norm = CovNorm::kCorrelation;

  static RegConfig from(const TrainConfig& c) {
    return {c.effective_reg(), c.gamma, c.reg_eps, c.lambda_reg, c.cov_norm};
  }
};

/// Mean over tokens of max(0, gamma - sqrt(Var_channels(token) + eps)).
inline Tensor l_var(const Tensor& z_tilde, double gamma, double eps) {
  if (z_tilde.rank() < 1 || z_tilde.shape().back() < 2) {
    throw NumericError("l_var needs at least 2 channels, got shape " + to_string(z_tilde.shape()));
  }
  const Tensor centered = sub(z_tilde, mean_axis(z_tilde, -1));
  const Tensor var = mean_axis(square(centered), -1);
  const Tensor std_dev = sqrt(add_scalar(var, eps));
  return mean(relu(add_scalar(-std_dev, gamma)));
}

/// ||W^T W - I||_F^2.
inline Tensor l_orth(const Tensor& weight) {
  if (weight.rank() != 2) throw DimensionError("l_orth expects [D, d], got " + to_string(weight.shape()));
  const std::size_t d = weight.dim(1);
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  return sum(square(sub(matmul(transpose(weight), weight), Tensor::constant({d, d}, std::move(eye)))));
}

/// Channel covariance (or correlation) of the pooled token vectors, [d, d].
/// Correlation normalization divides by sigma_i sigma_j with each variance
/// floored at `eps`.
inline Tensor channel_covariance(const Tensor& z_tilde, CovNorm norm, double eps) {
  const std::size_t d = z_tilde.shape().back();
  const std::size_t n = z_tilde.size() / d;
  if (n < 2) throw NumericError("channel covariance needs at least 2 token vectors, got " + std::to_string(n));
  const Tensor flat = reshape(z_tilde, {n, d});
  const Tensor centered = sub(flat, mean_axis(flat, 0));
  const Tensor cov = scale(matmul(transpose(centered), centered), 1.0 / static_cast<double>(n));
  if (norm == CovNorm::kRaw) return cov;
  const Tensor var = mean_axis(square(centered), 0);  // [1, d]
  const Tensor sigma = sqrt(clamp_min(var, eps));
  return div(div(cov, sigma), transpose(sigma));
}

/// (1/d) * sum_{i != j} C_ij^2.
inline Tensor l_cov(const Tensor& z_tilde, CovNorm norm = CovNorm::kCorrelation, double eps = 1e-5) {
  const std::size_t d = z_tilde.shape().back();
  const Tensor c = channel_covariance(z_tilde, norm, eps);
  std::vector<double> mask(d * d, 1.0);
  for (std::size_t i = 0; i < d; ++i) mask[i * d + i] = 0.0;
  return scale(sum(mul(square(c), Tensor::constant({d, d}, std::move(mask)))), 1.0 / static_cast<double>(d));
}

/// Dispatch on `config.kind`. `none` yields a constant zero that contributes
/// no gradient. The result is unweighted; the caller applies lambda_reg.
inline Tensor regularize(const RegConfig& config, const Tensor& z_tilde, const Tensor& weight) {
  switch (config.kind) {
    case RegKind::kVariance:
      return l_var(z_tilde, config.gamma, config.eps);
    case RegKind::kOrthogonality:
      return l_orth(weight);
    case RegKind::kCovariance:
      return l_cov(z_tilde, config.cov_norm, config.eps);
    case RegKind::kNone:
      return Tensor::scalar(0.0);
  }
  throw ConfigError("reg: unknown regularizer kind");
}

}  // namespace coredi
