#pragma once

// Coupled linear interpolation between clean data and Gaussian noise for both
// modalities, and the joint velocity-matching loss.

#include <cmath>
#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/config.hpp"
#include "coredi/rng.hpp"

namespace coredi {

struct NoisyPair {
  Tensor x_t;    // [B, Lx, C]
  Tensor z_t;    // [B, L, d]
  Tensor t;      // [B]
  Tensor eps_x;  // noise used for x_t
  Tensor eps_z;  // noise used for z_t
};

struct LossBreakdown {
  double l_image = 0.0;
  double l_rep = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  double lambda_z = 1.0;
  double lambda_reg = 1.0;
};

/// Per-sample times [B] for broadcasting against [B, ...] tensors.
inline Tensor per_sample(const Tensor& t, std::size_t rank) {
  Shape s(rank, 1);
  s[0] = t.size();
  return reshape(t, s);
}

/// x_t = (1-t) x0 + t eps_x and z_t = (1-t) z0 + t eps_z with one shared t
/// per sample. The noise is drawn here and returned with the pair.
inline NoisyPair interpolate(const Tensor& x0, const Tensor& z0_tilde, const Tensor& t, Rng& rng) {
  if (x0.rank() < 1 || z0_tilde.rank() < 1 || x0.dim(0) != t.size() || z0_tilde.dim(0) != t.size()) {
    throw DimensionError("interpolate: batch extents differ");
  }
  for (double v : t.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("interpolate: t = " + std::to_string(v) + " outside [0,1]");
  }
  NoisyPair pair;
  pair.t = t;
  pair.eps_x = Tensor::constant(x0.shape(), rng.normal_vector(x0.size()));
  pair.eps_z = Tensor::constant(z0_tilde.shape(), rng.normal_vector(z0_tilde.size()));
  auto mix = [&t](const Tensor& clean, const Tensor& noise) {
    const Tensor tt = per_sample(t, clean.rank());
    return add(mul(add_scalar(-tt, 1.0), clean), mul(tt, noise));
  };
  pair.x_t = mix(x0, pair.eps_x);
  pair.z_t = mix(z0_tilde, pair.eps_z);
  return pair;
}

/// Uniform on [0,1], or sigmoid of a standard normal.
inline Tensor sample_t(std::size_t batch, TimeSampler mode, Rng& rng) {
  if (batch < 1) throw ContractError("sample_t: batch must be >= 1");
  std::vector<double> t(batch);
  for (double& v : t) {
    if (mode == TimeSampler::kUniform) {
      v = rng.uniform();
    } else {
      v = 1.0 / (1.0 + std::exp(-rng.normal()));
    }
  }
  return Tensor::constant({batch}, std::move(t));
}

struct FlowLosses {
  Tensor image;  // scalar, on the tape
  Tensor rep;    // scalar, on the tape
};

/// L_image = mean((v_x - (eps_x - x0))^2) and
/// L_rep   = mean((v_z - (eps_z - sg(z0_tilde)))^2).
/// `stop_target = false` is the ablation that lets the target carry gradient.
inline FlowLosses flow_losses(const Tensor& v_x, const Tensor& v_z, const NoisyPair& pair, const Tensor& x0,
                              const Tensor& z0_tilde, bool stop_target = true) {
  if (v_x.shape() != x0.shape() || v_z.shape() != z0_tilde.shape() || pair.eps_x.shape() != x0.shape() ||
      pair.eps_z.shape() != z0_tilde.shape()) {
    throw DimensionError("flow_losses: prediction/target shapes differ");
  }
  const Tensor target_x = sub(pair.eps_x, x0);
  const Tensor clean_z = stop_target ? stop_gradient(z0_tilde) : z0_tilde;
  const Tensor target_z = sub(pair.eps_z, clean_z);
  return {mean(square(sub(v_x, target_x))), mean(square(sub(v_z, target_z)))};
}

inline LossBreakdown joint_loss(const Tensor& v_x, const Tensor& v_z, const NoisyPair& pair, const Tensor& x0,
                                const Tensor& z0_tilde, double lambda_z) {
  const FlowLosses l = flow_losses(v_x, v_z, pair, x0, z0_tilde);
  LossBreakdown out;
  out.l_image = l.image.item();
  out.l_rep = l.rep.item();
  out.lambda_z = lambda_z;
  out.lambda_reg = 0.0;
  out.total = out.l_image + lambda_z * out.l_rep;
  return out;
}

}  // namespace coredi
