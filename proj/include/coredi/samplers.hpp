#pragma once

// Joint ODE/SDE integrators from noise (t = 1) to data (t = 0), and
// classifier-free guidance restricted to the image branch.

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/backbone.hpp"
#include "coredi/config.hpp"
#include "coredi/rng.hpp"

namespace coredi {

using VelocityFn =
    std::function<Velocities(const Tensor& x, const Tensor& z, const Tensor& t, std::span<const std::size_t> labels)>;

inline VelocityFn velocity_of(const Denoiser& model) {
  return [&model](const Tensor& x, const Tensor& z, const Tensor& t, std::span<const std::size_t> labels) {
    return model.forward(x, z, t, labels);
  };
}

struct JointState {
  Tensor x;
  Tensor z;
};

struct SampleConfig {
  std::size_t steps = 50;
  SamplerMethod method = SamplerMethod::kEulerMaruyama;
  double cfg_scale = 1.0;  // 1 disables guidance
  double sigma0 = 1.0;     // diffusion scale, sigma(t) = sigma0 * t
  std::uint64_t seed = 0;
};

/// v_x = v_x(null) + w (v_x(label) - v_x(null)); v_z = v_z(label) untouched.
inline Velocities guided_velocity(const VelocityFn& model, const Tensor& x, const Tensor& z, const Tensor& t,
                                  std::span<const std::size_t> labels, std::size_t null_label, double w) {
  if (w < 1.0) throw ConfigError("cfg_scale: must be >= 1");
  Velocities cond = model(x, z, t, labels);
  if (w == 1.0) return cond;
  const std::vector<std::size_t> nulls(labels.size(), null_label);
  const Velocities uncond = model(x, z, t, nulls);
  cond.v_x = add(uncond.v_x, scale(sub(cond.v_x, uncond.v_x), w));
  return cond;
}

namespace detail {
inline Tensor axpy(const Tensor& x, double h, const Tensor& v) {
  std::vector<double> out(x.values());
  const auto& vv = v.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * vv[i];
  return Tensor::constant(x.shape(), std::move(out));
}
}  // namespace detail

/// x <- x + h v (h signed; generation uses h = -dt).
inline JointState euler_step(const JointState& s, const Velocities& v, double h) {
  return {detail::axpy(s.x, h, v.v_x), detail::axpy(s.z, h, v.v_z)};
}

/// One reverse-time step t -> t - dt of the interpolant SDE with diffusion
/// sigma(t) = sigma0 t. The drift adds the score correction
/// (sigma^2 / 2) * eps_hat / t, where eps_hat = x + (1 - t) v is the implied
/// noise. With sigma0 = 0 this is exactly `euler_step(s, v, -dt)`.
inline JointState euler_maruyama_step(const JointState& s, const Velocities& v, double t, double dt, double sigma0,
                                      Rng& rng) {
  if (!(dt > 0.0)) throw ContractError("euler_maruyama_step: dt must be > 0");
  if (sigma0 == 0.0) return euler_step(s, v, -dt);
  const double sigma = sigma0 * t;
  const double correction = 0.5 * sigma0 * sigma0 * t;
  const double noise = sigma * std::sqrt(dt);
  auto step = [&](const Tensor& x, const Tensor& vel) {
    std::vector<double> out(x.values());
    const auto& vv = vel.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double eps_hat = out[i] + (1.0 - t) * vv[i];
      out[i] += -dt * (vv[i] + correction * eps_hat) + noise * rng.normal();
    }
    return Tensor::constant(x.shape(), std::move(out));
  };
  return {step(s.x, v.v_x), step(s.z, v.v_z)};
}

/// Integrates a velocity field from t_start to t_end on a uniform grid.
/// `field` is called with a per-sample time tensor [B].
inline JointState integrate(const std::function<Velocities(const JointState&, double)>& field, JointState state,
                            double t_start, double t_end, std::size_t steps, SamplerMethod method, double sigma0,
                            Rng& rng) {
  if (steps < 1) throw ConfigError("steps: must be >= 1");
  const double h = (t_end - t_start) / static_cast<double>(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = t_start + h * static_cast<double>(i);
    const double t_next = i + 1 == steps ? t_end : t_start + h * static_cast<double>(i + 1);
    const Velocities v = field(state, t);
    switch (method) {
      case SamplerMethod::kEuler:
        state = euler_step(state, v, t_next - t);
        break;
      case SamplerMethod::kHeun: {
        const JointState pred = euler_step(state, v, t_next - t);
        const Velocities v2 = field(pred, t_next);
        const Velocities avg{scale(add(v.v_x, v2.v_x), 0.5), scale(add(v.v_z, v2.v_z), 0.5)};
        state = euler_step(state, avg, t_next - t);
        break;
      }
      case SamplerMethod::kEulerMaruyama:
        // Final step is deterministic so the endpoint carries no fresh noise.
        if (i + 1 == steps || t_next > t) {
          state = euler_step(state, v, t_next - t);
        } else {
          state = euler_maruyama_step(state, v, t, t - t_next, sigma0, rng);
        }
        break;
    }
  }
  return state;
}

/// Generates one (x, z) pair per entry of `labels`, starting from standard
/// Gaussian noise at t = 1. Guidance uses `null_label` for the unconditional
/// branch and only affects the image velocity.
inline JointState sample(const VelocityFn& model, std::span<const std::size_t> labels, std::size_t null_label,
                         const Shape& x_shape, const Shape& z_shape, const SampleConfig& cfg) {
  if (cfg.steps < 1) throw ConfigError("steps: must be >= 1");
  NoGradGuard no_grad;
  const std::size_t B = labels.size();
  Shape xs{B}, zs{B};
  xs.insert(xs.end(), x_shape.begin(), x_shape.end());
  zs.insert(zs.end(), z_shape.begin(), z_shape.end());
  Rng rng = stream(cfg.seed, Stream::kSample);
  JointState state{Tensor::constant(xs, rng.normal_vector(numel(xs))), Tensor::constant(zs, rng.normal_vector(numel(zs)))};
  const std::vector<std::size_t> label_vec(labels.begin(), labels.end());
  auto field = [&](const JointState& s, double t) {
    const Tensor tt = Tensor::full({B}, t);
    return guided_velocity(model, s.x, s.z, tt, label_vec, null_label, cfg.cfg_scale);
  };
  return integrate(field, std::move(state), 1.0, 0.0, cfg.steps, cfg.method, cfg.sigma0, rng);
}

}  // namespace coredi
