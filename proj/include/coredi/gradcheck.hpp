#pragma once

// Central-difference checks of tape gradients for every loss term, on small
// random problems. Used by `coredi gradcheck` and by the test suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/backbone.hpp"
#include "coredi/config.hpp"
#include "coredi/flow.hpp"
#include "coredi/projection.hpp"
#include "coredi/regularizers.hpp"
#include "coredi/rng.hpp"

namespace coredi {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central-difference gradient of `f` with respect to input `which`.
inline std::vector<double> numeric_gradient(const LossFn& f, const std::vector<Tensor>& inputs, std::size_t which,
                                            double h = 1e-5) {
  std::vector<double> g(inputs[which].size());
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto probe = [&](double delta) {
      std::vector<Tensor> in = inputs;
      std::vector<double> v = inputs[which].values();
      v[i] += delta;
      in[which] = Tensor::constant(inputs[which].shape(), std::move(v));
      return f(in).item();
    };
    g[i] = (probe(h) - probe(-h)) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||); the absolute difference when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

/// Largest relative error between the tape gradient of `tape` and central
/// differences of `reference` over the inputs that require grad. The two
/// functions differ only when `tape` contains stop-gradients, in which case
/// `reference` holds the stopped values fixed.
inline double max_gradient_error(const LossFn& tape, const LossFn& reference, const std::vector<Tensor>& inputs,
                                 double h = 1e-5) {
  const Gradients grads = backward(tape(inputs));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    worst = std::max(worst, relative_error(grads.of(inputs[k]), numeric_gradient(reference, inputs, k, h)));
  }
  return worst;
}

inline double max_gradient_error(const LossFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  return max_gradient_error(f, f, inputs, h);
}

struct GradcheckResult {
  std::string module;
  std::string name;
  std::uint64_t seed = 0;
  double error = 0.0;
  double tolerance = 1e-4;
  bool ok() const { return error <= tolerance; }
};

/// Problem size for the loss-term checks: D = 16 features, d projected
/// channels, L = 4 tokens, B = 2.
struct GradcheckShape {
  Mode mode = Mode::kLatent;
  std::size_t feature_dim = 16;
  std::size_t proj_channels = 4;
  std::size_t tokens = 4;
  std::size_t batch = 2;
  double lambda_z = 1.0;
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale, bool param) {
  auto v = rng.normal_vector(numel(shape));
  for (double& x : v) x *= scale;
  return param ? Tensor::parameter(std::move(shape), std::move(v)) : Tensor::constant(std::move(shape), std::move(v));
}

inline TrainConfig gradcheck_config(const GradcheckShape& g) {
  TrainConfig c = g.mode == Mode::kPixel ? TrainConfig::pixel_defaults() : TrainConfig{};
  c.tokens = g.tokens;
  c.image_channels = 2;
  c.feature_dim = g.feature_dim;
  c.proj_channels = g.proj_channels;
  c.hidden = 8;
  c.blocks = 1;
  c.decoder_hidden = 6;
  c.decoder_blocks = 1;
  c.classes = 2;
  c.lambda_z = g.lambda_z;
  return c;
}

}  // namespace detail

inline std::vector<GradcheckResult> gradcheck_autodiff(std::uint64_t seed) {
  Rng rng(seed);
  const Tensor a = detail::random_tensor({2, 3, 4}, rng, 1.0, true);
  const Tensor b = detail::random_tensor({4, 3}, rng, 1.0, true);
  const Tensor w = detail::random_tensor({2, 3, 3}, rng, 1.0, false);
  std::vector<GradcheckResult> out;
  auto add_case = [&](const std::string& name, const LossFn& f, const std::vector<Tensor>& in) {
    out.push_back({"autodiff", name, seed, max_gradient_error(f, in)});
  };
  add_case("matmul+softmax", [&](const std::vector<Tensor>& in) { return sum(mul(softmax(matmul(in[0], in[1])), w)); },
           {a, b});
  add_case("silu+tanh+exp", [&](const std::vector<Tensor>& in) {
    return mean(add(silu(in[0]), mul(tanh(in[0]), exp(scale(in[0], 0.3)))));
  }, {a});
  add_case("mean_axis+sqrt", [&](const std::vector<Tensor>& in) {
    return sum(sqrt(add_scalar(mean_axis(square(in[0]), -1), 0.1)));
  }, {a});
  return out;
}

inline std::vector<GradcheckResult> gradcheck_projection(std::uint64_t seed, const GradcheckShape& g = {}) {
  Rng rng(seed);
  const Tensor z0 = detail::random_tensor({g.batch, g.tokens, g.feature_dim}, rng, 1.0, false);
  const Tensor target = detail::random_tensor({g.batch, g.tokens, g.proj_channels}, rng, 1.0, false);
  const Tensor w = detail::random_tensor({g.feature_dim, g.proj_channels}, rng, 0.5, true);
  std::vector<GradcheckResult> out;
  for (bool normalize : {true, false}) {
    auto f = [&](const std::vector<Tensor>& in) {
      ProjectionState s = init_projection(g.feature_dim, g.proj_channels, 0);
      s.weight = in[0];
      s.normalize = normalize;
      return sum(mul(project(s, z0, true), target));
    };
    out.push_back({"projection", normalize ? "bn" : "no_bn", seed, max_gradient_error(f, {w})});
  }
  return out;
}

inline std::vector<GradcheckResult> gradcheck_regularizers(std::uint64_t seed, const GradcheckShape& g = {}) {
  Rng rng(seed);
  const Tensor z0 = detail::random_tensor({g.batch, g.tokens, g.feature_dim}, rng, 1.0, false);
  const Tensor w = detail::random_tensor({g.feature_dim, g.proj_channels}, rng, 0.5, true);
  std::vector<GradcheckResult> out;
  for (RegKind kind : {RegKind::kVariance, RegKind::kOrthogonality, RegKind::kCovariance}) {
    auto f = [&](const std::vector<Tensor>& in) {
      ProjectionState s = init_projection(g.feature_dim, g.proj_channels, 0);
      s.weight = in[0];
      RegConfig rc;
      rc.kind = kind;
      rc.gamma = 1.5;  // keeps most hinges active so the check is not vacuous
      return regularize(rc, project(s, z0, true), in[0]);
    };
    out.push_back({"regularizers", std::string("L_") + enum_name(kind), seed, max_gradient_error(f, {w})});
  }
  return out;
}

/// L_image, L_rep (with stop-gradient) and the weighted total through a small
/// real denoiser, with respect to W_phi and the denoiser's feature embedding.
inline std::vector<GradcheckResult> gradcheck_flow(std::uint64_t seed, const GradcheckShape& g = {}) {
  const TrainConfig c = detail::gradcheck_config(g);
  Rng rng(seed);
  const auto model = make_backbone(c, seed);
  const Tensor x0 = detail::random_tensor({g.batch, c.image_tokens(), c.image_channels}, rng, 1.0, false);
  const Tensor z0 = detail::random_tensor({g.batch, g.tokens, g.feature_dim}, rng, 1.0, false);
  const Tensor w = detail::random_tensor({g.feature_dim, g.proj_channels}, rng, 0.5, true);
  std::vector<double> tv(g.batch);
  for (double& t : tv) t = 0.1 + 0.8 * rng.uniform();
  const Tensor t = Tensor::constant({g.batch}, tv);
  std::vector<std::size_t> labels(g.batch);
  for (std::size_t b = 0; b < g.batch; ++b) labels[b] = b % (c.classes + 1);
  const std::string emb = g.mode == Mode::kPixel ? "enc.emb.z" : "emb.z";
  std::size_t emb_index = 0;
  while (model->params().name(emb_index) != emb) ++emb_index;
  const Tensor theta = model->params().at(emb_index);
  const std::uint64_t noise_seed = seed ^ 0x5eedull;

  // frozen_target: the clean target is computed from the unperturbed W and
  // enters as a constant, which is what the stop-gradient means.
  auto losses = [&](const std::vector<Tensor>& in, bool frozen_target) {
    auto m = model->clone();
    m->params().set(emb_index, in[1]);
    ProjectionState s = init_projection(g.feature_dim, g.proj_channels, 0);
    s.weight = in[0];
    const Tensor z_tilde = project(s, z0, true);
    Tensor target_src = z_tilde;
    if (frozen_target) {
      ProjectionState s0 = init_projection(g.feature_dim, g.proj_channels, 0);
      s0.weight = Tensor::constant(w.shape(), w.values());
      NoGradGuard no_grad;
      target_src = project(s0, z0, true);
    }
    Rng noise(noise_seed);
    const NoisyPair pair = interpolate(x0, z_tilde, t, noise);
    const Velocities v = m->forward(pair.x_t, pair.z_t, t, labels);
    // The noisy input carries z_tilde; the target carries target_src.
    return flow_losses(v.v_x, v.v_z, pair, x0, target_src, true);
  };
  auto image = [&](const std::vector<Tensor>& in) { return losses(in, false).image; };
  auto rep_tape = [&](const std::vector<Tensor>& in) { return losses(in, false).rep; };
  auto rep_ref = [&](const std::vector<Tensor>& in) { return losses(in, true).rep; };
  auto total = [&](const std::vector<Tensor>& in, bool frozen) {
    const FlowLosses l = losses(in, frozen);
    return add(l.image, scale(l.rep, g.lambda_z));
  };
  const std::string suffix = std::string(" [") + enum_name(g.mode) + "]";
  const std::vector<Tensor> inputs{w, theta};
  return {
      {"flow", "L_image" + suffix, seed, max_gradient_error(image, inputs)},
      {"flow", "L_rep(sg)" + suffix, seed, max_gradient_error(rep_tape, rep_ref, inputs)},
      {"flow", "L_image+lambda_z*L_rep" + suffix, seed,
       max_gradient_error([&](const auto& in) { return total(in, false); },
                          [&](const auto& in) { return total(in, true); }, inputs)},
  };
}

/// Every parameter tensor of a small denoiser against a random linear readout.
inline std::vector<GradcheckResult> gradcheck_backbone(std::uint64_t seed, Mode mode = Mode::kLatent) {
  GradcheckShape g;
  g.mode = mode;
  const TrainConfig c = detail::gradcheck_config(g);
  const auto model = make_backbone(c, seed);
  Rng rng(seed);
  const Tensor x = detail::random_tensor({2, c.image_tokens(), c.image_channels}, rng, 1.0, false);
  const Tensor z = detail::random_tensor({2, c.tokens, c.proj_channels}, rng, 1.0, false);
  const Tensor rx = detail::random_tensor(x.shape(), rng, 1.0, false);
  const Tensor rz = detail::random_tensor(z.shape(), rng, 1.0, false);
  const Tensor t = Tensor::constant({2}, {0.3, 0.7});
  const std::vector<std::size_t> labels{0, c.classes};
  double worst = 0.0;
  for (std::size_t i = 0; i < model->params().size(); ++i) {
    auto f = [&](const std::vector<Tensor>& in) {
      auto m = model->clone();
      m->params().set(i, in[0]);
      const Velocities v = m->forward(x, z, t, labels);
      return add(sum(mul(v.v_x, rx)), sum(mul(v.v_z, rz)));
    };
    worst = std::max(worst, max_gradient_error(f, {model->params().at(i)}));
  }
  return {{"backbone", std::string("all parameters [") + enum_name(mode) + "]", seed, worst}};
}

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"autodiff", "projection", "regularizers", "flow", "backbone"};
  return names;
}

/// Runs the named module ("all" for every module) on `seeds` consecutive
/// seeds starting at `first_seed`, in latent and pixel mode where relevant.
inline std::vector<GradcheckResult> run_gradchecks(const std::string& module, std::uint64_t first_seed,
                                                   std::size_t seeds) {
  const auto& names = gradcheck_modules();
  if (module != "all" && std::find(names.begin(), names.end(), module) == names.end()) {
    throw ConfigError("gradcheck: unknown module '" + module + "'");
  }
  GradcheckShape pixel;
  pixel.mode = Mode::kPixel;
  pixel.proj_channels = 16;
  pixel.lambda_z = 0.1;
  std::vector<GradcheckResult> out;
  auto append = [&](std::vector<GradcheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
  for (std::uint64_t seed = first_seed; seed < first_seed + seeds; ++seed) {
    const bool all = module == "all";
    if (all || module == "autodiff") append(gradcheck_autodiff(seed));
    if (all || module == "projection") append(gradcheck_projection(seed));
    if (all || module == "regularizers") append(gradcheck_regularizers(seed));
    if (all || module == "flow") {
      append(gradcheck_flow(seed));
      append(gradcheck_flow(seed, pixel));
    }
    if (all || module == "backbone") {
      append(gradcheck_backbone(seed, Mode::kLatent));
      append(gradcheck_backbone(seed, Mode::kPixel));
    }
  }
  return out;
}

}  // namespace coredi
