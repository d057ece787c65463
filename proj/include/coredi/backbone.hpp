#pragma once

// Joint denoisers over (image tokens, projected feature tokens).
//
// LatentBackbone: both modalities are embedded separately and summed
// channel-wise into one token sequence (same length as an image-only model),
// processed by adaLN-conditioned transformer blocks, and decoded by two
// linear heads reading the same final tokens.
//
// PixelBackbone: a transformer encoder sees the 2x2-pooled noisy image and the
// noisy features and produces one joint condition vector per coarse token; a
// light MLP decoder predicts the full-resolution image velocity from the
// noisy image and the upsampled condition, and a bias-free linear head maps
// the condition to the feature velocity.

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/config.hpp"
#include "coredi/encoder.hpp"
#include "coredi/rng.hpp"

namespace coredi {

/// Named, ordered parameter collection. Order is insertion order and is the
/// serialization order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (!index_.emplace(name, tensors_.size()).second) throw ContractError("duplicate parameter " + name);
    names_.push_back(name);
    tensors_.push_back(std::move(value));
  }

  const Tensor& operator()(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return tensors_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }
  void replace(std::size_t i, std::vector<double> values) {
    tensors_[i] = Tensor::parameter(tensors_[i].shape(), std::move(values));
  }
  void set(std::size_t i, Tensor value) {
    if (value.shape() != tensors_[i].shape()) throw DimensionError("parameter " + names_[i] + " changes shape");
    tensors_[i] = std::move(value);
  }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Velocities {
  Tensor v_x;
  Tensor v_z;
};

/// A joint velocity model v(x_t, z_t, t, label). Labels equal to `classes()`
/// select the null (unconditional) embedding.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Velocities forward(const Tensor& x_t, const Tensor& z_t, const Tensor& t,
                             std::span<const std::size_t> labels) const = 0;
  virtual std::unique_ptr<Denoiser> clone() const = 0;
  virtual std::size_t classes() const = 0;
  std::size_t null_label() const { return classes(); }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 protected:
  ParamStore params_;
};

inline std::size_t count_params(const Denoiser& model) { return model.params().count(); }

// ---------------------------------------------------------------------------
// Building blocks

namespace nn {

inline Tensor gaussian(Rng& rng, Shape shape, double std_dev) {
  std::vector<double> v = rng.normal_vector(numel(shape));
  for (double& e : v) e *= std_dev;
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor dense_init(Rng& rng, std::size_t in, std::size_t out, double gain = 1.0) {
  return gaussian(rng, {in, out}, gain / std::sqrt(static_cast<double>(in)));
}

inline Tensor zeros_param(Shape shape) {
  const std::size_t n = numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0));
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

/// Normalization over the last axis, no affine parameters.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  const Tensor centered = sub(x, mean_axis(x, -1));
  return div(centered, sqrt(add_scalar(mean_axis(square(centered), -1), eps)));
}

/// x * (1 + scale) + shift.
inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_) {
  return add(add(x, mul(x, scale_)), shift);
}

/// Sinusoidal features of 1000 t, [B] -> [B, width].
inline Tensor timestep_features(const Tensor& t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<double> out(t.size() * width);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = 1000.0 * t[b] * freq;
      out[b * width + i] = std::cos(arg);
      out[b * width + half + i] = std::sin(arg);
    }
  }
  return Tensor::constant({t.size(), width}, std::move(out));
}

inline void add_conditioning(ParamStore& p, Rng& rng, const std::string& pre, std::size_t hidden, std::size_t classes) {
  p.add(pre + "t1", dense_init(rng, hidden, hidden));
  p.add(pre + "t1b", zeros_param({hidden}));
  p.add(pre + "t2", dense_init(rng, hidden, hidden));
  p.add(pre + "t2b", zeros_param({hidden}));
  p.add(pre + "class", gaussian(rng, {classes + 1, hidden}, 1.0));  // last row: null class
}

/// Conditioning vector [B, H] = MLP(sinusoid(t)) + class_table[label].
inline Tensor conditioning(const ParamStore& p, const std::string& pre, const Tensor& t,
                           std::span<const std::size_t> labels) {
  const Tensor& table = p(pre + "class");
  if (labels.size() != t.size()) throw DimensionError("labels and t differ in batch size");
  for (std::size_t l : labels) {
    if (l >= table.dim(0)) {
      throw ContractError("label " + std::to_string(l) + " out of range (null label is " +
                          std::to_string(table.dim(0) - 1) + ")");
    }
  }
  const std::size_t hidden = table.dim(1);
  const Tensor f = timestep_features(t, hidden);
  const Tensor temb = linear(silu(linear(f, p(pre + "t1"), p(pre + "t1b"))), p(pre + "t2"), p(pre + "t2b"));
  return add(temb, take_rows(table, std::vector<std::size_t>(labels.begin(), labels.end())));
}

inline void add_transformer_block(ParamStore& p, Rng& rng, const std::string& pre, std::size_t hidden,
                                  std::size_t mlp_ratio) {
  p.add(pre + "mod", dense_init(rng, hidden, 6 * hidden, 0.5));
  p.add(pre + "modb", zeros_param({6 * hidden}));
  for (const char* w : {"q", "k", "v", "o"}) p.add(pre + w, dense_init(rng, hidden, hidden));
  p.add(pre + "mlp1", dense_init(rng, hidden, mlp_ratio * hidden));
  p.add(pre + "mlp1b", zeros_param({mlp_ratio * hidden}));
  p.add(pre + "mlp2", dense_init(rng, mlp_ratio * hidden, hidden));
  p.add(pre + "mlp2b", zeros_param({hidden}));
}

/// Pre-norm single-head attention + MLP with adaLN shift/scale/gate.
/// h [B, L, H], cond_act = silu(cond) [B, H].
inline Tensor transformer_block(const ParamStore& p, const std::string& pre, const Tensor& h, const Tensor& cond_act) {
  const std::size_t B = h.dim(0), H = h.dim(2);
  const Tensor mod = reshape(linear(cond_act, p(pre + "mod"), p(pre + "modb")), {B, 1, 6 * H});
  auto chunk = [&](std::size_t i) { return slice_last(mod, i * H, H); };

  const Tensor a = modulate(layer_norm(h), chunk(0), chunk(1));
  const Tensor q = matmul(a, p(pre + "q"));
  const Tensor k = matmul(a, p(pre + "k"));
  const Tensor v = matmul(a, p(pre + "v"));
  const Tensor attn = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(H))));
  const Tensor h1 = add(h, mul(chunk(2), matmul(matmul(attn, v), p(pre + "o"))));

  const Tensor m = modulate(layer_norm(h1), chunk(3), chunk(4));
  const Tensor mlp = linear(silu(linear(m, p(pre + "mlp1"), p(pre + "mlp1b"))), p(pre + "mlp2"), p(pre + "mlp2b"));
  return add(h1, mul(chunk(5), mlp));
}

inline void add_mlp_block(ParamStore& p, Rng& rng, const std::string& pre, std::size_t cond_dim, std::size_t width,
                          std::size_t mlp_ratio) {
  p.add(pre + "mod", dense_init(rng, cond_dim, 3 * width, 0.5));
  p.add(pre + "modb", zeros_param({3 * width}));
  p.add(pre + "mlp1", dense_init(rng, width, mlp_ratio * width));
  p.add(pre + "mlp1b", zeros_param({mlp_ratio * width}));
  p.add(pre + "mlp2", dense_init(rng, mlp_ratio * width, width));
  p.add(pre + "mlp2b", zeros_param({width}));
}

inline Tensor mlp_block(const ParamStore& p, const std::string& pre, const Tensor& h, const Tensor& cond_act) {
  const std::size_t B = h.dim(0), W = h.dim(2);
  const Tensor mod = reshape(linear(cond_act, p(pre + "mod"), p(pre + "modb")), {B, 1, 3 * W});
  const Tensor m = modulate(layer_norm(h), slice_last(mod, 0, W), slice_last(mod, W, W));
  const Tensor mlp = linear(silu(linear(m, p(pre + "mlp1"), p(pre + "mlp1b"))), p(pre + "mlp2"), p(pre + "mlp2b"));
  return add(h, mul(slice_last(mod, 2 * W, W), mlp));
}

/// Final adaLN (shift, scale) without gate.
inline Tensor final_norm(const ParamStore& p, const std::string& pre, const Tensor& h, const Tensor& cond_act) {
  const std::size_t B = h.dim(0), W = h.dim(2);
  const Tensor mod = reshape(linear(cond_act, p(pre + "mod"), p(pre + "modb")), {B, 1, 2 * W});
  return modulate(layer_norm(h), slice_last(mod, 0, W), slice_last(mod, W, W));
}

inline void check_input(const Tensor& x, std::size_t tokens, std::size_t channels, const char* what) {
  if (x.rank() != 3 || x.dim(1) != tokens || x.dim(2) != channels) {
    throw DimensionError(std::string(what) + " expects [B, " + std::to_string(tokens) + ", " +
                         std::to_string(channels) + "], got " + to_string(x.shape()));
  }
}

}  // namespace nn

// ---------------------------------------------------------------------------

struct ModelDims {
  std::size_t tokens, image_channels, proj_channels, hidden, blocks, mlp_ratio, classes;
  std::size_t decoder_hidden = 0, decoder_blocks = 0;

  static ModelDims from(const TrainConfig& c) {
    if (c.tokens == 0 || c.image_channels == 0 || c.proj_channels == 0 || c.hidden < 2 || c.classes == 0) {
      throw ConfigError("backbone dimensions must be positive");
    }
    return {c.tokens, c.image_channels, c.proj_channels, c.hidden, c.blocks, c.mlp_ratio, c.classes,
            c.decoder_hidden, c.decoder_blocks};
  }
};

class LatentBackbone : public Denoiser {
 public:
  LatentBackbone(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
    Rng rng = stream(seed, Stream::kInit, 1);
    const std::size_t H = dims.hidden;
    params_.add("emb.x", nn::dense_init(rng, dims.image_channels, H));
    params_.add("emb.z", nn::dense_init(rng, dims.proj_channels, H));
    params_.add("emb.b", nn::zeros_param({H}));
    params_.add("pos", nn::gaussian(rng, {dims.tokens, H}, 0.1));
    nn::add_conditioning(params_, rng, "cond.", H, dims.classes);
    for (std::size_t i = 0; i < dims.blocks; ++i) nn::add_transformer_block(params_, rng, block(i), H, dims.mlp_ratio);
    params_.add("final.mod", nn::dense_init(rng, H, 2 * H, 0.5));
    params_.add("final.modb", nn::zeros_param({2 * H}));
    params_.add("dec.x", nn::dense_init(rng, H, dims.image_channels));
    params_.add("dec.z", nn::dense_init(rng, H, dims.proj_channels));
  }

  const ModelDims& dims() const { return dims_; }
  std::size_t classes() const override { return dims_.classes; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<LatentBackbone>(*this); }

  /// Final token states o_t [B, L, H].
  Tensor trunk(const Tensor& x_t, const Tensor& z_t, const Tensor& t, std::span<const std::size_t> labels) const {
    nn::check_input(x_t, dims_.tokens, dims_.image_channels, "latent backbone x_t");
    nn::check_input(z_t, dims_.tokens, dims_.proj_channels, "latent backbone z_t");
    const ParamStore& p = params_;
    const Tensor c = silu(nn::conditioning(p, "cond.", t, labels));
    Tensor h = add(add(add(matmul(x_t, p("emb.x")), matmul(z_t, p("emb.z"))), p("emb.b")), p("pos"));
    for (std::size_t i = 0; i < dims_.blocks; ++i) h = nn::transformer_block(p, block(i), h, c);
    return nn::final_norm(p, "final.", h, c);
  }

  Velocities forward(const Tensor& x_t, const Tensor& z_t, const Tensor& t,
                     std::span<const std::size_t> labels) const override {
    const Tensor o = trunk(x_t, z_t, t, labels);
    return {matmul(o, params_("dec.x")), matmul(o, params_("dec.z"))};
  }

 private:
  static std::string block(std::size_t i) { return "blk" + std::to_string(i) + "."; }
  ModelDims dims_;
};

class PixelBackbone : public Denoiser {
 public:
  PixelBackbone(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(dims.tokens))));
    if (side * side != dims.tokens) throw ConfigError("tokens: must be a perfect square");
    if (dims.decoder_hidden == 0) throw ConfigError("decoder_hidden: must be >= 1");
    pool_ = pooling_matrix(side);
    upsample_ = upsampling_matrix(side);
    Rng rng = stream(seed, Stream::kInit, 2);
    const std::size_t H = dims.hidden, Hd = dims.decoder_hidden;
    params_.add("enc.emb.x", nn::dense_init(rng, dims.image_channels, H));
    params_.add("enc.emb.z", nn::dense_init(rng, dims.proj_channels, H));
    params_.add("enc.emb.b", nn::zeros_param({H}));
    params_.add("enc.pos", nn::gaussian(rng, {dims.tokens, H}, 0.1));
    nn::add_conditioning(params_, rng, "enc.cond.", H, dims.classes);
    for (std::size_t i = 0; i < dims.blocks; ++i)
      nn::add_transformer_block(params_, rng, enc_block(i), H, dims.mlp_ratio);
    params_.add("enc.final.mod", nn::dense_init(rng, H, 2 * H, 0.5));
    params_.add("enc.final.modb", nn::zeros_param({2 * H}));
    params_.add("head.z", nn::dense_init(rng, H, dims.proj_channels));

    params_.add("dec.in.x", nn::dense_init(rng, dims.image_channels, Hd));
    params_.add("dec.in.c", nn::dense_init(rng, H, Hd));
    params_.add("dec.in.b", nn::zeros_param({Hd}));
    params_.add("dec.pos", nn::gaussian(rng, {4 * dims.tokens, Hd}, 0.1));
    for (std::size_t i = 0; i < dims.decoder_blocks; ++i)
      nn::add_mlp_block(params_, rng, dec_block(i), H, Hd, dims.mlp_ratio);
    params_.add("dec.final.mod", nn::dense_init(rng, H, 2 * Hd, 0.5));
    params_.add("dec.final.modb", nn::zeros_param({2 * Hd}));
    params_.add("dec.out", nn::dense_init(rng, Hd, dims.image_channels));
  }

  const ModelDims& dims() const { return dims_; }
  std::size_t classes() const override { return dims_.classes; }
  std::size_t image_tokens() const { return 4 * dims_.tokens; }
  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<PixelBackbone>(*this); }

  /// 2x2 average pooling of a full-resolution token grid.
  Tensor downsample(const Tensor& x_full) const { return matmul(pool_, x_full); }

  /// c_joint [B, L, H] from the pooled noisy image and noisy features.
  Tensor encode_joint(const Tensor& x_hat, const Tensor& z_t, const Tensor& cond_act) const {
    nn::check_input(x_hat, dims_.tokens, dims_.image_channels, "pixel encoder x_hat");
    nn::check_input(z_t, dims_.tokens, dims_.proj_channels, "pixel encoder z_t");
    const ParamStore& p = params_;
    Tensor h = add(add(add(matmul(x_hat, p("enc.emb.x")), matmul(z_t, p("enc.emb.z"))), p("enc.emb.b")), p("enc.pos"));
    for (std::size_t i = 0; i < dims_.blocks; ++i) h = nn::transformer_block(p, enc_block(i), h, cond_act);
    return nn::final_norm(p, "enc.final.", h, cond_act);
  }

  /// Full-resolution image velocity from x_t and the joint condition.
  Tensor decode(const Tensor& x_full, const Tensor& c_joint, const Tensor& cond_act) const {
    const ParamStore& p = params_;
    const Tensor c_up = matmul(upsample_, c_joint);
    Tensor h = add(add(add(matmul(x_full, p("dec.in.x")), matmul(c_up, p("dec.in.c"))), p("dec.in.b")), p("dec.pos"));
    for (std::size_t i = 0; i < dims_.decoder_blocks; ++i) h = nn::mlp_block(p, dec_block(i), h, cond_act);
    return matmul(nn::final_norm(p, "dec.final.", h, cond_act), p("dec.out"));
  }

  /// Linear representation head; no bias, no time input.
  Tensor rep_head(const Tensor& c_joint) const { return matmul(c_joint, params_("head.z")); }

  Velocities forward(const Tensor& x_t, const Tensor& z_t, const Tensor& t,
                     std::span<const std::size_t> labels) const override {
    nn::check_input(x_t, image_tokens(), dims_.image_channels, "pixel backbone x_t");
    const Tensor c = silu(nn::conditioning(params_, "enc.cond.", t, labels));
    const Tensor c_joint = encode_joint(downsample(x_t), z_t, c);
    return {decode(x_t, c_joint, c), rep_head(c_joint)};
  }

 private:
  static std::string enc_block(std::size_t i) { return "enc.blk" + std::to_string(i) + "."; }
  static std::string dec_block(std::size_t i) { return "dec.blk" + std::to_string(i) + "."; }
  ModelDims dims_;
  Tensor pool_;
  Tensor upsample_;
};

inline Velocities forward_latent(const LatentBackbone& bb, const Tensor& x_t, const Tensor& z_t, const Tensor& t,
                                 std::span<const std::size_t> labels) {
  return bb.forward(x_t, z_t, t, labels);
}

inline Velocities forward_pixel(const PixelBackbone& bb, const Tensor& x_t_full, const Tensor& z_t, const Tensor& t,
                                std::span<const std::size_t> labels) {
  return bb.forward(x_t_full, z_t, t, labels);
}

inline std::unique_ptr<Denoiser> make_backbone(const TrainConfig& config, std::uint64_t seed) {
  const ModelDims dims = ModelDims::from(config);
  if (config.mode == Mode::kPixel) return std::make_unique<PixelBackbone>(dims, seed);
  return std::make_unique<LatentBackbone>(dims, seed);
}

}  // namespace coredi
