#pragma once

// End-to-end optimization of the denoiser and the projection under
//   L = L_image + lambda_z * L_rep + lambda_reg * L_reg,
// with AdamW, an EMA copy of the denoiser weights, milestone checkpoints and
// metric reports, and the stabilization ablations.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/backbone.hpp"
#include "coredi/config.hpp"
#include "coredi/encoder.hpp"
#include "coredi/flow.hpp"
#include "coredi/metrics.hpp"
#include "coredi/optim.hpp"
#include "coredi/projection.hpp"
#include "coredi/regularizers.hpp"
#include "coredi/report.hpp"
#include "coredi/rng.hpp"
#include "coredi/samplers.hpp"

namespace coredi {

/// Probability that a training label is replaced by the null class, so the
/// same network also learns the unconditional velocity used by guidance.
inline constexpr double kLabelDropout = 0.1;

struct Batch {
  Tensor x0;  // [B, Lx, C]
  Tensor z0;  // [B, L, D]
  std::vector<std::size_t> labels;
};

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  const std::size_t B = indices.size();
  const std::size_t nx = ds.image_tokens() * ds.image_channels, nz = ds.tokens * ds.feature_dim;
  std::vector<double> x(B * nx), z(B * nz);
  for (std::size_t i = 0; i < B; ++i) {
    const JointSample& s = ds.samples.at(indices[i]);
    std::copy(s.x0.values().begin(), s.x0.values().end(), x.begin() + static_cast<std::ptrdiff_t>(i * nx));
    std::copy(s.z0.values().begin(), s.z0.values().end(), z.begin() + static_cast<std::ptrdiff_t>(i * nz));
    b.labels.push_back(s.label);
  }
  b.x0 = Tensor::constant({B, ds.image_tokens(), ds.image_channels}, std::move(x));
  b.z0 = Tensor::constant({B, ds.tokens, ds.feature_dim}, std::move(z));
  return b;
}

/// Batch indices for `step`, a pure function of (seed, step).
inline std::vector<std::size_t> batch_indices(const TrainConfig& c, std::size_t dataset_size, std::size_t step) {
  Rng rng = stream(c.seed, Stream::kBatch, step);
  std::vector<std::size_t> idx(c.batch_size);
  for (auto& i : idx) i = rng.index(dataset_size);
  return idx;
}

/// Projection learning rate at `step`: constant, or cosine decay to 0 at the
/// horizon and 0 afterwards.
inline double schedule_lr_proj(std::size_t step, const TrainConfig& c) {
  if (c.proj_schedule == ProjSchedule::kConstant) return c.lr_proj;
  const double horizon = static_cast<double>(c.decay_horizon());
  const double s = std::min(static_cast<double>(step), horizon);
  return c.lr_proj * 0.5 * (1.0 + std::cos(std::numbers::pi * s / horizon));
}

struct TrainState {
  TrainConfig config;
  std::shared_ptr<const Dataset> dataset;
  std::unique_ptr<Denoiser> model;
  ProjectionState projection;
  std::optional<PcaProjection> pca;  // fitted when the fixed_pca ablation is on
  std::vector<AdamW::Slot> model_slots;
  AdamW::Slot proj_slot;
  std::vector<std::vector<double>> ema;  // one per model parameter
  AdamW optimizer;
  std::size_t step = 0;

  TrainState() = default;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;
  TrainState(const TrainState& o)
      : config(o.config), dataset(o.dataset), model(o.model->clone()), projection(o.projection), pca(o.pca),
        model_slots(o.model_slots), proj_slot(o.proj_slot), ema(o.ema), optimizer(o.optimizer), step(o.step) {}

  bool projection_frozen() const { return config.ablations.fixed_pca; }

  /// A copy of the denoiser carrying the EMA weights.
  std::unique_ptr<Denoiser> ema_model() const {
    auto m = model->clone();
    for (std::size_t i = 0; i < ema.size(); ++i) m->params().replace(i, ema[i]);
    return m;
  }
};

inline TrainState init_train_state(const TrainConfig& config, std::shared_ptr<const Dataset> dataset) {
  config.validate();
  TrainState s;
  s.config = config;
  s.dataset = std::move(dataset);
  if (s.dataset->tokens != config.tokens || s.dataset->feature_dim != config.feature_dim ||
      s.dataset->image_channels != config.image_channels || s.dataset->image_tokens() != config.image_tokens()) {
    throw ConfigError("dataset dimensions do not match the config");
  }
  s.model = make_backbone(config, config.seed);
  s.projection = init_projection(config.feature_dim, config.proj_channels, config.seed, config.tokens,
                                 config.bn_pool_tokens);
  s.projection.momentum = config.bn_momentum;
  s.projection.eps = config.bn_eps;
  s.projection.normalize = !config.ablations.no_bn;
  if (config.ablations.fixed_pca) {
    std::vector<Tensor> feats;
    for (const auto& smp : s.dataset->samples) feats.push_back(smp.z0);
    s.pca = fit_pca(feats, config.proj_channels);
    s.projection.weight = s.pca->components;  // constant: never updated
  }
  s.model_slots.resize(s.model->params().size());
  for (const auto& t : s.model->params().tensors()) s.ema.push_back(t.values());
  return s;
}

inline TrainState init_train_state(const TrainConfig& config) {
  return init_train_state(config, std::make_shared<const Dataset>(make_dataset(config, config.data_seed)));
}

/// Losses on the tape for one step; `projection` is updated in training mode.
struct StepGraph {
  Tensor z_tilde;
  Tensor image, rep, reg, total;
  LossBreakdown breakdown;
};

inline StepGraph build_step(const TrainState& s, ProjectionState& projection, const Batch& batch, std::size_t step) {
  const TrainConfig& c = s.config;
  const std::size_t B = batch.labels.size();
  Rng time_rng = stream(c.seed, Stream::kTime, step);
  const Tensor t = sample_t(B, c.time_sampler, time_rng);
  std::vector<std::size_t> labels = batch.labels;
  for (auto& l : labels)
    if (time_rng.uniform() < kLabelDropout) l = s.model->null_label();

  StepGraph g;
  g.z_tilde = project(projection, batch.z0, true);
  Rng noise_rng = stream(c.seed, Stream::kNoise, step);
  const NoisyPair pair = interpolate(batch.x0, g.z_tilde, t, noise_rng);
  const Velocities v = s.model->forward(pair.x_t, pair.z_t, t, labels);
  const FlowLosses fl = flow_losses(v.v_x, v.v_z, pair, batch.x0, g.z_tilde, !c.ablations.no_sg);
  g.image = fl.image;
  g.rep = fl.rep;
  g.reg = regularize(RegConfig::from(c), g.z_tilde, projection.weight);
  g.total = add(add(g.image, scale(g.rep, c.lambda_z)), scale(g.reg, c.lambda_reg));
  g.breakdown.l_image = g.image.item();
  g.breakdown.l_rep = g.rep.item();
  g.breakdown.l_reg = g.reg.item();
  g.breakdown.lambda_z = c.lambda_z;
  g.breakdown.lambda_reg = c.lambda_reg;
  g.breakdown.total = g.total.item();
  return g;
}

/// Loss of the current state at `step` without updating anything.
inline LossBreakdown evaluate_step(const TrainState& s, std::size_t step) {
  ProjectionState scratch = s.projection;
  const auto idx = batch_indices(s.config, s.dataset->samples.size(), step);
  NoGradGuard no_grad;
  return build_step(s, scratch, make_batch(*s.dataset, idx), step).breakdown;
}

inline std::string describe_halt(const TrainState& s, const LossBreakdown& l, std::size_t step) {
  double wnorm = 0.0;
  for (double v : s.projection.weight.values()) wnorm += v * v;
  std::ostringstream os;
  os.precision(17);
  os << "{\"step\": " << step << ", \"l_image\": \"" << l.l_image << "\", \"l_rep\": \"" << l.l_rep
     << "\", \"l_reg\": \"" << l.l_reg << "\", \"total\": \"" << l.total << "\", \"proj_weight_norm\": \""
     << std::sqrt(wnorm) << "\"}";
  return os.str();
}

/// One AdamW update of the denoiser and (unless frozen) the projection.
/// Throws NumericError when the loss or a gradient is non-finite.
inline LossBreakdown train_step(TrainState& s, const Batch& batch, std::size_t step) {
  const TrainConfig& c = s.config;
  ProjectionState next_proj = s.projection;
  StepGraph g;
  try {
    g = build_step(s, next_proj, batch, step);
  } catch (const NumericError& e) {
    throw NumericError("non-finite forward pass at step " + std::to_string(step) + ": " + e.what());
  }
  if (!std::isfinite(g.breakdown.total)) {
    throw NumericError("non-finite loss at step " + std::to_string(step) + ": " + describe_halt(s, g.breakdown, step));
  }
  const Gradients grads = backward(g.total);

  ParamStore& params = s.model->params();
  std::vector<std::vector<double>> updated(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<double> grad = grads.of(params.at(i));
    for (double v : grad)
      if (!std::isfinite(v)) throw NumericError("non-finite gradient for " + params.name(i) + ": " + describe_halt(s, g.breakdown, step));
    updated[i] = params.at(i).values();
    s.optimizer.step(updated[i], grad, s.model_slots[i], c.lr, step + 1);
  }
  if (!s.projection_frozen()) {
    std::vector<double> w = next_proj.weight.values();
    s.optimizer.step(w, grads.of(next_proj.weight), s.proj_slot, schedule_lr_proj(step, c), step + 1);
    for (double v : w)
      if (!std::isfinite(v)) throw NumericError("non-finite projection weight: " + describe_halt(s, g.breakdown, step));
    next_proj.weight = Tensor::parameter(next_proj.weight.shape(), std::move(w));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params.replace(i, std::move(updated[i]));
    ema_update(s.ema[i], params.at(i).values(), c.ema_decay);
  }
  s.projection = std::move(next_proj);
  s.step = step + 1;
  return g.breakdown;
}

inline LossBreakdown train_step(TrainState& s) {
  const auto idx = batch_indices(s.config, s.dataset->samples.size(), s.step);
  return train_step(s, make_batch(*s.dataset, idx), s.step);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Projected features of the first `eval_samples` dataset samples in eval
/// mode, [N, L, d].
inline Tensor eval_features(const TrainState& s) {
  const std::size_t n = std::min(s.config.eval_samples, s.dataset->samples.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  ProjectionState proj = s.projection;
  NoGradGuard no_grad;
  return project(proj, make_batch(*s.dataset, idx).z0, false);
}

/// The same samples through the fixed PCA baseline, standardized per channel
/// with their own statistics.
inline Tensor pca_features(const Dataset& ds, std::size_t channels, std::size_t n) {
  std::vector<Tensor> feats;
  for (const auto& smp : ds.samples) feats.push_back(smp.z0);
  const PcaProjection pca = fit_pca(feats, channels);
  n = std::min(n, ds.samples.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  ProjectionState proj;
  proj.weight = pca.components;
  proj.running_mean.assign(channels, 0.0);
  proj.running_var.assign(channels, 1.0);
  NoGradGuard no_grad;
  return project(proj, make_batch(ds, idx).z0, true);
}

inline MetricReport evaluate_metrics(const TrainState& s) {
  return metric_report(eval_features(s), s.config.r_near, s.config.r_far);
}

/// Generates `n` samples from the EMA denoiser with class labels cycling
/// through 0..K-1.
inline JointState generate(const TrainState& s, std::size_t n, std::uint64_t seed, double cfg_scale,
                           std::optional<std::size_t> label = std::nullopt) {
  const auto model = s.ema_model();
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = label ? *label : i % s.config.classes;
  SampleConfig sc;
  sc.steps = s.config.sample_steps;
  sc.method = s.config.sampler;
  sc.cfg_scale = cfg_scale;
  sc.sigma0 = s.config.sigma0;
  sc.seed = seed;
  return sample(velocity_of(*model), labels, model->null_label(), {s.config.image_tokens(), s.config.image_channels},
                {s.config.tokens, s.config.proj_channels}, sc);
}

/// Gaussian Frechet distance between generated and real images (flattened
/// token grids), unguided.
inline double image_frechet(const TrainState& s, std::size_t n, std::uint64_t seed) {
  const JointState gen = generate(s, n, seed, 1.0);
  const std::size_t width = s.config.image_tokens() * s.config.image_channels;
  const std::size_t m = s.dataset->samples.size();
  std::vector<double> real;
  real.reserve(m * width);
  for (const auto& smp : s.dataset->samples) real.insert(real.end(), smp.x0.values().begin(), smp.x0.values().end());
  return frechet_gaussian(Tensor::constant({n, width}, gen.x.values()), Tensor::constant({m, width}, std::move(real)));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "CRCK" | u32 version | u64 config hash | u64 step | u32 entries
//   entries: u32 name length, name bytes, u32 rank, u64 dims..., f64 values...

inline constexpr std::array<char, 4> kCheckpointMagic = {'C', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline void save_checkpoint(const TrainState& s, const std::string& path) {
  std::vector<NamedArray> entries;
  const ParamStore& p = s.model->params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    entries.push_back({"model/" + p.name(i), p.at(i).shape(), p.at(i).values()});
    entries.push_back({"ema/" + p.name(i), p.at(i).shape(), s.ema[i]});
    const auto& slot = s.model_slots[i];
    entries.push_back({"adam_m/" + p.name(i), {slot.m.size()}, slot.m});
    entries.push_back({"adam_v/" + p.name(i), {slot.v.size()}, slot.v});
  }
  entries.push_back({"proj/weight", s.projection.weight.shape(), s.projection.weight.values()});
  entries.push_back({"proj/running_mean", {s.projection.running_mean.size()}, s.projection.running_mean});
  entries.push_back({"proj/running_var", {s.projection.running_var.size()}, s.projection.running_var});
  entries.push_back({"adam_m/proj.weight", {s.proj_slot.m.size()}, s.proj_slot.m});
  entries.push_back({"adam_v/proj.weight", {s.proj_slot.v.size()}, s.proj_slot.v});

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic.data(), 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, config_hash(s.config));
  detail::put_u64(os, s.step);
  detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u64(os, d);
    for (double v : e.values) detail::put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

/// Restores a state saved by `save_checkpoint` for the same config.
inline TrainState load_checkpoint(const TrainConfig& config, const std::string& path,
                                  std::shared_ptr<const Dataset> dataset = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw IoError(path + ": not a checkpoint");
  if (detail::get_u32(is) != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
  if (detail::get_u64(is) != config_hash(config)) throw ConfigError(path + ": checkpoint was written for a different config");
  const std::size_t step = detail::get_u64(is);
  const std::size_t count = detail::get_u32(is);
  std::unordered_map<std::string, NamedArray> entries;
  for (std::size_t k = 0; k < count; ++k) {
    NamedArray e;
    e.name.resize(detail::get_u32(is));
    if (!is.read(e.name.data(), static_cast<std::streamsize>(e.name.size()))) throw IoError(path + ": truncated");
    e.shape.resize(detail::get_u32(is));
    for (auto& d : e.shape) d = detail::get_u64(is);
    e.values.resize(numel(e.shape));
    for (double& v : e.values) v = detail::get_f64(is);
    entries.emplace(e.name, std::move(e));
  }
  auto take = [&](const std::string& name) -> std::vector<double>& {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError(path + ": missing entry " + name);
    return it->second.values;
  };

  TrainState s = dataset ? init_train_state(config, std::move(dataset)) : init_train_state(config);
  ParamStore& p = s.model->params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& values = take("model/" + p.name(i));
    if (values.size() != p.at(i).size()) throw IoError(path + ": shape mismatch for " + p.name(i));
    p.replace(i, values);
    s.ema[i] = take("ema/" + p.name(i));
    s.model_slots[i].m = take("adam_m/" + p.name(i));
    s.model_slots[i].v = take("adam_v/" + p.name(i));
  }
  auto& w = take("proj/weight");
  if (w.size() != s.projection.weight.size()) throw IoError(path + ": projection shape mismatch");
  s.projection.weight = s.projection_frozen() ? Tensor::constant(s.projection.weight.shape(), w)
                                              : Tensor::parameter(s.projection.weight.shape(), w);
  s.projection.running_mean = take("proj/running_mean");
  s.projection.running_var = take("proj/running_var");
  s.proj_slot.m = take("adam_m/proj.weight");
  s.proj_slot.v = take("adam_v/proj.weight");
  s.step = step;
  return s;
}

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
  std::filesystem::path dir;
  std::vector<LossBreakdown> losses;
  std::vector<std::size_t> milestone_steps;
  std::vector<MetricReport> milestones;
  bool halted = false;
  std::string halt_reason;
};

/// Step of milestone k: evenly spaced over [0, steps], first one at
/// initialization.
inline std::size_t milestone_step(const TrainConfig& c, std::size_t k) { return k * c.steps / (c.milestones - 1); }

inline std::string milestone_dir(std::size_t k) { return "milestone_" + std::to_string(k); }

/// Trains `config` to completion in `dir`:
///   config.txt, losses.csv, milestone_<k>/{checkpoint.bin, metrics.json}
///   for k = 0..milestones-1,
///   curves.json, manifest.json (and halt.json if training diverged).
/// When `state` is given training continues from it (resume).
inline RunResult run(const TrainConfig& config, const std::filesystem::path& dir,
                     std::optional<TrainState> state = std::nullopt) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  const RunLock lock(dir);
  RunManifest manifest(config, dir);
  write_text(dir / "config.txt", serialize(config));

  TrainState s = state ? std::move(*state) : init_train_state(config);
  RunResult result;
  result.dir = dir;
  const bool resuming = s.step > 0;
  std::ofstream csv(dir / "losses.csv", resuming ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (dir / "losses.csv").string());
  if (!resuming) csv << "step,l_image,l_rep,l_reg,total,lr_proj\n";
  csv.precision(17);

  std::size_t next = 0;
  while (next < config.milestones && milestone_step(config, next) < s.step) ++next;
  auto record_milestone = [&] {
    const fs::path mdir = dir / milestone_dir(next);
    fs::create_directories(mdir, ec);
    if (ec) throw IoError("cannot create " + mdir.string());
    save_checkpoint(s, (mdir / "checkpoint.bin").string());
    const MetricReport m = evaluate_metrics(s);
    write_text(mdir / "metrics.json", metrics_json(m, s.step).dump(2) + "\n");
    result.milestone_steps.push_back(s.step);
    result.milestones.push_back(m);
    ++next;
  };
  try {
    if (next < config.milestones && milestone_step(config, next) == s.step) record_milestone();
    while (s.step < config.steps) {
      const std::size_t step = s.step;
      const double lr_proj = schedule_lr_proj(step, config);
      const LossBreakdown l = train_step(s);
      result.losses.push_back(l);
      csv << step << ',' << l.l_image << ',' << l.l_rep << ',' << l.l_reg << ',' << l.total << ',' << lr_proj << '\n';
      if (next < config.milestones && milestone_step(config, next) == s.step) record_milestone();
    }
  } catch (const NumericError& e) {
    result.halted = true;
    result.halt_reason = e.what();
    write_text(dir / "halt.json", nlohmann::json{{"step", s.step}, {"reason", e.what()}}.dump(2) + "\n");
  }
  csv.close();
  if (!result.halted) emit_curves(dir);
  manifest.finish();
  return result;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationFlag { kNoSg, kNoBn, kRegNone, kFixedPca };

inline AblationFlag parse_ablation(const std::string& s) {
  if (s == "no_sg") return AblationFlag::kNoSg;
  if (s == "no_bn") return AblationFlag::kNoBn;
  if (s == "reg_none") return AblationFlag::kRegNone;
  if (s == "fixed_pca") return AblationFlag::kFixedPca;
  throw ConfigError("ablate: unknown flag '" + s + "' (no_sg|no_bn|reg_none|fixed_pca)");
}

inline TrainConfig with_ablation(TrainConfig c, AblationFlag flag) {
  switch (flag) {
    case AblationFlag::kNoSg: c.ablations.no_sg = true; break;
    case AblationFlag::kNoBn: c.ablations.no_bn = true; break;
    case AblationFlag::kRegNone: c.ablations.reg_none = true; break;
    case AblationFlag::kFixedPca: c.ablations.fixed_pca = true; break;
  }
  return c;
}

struct RunSummary {
  bool halted = false;
  double final_loss = 0.0;
  double offdiag_cov_mass = 0.0;
  double effective_rank = 0.0;
  double frechet = 0.0;
  MetricReport metrics;
};

struct AblationReport {
  RunSummary baseline;
  RunSummary ablated;
};

/// Trains without touching the filesystem and summarizes the final state.
inline RunSummary train_and_summarize(const TrainConfig& config, std::shared_ptr<const Dataset> dataset = nullptr) {
  TrainState s = dataset ? init_train_state(config, std::move(dataset)) : init_train_state(config);
  RunSummary out;
  try {
    while (s.step < config.steps) out.final_loss = train_step(s).total;
  } catch (const NumericError&) {
    out.halted = true;
    out.final_loss = std::numeric_limits<double>::quiet_NaN();
    out.frechet = std::numeric_limits<double>::infinity();
    return out;
  }
  out.metrics = evaluate_metrics(s);
  out.offdiag_cov_mass = out.metrics.offdiag_cov_mass;
  out.effective_rank = out.metrics.effective_rank;
  out.frechet = image_frechet(s, config.eval_samples, config.seed + 7919);
  return out;
}

/// Baseline and ablated runs with identical seeds and data.
inline AblationReport ablate(const TrainConfig& config, AblationFlag flag) {
  auto data = std::make_shared<const Dataset>(make_dataset(config, config.data_seed));
  return {train_and_summarize(config, data), train_and_summarize(with_ablation(config, flag), data)};
}

}  // namespace coredi
