// coredi: train, sample, evaluate and inspect runs from the command line.
//
// Exit codes: 0 success, 2 config/dimension/contract error, 3 numeric
// failure, 4 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "coredi/coredi.hpp"

namespace fs = std::filesystem;
using namespace coredi;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct TrainArgs {
  std::string config;
  std::string out = "run";
  std::string ablate;
  std::string resume;
  std::optional<std::string> reg;
  std::optional<double> gamma, lambda_reg;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

struct SampleArgs {
  std::string run_dir, config, checkpoint, out;
  std::string method;
  std::optional<std::size_t> steps;
  std::optional<double> cfg;
  std::optional<std::size_t> label;
  std::uint64_t seed = 0;
  std::size_t n = 16;
};

struct MetricsArgs {
  std::string in, report;
  std::size_t r_near = 2, r_far = 4;
};

struct GradcheckArgs {
  std::string module = "all";
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
};

struct DatasetArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

TrainConfig load_train_config(const TrainArgs& a) {
  TrainConfig c = parse_config(a.config);
  if (a.reg) {
    const std::string& r = *a.reg;
    if (r == "var") c.reg = RegKind::kVariance;
    else if (r == "orth") c.reg = RegKind::kOrthogonality;
    else if (r == "cov") c.reg = RegKind::kCovariance;
    else if (r == "none") c.reg = RegKind::kNone;
    else throw ConfigError("--reg: expected var|orth|cov|none, got '" + r + "'");
  }
  if (a.gamma) c.gamma = *a.gamma;
  if (a.lambda_reg) c.lambda_reg = *a.lambda_reg;
  if (a.seed) c.seed = *a.seed;
  if (a.steps) c.steps = *a.steps;
  if (!a.ablate.empty()) c = with_ablation(c, parse_ablation(a.ablate));
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a) {
  const TrainConfig c = load_train_config(a);
  std::optional<TrainState> state;
  if (!a.resume.empty()) state = load_checkpoint(c, a.resume);
  const RunResult r = run(c, a.out, std::move(state));
  if (r.halted) {
    std::cerr << "halted: " << r.halt_reason << "\n";
    return kExitNumeric;
  }
  const MetricReport& m = r.milestones.back();
  std::printf("run %s: %zu steps, final loss %.6f\n", a.out.c_str(), c.steps,
              r.losses.empty() ? 0.0 : r.losses.back().total);
  std::printf("lds %.6f cds %.6f rmsc %.6f offdiag %.6f effective_rank %.6f\n", m.lds, m.cds, m.rmsc,
              m.offdiag_cov_mass, m.effective_rank);
  return 0;
}

/// The checkpoint of the last milestone in a run directory.
fs::path last_checkpoint(const fs::path& run_dir, const TrainConfig& c) {
  for (std::size_t k = c.milestones; k-- > 0;) {
    const fs::path p = run_dir / milestone_dir(k) / "checkpoint.bin";
    if (fs::exists(p)) return p;
  }
  throw IoError("no checkpoint found in " + run_dir.string());
}

int cmd_sample(const SampleArgs& a) {
  TrainConfig c;
  fs::path ckpt;
  if (!a.run_dir.empty()) {
    c = parse_config((fs::path(a.run_dir) / "config.txt").string());
    ckpt = a.checkpoint.empty() ? last_checkpoint(a.run_dir, c) : fs::path(a.checkpoint);
  } else {
    if (a.config.empty() || a.checkpoint.empty()) throw ConfigError("sample: give --run, or --config with --checkpoint");
    c = parse_config(a.config);
    ckpt = a.checkpoint;
  }
  TrainState s = load_checkpoint(c, ckpt.string());
  if (!a.method.empty()) {
    if (a.method == "euler") s.config.sampler = SamplerMethod::kEuler;
    else if (a.method == "heun") s.config.sampler = SamplerMethod::kHeun;
    else if (a.method == "em" || a.method == "euler_maruyama") s.config.sampler = SamplerMethod::kEulerMaruyama;
    else throw ConfigError("--method: expected euler|heun|em, got '" + a.method + "'");
  }
  if (a.steps) s.config.sample_steps = *a.steps;
  if (a.label && *a.label >= c.classes) throw ConfigError("--label: must be < " + std::to_string(c.classes));
  const double cfg = a.cfg.value_or(c.cfg_scale);
  if (cfg < 1.0) throw ConfigError("--cfg: must be >= 1");
  if (a.n == 0) throw ConfigError("--n: must be >= 1");
  s.config.validate();

  const JointState gen = generate(s, a.n, a.seed, cfg, a.label);

  Dataset out;
  out.tokens = c.tokens;
  out.image_channels = c.image_channels;
  out.feature_dim = c.proj_channels;
  out.classes = c.classes;
  out.image_scale = c.mode == Mode::kPixel ? 2 : 1;
  const std::size_t nx = c.image_tokens() * c.image_channels, nz = c.tokens * c.proj_channels;
  for (std::size_t i = 0; i < a.n; ++i) {
    JointSample js;
    js.label = a.label ? *a.label : i % c.classes;
    js.x0 = Tensor::constant({c.image_tokens(), c.image_channels},
                             {gen.x.values().begin() + long(i * nx), gen.x.values().begin() + long((i + 1) * nx)});
    js.z0 = Tensor::constant({c.tokens, c.proj_channels},
                             {gen.z.values().begin() + long(i * nz), gen.z.values().begin() + long((i + 1) * nz)});
    out.samples.push_back(std::move(js));
  }
  write_dataset(out, a.out);
  std::printf("wrote %zu samples to %s\n", a.n, a.out.c_str());
  return 0;
}

int cmd_metrics(const MetricsArgs& a) {
  const Dataset ds = read_dataset(a.in);
  if (ds.samples.empty()) throw ConfigError(a.in + ": no samples");
  std::vector<double> z;
  for (const auto& s : ds.samples) z.insert(z.end(), s.z0.values().begin(), s.z0.values().end());
  const Tensor batch = Tensor::constant({ds.samples.size(), ds.tokens, ds.feature_dim}, std::move(z));
  const MetricReport m = metric_report(batch, a.r_near, a.r_far);
  nlohmann::json j = metrics_json(m, 0);
  j.erase("step");
  j["samples"] = ds.samples.size();
  j["tokens"] = ds.tokens;
  j["channels"] = ds.feature_dim;
  j["r_near"] = a.r_near;
  j["r_far"] = a.r_far;
  const std::string text = j.dump(2) + "\n";
  if (a.report.empty()) {
    std::cout << text;
  } else {
    write_text(a.report, text);
  }
  return 0;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto results = run_gradchecks(a.module, a.seed, a.seeds);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-12s %-34s seed %-4llu rel_err %.3e (tol %.0e)\n", r.ok() ? "ok" : "FAIL", r.module.c_str(),
                r.name.c_str(), static_cast<unsigned long long>(r.seed), r.error, r.tolerance);
    ok = ok && r.ok();
  }
  return ok ? 0 : kExitNumeric;
}

int cmd_dataset(const DatasetArgs& a) {
  const TrainConfig c = parse_config(a.config);
  const Dataset ds = make_dataset(c, a.seed.value_or(c.data_seed));
  write_dataset(ds, a.out);
  std::printf("wrote %zu samples to %s\n", ds.samples.size(), a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coredi: coupled image/representation flow matching at desk scale"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model into a run directory");
  t->add_option("--config", train.config, "Config file (key = value lines)")->required();
  t->add_option("--out", train.out, "Run directory");
  t->add_option("--ablate", train.ablate, "no_sg | no_bn | reg_none | fixed_pca");
  t->add_option("--resume", train.resume, "Checkpoint to continue from");
  t->add_option("--reg", train.reg, "var | orth | cov | none");
  t->add_option("--gamma", train.gamma, "L_var hinge threshold");
  t->add_option("--lambda-reg", train.lambda_reg, "Regularizer weight");
  t->add_option("--seed", train.seed, "Training seed");
  t->add_option("--steps", train.steps, "Training steps");

  SampleArgs sample;
  auto* s = app.add_subcommand("sample", "Generate (image, feature) pairs from a checkpoint");
  s->add_option("--run", sample.run_dir, "Run directory (uses its config and last checkpoint)");
  s->add_option("--config", sample.config, "Config file");
  s->add_option("--checkpoint", sample.checkpoint, "Checkpoint file");
  s->add_option("--method", sample.method, "euler | heun | em");
  s->add_option("--steps", sample.steps, "Integration steps");
  s->add_option("--cfg", sample.cfg, "Guidance weight on the image branch (>= 1)");
  s->add_option("--label", sample.label, "Class label for every sample (default: cycle)");
  s->add_option("--seed", sample.seed, "Sampling seed");
  s->add_option("--n", sample.n, "Number of samples");
  s->add_option("--out", sample.out, "Output file (CRDS layout)")->required();

  MetricsArgs metrics;
  auto* m = app.add_subcommand("metrics", "Spatial and collapse metrics of the features in a CRDS file");
  m->add_option("--in", metrics.in, "CRDS file")->required();
  m->add_option("--report", metrics.report, "JSON output (default stdout)");
  m->add_option("--r-near", metrics.r_near, "Near-pair Manhattan radius (exclusive)");
  m->add_option("--r-far", metrics.r_far, "Far-pair Manhattan radius (inclusive)");

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference checks of every loss gradient");
  g->add_option("--module", grad.module, "all | autodiff | projection | regularizers | flow | backbone");
  g->add_option("--seed", grad.seed, "First seed");
  g->add_option("--seeds", grad.seeds, "Number of seeds");

  DatasetArgs data;
  auto* d = app.add_subcommand("dataset", "Write the synthetic dataset of a config");
  d->add_option("--config", data.config, "Config file")->required();
  d->add_option("--out", data.out, "Output CRDS file")->required();
  d->add_option("--seed", data.seed, "Data seed (default: data_seed from the config)");

  std::string curves_dir;
  auto* c = app.add_subcommand("curves", "Rebuild curves.json of a finished run");
  c->add_option("--run", curves_dir, "Run directory")->required();

  std::string verify_dir;
  auto* v = app.add_subcommand("verify", "Check a run directory against its manifest");
  v->add_option("--run", verify_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*t) return cmd_train(train);
    if (*s) return cmd_sample(sample);
    if (*m) return cmd_metrics(metrics);
    if (*g) return cmd_gradcheck(grad);
    if (*d) return cmd_dataset(data);
    if (*c) {
      emit_curves(curves_dir);
      return 0;
    }
    if (*v) {
      const auto bad = verify_manifest(verify_dir);
      for (const auto& p : bad) std::cerr << "mismatch: " << p << "\n";
      if (!bad.empty()) throw IoError(std::to_string(bad.size()) + " file(s) do not match the manifest");
      std::printf("manifest ok\n");
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
