#pragma once

// TrainConfig and its flat `key = value` text form. Lines starting with '#'
// are comments; unknown keys, malformed values and violated invariants are
// rejected with a ConfigError that names the key.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "coredi/errors.hpp"

namespace coredi {

enum class Mode { kLatent, kPixel };
enum class RegKind { kVariance, kOrthogonality, kCovariance, kNone };
enum class CovNorm { kCorrelation, kRaw };
enum class ProjSchedule { kConstant, kCosineDecay };
enum class TimeSampler { kUniform, kLogitNormal };
enum class SamplerMethod { kEuler, kEulerMaruyama, kHeun };

struct Ablations {
  bool no_sg = false;
  bool no_bn = false;
  bool reg_none = false;
  bool fixed_pca = false;
  bool operator==(const Ablations&) const = default;
};

struct TrainConfig {
  Mode mode = Mode::kLatent;

  // Dimensions. `tokens` is the feature token grid (side^2); in pixel mode
  // the image grid is twice as fine along each side.
  std::size_t tokens = 16;
  std::size_t image_channels = 4;
  std::size_t feature_dim = 64;
  std::size_t proj_channels = 8;
  std::size_t hidden = 64;
  std::size_t blocks = 2;
  std::size_t mlp_ratio = 2;
  std::size_t decoder_hidden = 32;
  std::size_t decoder_blocks = 1;
  std::size_t classes = 4;
  std::size_t dataset_size = 1024;

  // Objective.
  double lambda_z = 1.0;
  double lambda_reg = 1.0;
  RegKind reg = RegKind::kVariance;
  double gamma = 1.0;
  double reg_eps = 1e-5;
  CovNorm cov_norm = CovNorm::kCorrelation;

  // Projection / batch norm.
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  bool bn_pool_tokens = true;

  // Optimization.
  double lr = 1e-3;
  double lr_proj = 1e-3;
  ProjSchedule proj_schedule = ProjSchedule::kConstant;
  std::size_t proj_decay_steps = 0;  // 0: use `steps`
  double ema_decay = 0.99;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  TimeSampler time_sampler = TimeSampler::kUniform;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  Ablations ablations;

  // Evaluation.
  std::size_t milestones = 5;
  std::size_t eval_samples = 256;
  std::size_t sample_steps = 50;
  SamplerMethod sampler = SamplerMethod::kEulerMaruyama;
  double cfg_scale = 1.8;
  double sigma0 = 1.0;
  std::size_t r_near = 2;
  std::size_t r_far = 4;

  bool operator==(const TrainConfig&) const = default;

  std::size_t grid_side() const { return static_cast<std::size_t>(std::lround(std::sqrt(double(tokens)))); }
  std::size_t image_tokens() const { return mode == Mode::kPixel ? tokens * 4 : tokens; }
  std::size_t decay_horizon() const { return proj_decay_steps ? proj_decay_steps : steps; }
  RegKind effective_reg() const { return ablations.reg_none ? RegKind::kNone : reg; }

  /// Defaults for the pixel-space variant: lambda_z 0.1, 16 projection
  /// channels, logit-normal time sampling, Heun sampling.
  static TrainConfig pixel_defaults() {
    TrainConfig c;
    c.mode = Mode::kPixel;
    c.lambda_z = 0.1;
    c.proj_channels = 16;
    c.time_sampler = TimeSampler::kLogitNormal;
    c.sampler = SamplerMethod::kHeun;
    return c;
  }

  void validate() const;
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<Mode> {
  static constexpr std::pair<Mode, const char*> items[] = {{Mode::kLatent, "latent"}, {Mode::kPixel, "pixel"}};
};
template <>
struct EnumNames<RegKind> {
  static constexpr std::pair<RegKind, const char*> items[] = {{RegKind::kVariance, "var"},
                                                              {RegKind::kOrthogonality, "orth"},
                                                              {RegKind::kCovariance, "cov"},
                                                              {RegKind::kNone, "none"}};
};
template <>
struct EnumNames<CovNorm> {
  static constexpr std::pair<CovNorm, const char*> items[] = {{CovNorm::kCorrelation, "correlation"},
                                                              {CovNorm::kRaw, "raw"}};
};
template <>
struct EnumNames<ProjSchedule> {
  static constexpr std::pair<ProjSchedule, const char*> items[] = {{ProjSchedule::kConstant, "constant"},
                                                                   {ProjSchedule::kCosineDecay, "cosine"}};
};
template <>
struct EnumNames<TimeSampler> {
  static constexpr std::pair<TimeSampler, const char*> items[] = {{TimeSampler::kUniform, "uniform"},
                                                                  {TimeSampler::kLogitNormal, "logit_normal"}};
};
template <>
struct EnumNames<SamplerMethod> {
  static constexpr std::pair<SamplerMethod, const char*> items[] = {{SamplerMethod::kEuler, "euler"},
                                                                    {SamplerMethod::kEulerMaruyama, "euler_maruyama"},
                                                                    {SamplerMethod::kHeun, "heun"}};
};

}  // namespace detail

template <typename E>
std::string enum_name(E value) {
  for (const auto& [v, name] : detail::EnumNames<E>::items)
    if (v == value) return name;
  return "?";
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text) {
  std::string allowed;
  for (const auto& [v, name] : detail::EnumNames<E>::items) {
    if (text == name) return v;
    allowed += allowed.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(key + ": '" + text + "' is not one of " + allowed);
}

namespace detail {

// One entry per config key; `get` renders, `set` parses.
struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty() || !std::isfinite(v)) throw ConfigError(key + ": expected a real, got '" + text + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& text) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range '" + text + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + text + "'");
}

inline std::string render_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
Field size_field(std::string key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [member, key](TrainConfig& c, const std::string& v) { c.*member = static_cast<T>(parse_uint(key, v)); }};
}

inline Field real_field(std::string key, double TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return render_real(c.*member); },
          [member, key](TrainConfig& c, const std::string& v) { c.*member = parse_real(key, v); }};
}

inline Field bool_field(std::string key, bool TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::string((c.*member) ? "true" : "false"); },
          [member, key](TrainConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

inline Field ablation_field(std::string key, bool Ablations::*member) {
  return {key, [member](const TrainConfig& c) { return std::string((c.ablations.*member) ? "true" : "false"); },
          [member, key](TrainConfig& c, const std::string& v) { c.ablations.*member = parse_bool(key, v); }};
}

template <typename E>
Field enum_field(std::string key, E TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return enum_name(c.*member); },
          [member, key](TrainConfig& c, const std::string& v) { c.*member = parse_enum<E>(key, v); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      enum_field("mode", &TrainConfig::mode),
      size_field("tokens", &TrainConfig::tokens),
      size_field("image_channels", &TrainConfig::image_channels),
      size_field("feature_dim", &TrainConfig::feature_dim),
      size_field("proj_channels", &TrainConfig::proj_channels),
      size_field("hidden", &TrainConfig::hidden),
      size_field("blocks", &TrainConfig::blocks),
      size_field("mlp_ratio", &TrainConfig::mlp_ratio),
      size_field("decoder_hidden", &TrainConfig::decoder_hidden),
      size_field("decoder_blocks", &TrainConfig::decoder_blocks),
      size_field("classes", &TrainConfig::classes),
      size_field("dataset_size", &TrainConfig::dataset_size),
      real_field("lambda_z", &TrainConfig::lambda_z),
      real_field("lambda_reg", &TrainConfig::lambda_reg),
      enum_field("reg", &TrainConfig::reg),
      real_field("gamma", &TrainConfig::gamma),
      real_field("reg_eps", &TrainConfig::reg_eps),
      enum_field("cov_norm", &TrainConfig::cov_norm),
      real_field("bn_momentum", &TrainConfig::bn_momentum),
      real_field("bn_eps", &TrainConfig::bn_eps),
      bool_field("bn_pool_tokens", &TrainConfig::bn_pool_tokens),
      real_field("lr", &TrainConfig::lr),
      real_field("lr_proj", &TrainConfig::lr_proj),
      enum_field("proj_schedule", &TrainConfig::proj_schedule),
      size_field("proj_decay_steps", &TrainConfig::proj_decay_steps),
      real_field("ema_decay", &TrainConfig::ema_decay),
      size_field("batch_size", &TrainConfig::batch_size),
      size_field("steps", &TrainConfig::steps),
      enum_field("time_sampler", &TrainConfig::time_sampler),
      size_field("seed", &TrainConfig::seed),
      size_field("data_seed", &TrainConfig::data_seed),
      ablation_field("no_sg", &Ablations::no_sg),
      ablation_field("no_bn", &Ablations::no_bn),
      ablation_field("reg_none", &Ablations::reg_none),
      ablation_field("fixed_pca", &Ablations::fixed_pca),
      size_field("milestones", &TrainConfig::milestones),
      size_field("eval_samples", &TrainConfig::eval_samples),
      size_field("sample_steps", &TrainConfig::sample_steps),
      enum_field("sampler", &TrainConfig::sampler),
      real_field("cfg_scale", &TrainConfig::cfg_scale),
      real_field("sigma0", &TrainConfig::sigma0),
      size_field("r_near", &TrainConfig::r_near),
      size_field("r_far", &TrainConfig::r_far),
  };
  return all;
}

}  // namespace detail

inline void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError(key + ": " + what);
  };
  const std::size_t side = grid_side();
  require(tokens >= 1 && side * side == tokens, "tokens", "must be a perfect square >= 1");
  require(image_channels >= 1, "image_channels", "must be >= 1");
  require(feature_dim >= 1, "feature_dim", "must be >= 1");
  require(proj_channels >= 1 && proj_channels <= feature_dim, "proj_channels", "must be in [1, feature_dim]");
  require(hidden >= 2 && hidden % 2 == 0, "hidden", "must be even and >= 2");
  require(mlp_ratio >= 1, "mlp_ratio", "must be >= 1");
  require(decoder_hidden >= 1, "decoder_hidden", "must be >= 1");
  require(classes >= 1, "classes", "must be >= 1");
  require(dataset_size >= 1, "dataset_size", "must be >= 1");
  require(lambda_z >= 0.0, "lambda_z", "must be >= 0");
  require(lambda_reg >= 0.0, "lambda_reg", "must be >= 0");
  require(gamma > 0.0, "gamma", "must be > 0");
  require(reg_eps >= 0.0, "reg_eps", "must be >= 0");
  require(bn_momentum > 0.0 && bn_momentum < 1.0, "bn_momentum", "must be in (0,1)");
  require(bn_eps > 0.0, "bn_eps", "must be > 0");
  require(lr > 0.0, "lr", "must be > 0");
  require(lr_proj > 0.0, "lr_proj", "must be > 0");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay", "must be in [0,1)");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(steps >= 1, "steps", "must be >= 1");
  require(milestones >= 2 && milestones - 1 <= steps, "milestones", "must be in [2, steps + 1]");
  require(eval_samples >= 1, "eval_samples", "must be >= 1");
  require(sample_steps >= 1, "sample_steps", "must be >= 1");
  require(cfg_scale >= 1.0, "cfg_scale", "must be >= 1");
  require(sigma0 >= 0.0, "sigma0", "must be >= 0");
  require(r_near >= 1 && r_near < r_far, "r_near", "must satisfy 1 <= r_near < r_far");
}

/// Renders every key, one `key = value` per line, in a fixed order.
inline std::string serialize(const TrainConfig& config) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

inline TrainConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!entries.emplace(key, value).second) throw ConfigError(key + ": duplicate key");
  }

  // The mode selects the default set before individual keys override it.
  TrainConfig config;
  if (auto it = entries.find("mode"); it != entries.end() && parse_enum<Mode>("mode", it->second) == Mode::kPixel) {
    config = TrainConfig::pixel_defaults();
  }
  for (const auto& [key, value] : entries) {
    bool known = false;
    for (const auto& f : detail::fields()) {
      if (f.key == key) {
        f.set(config, value);
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(key + ": unknown key");
  }
  config.validate();
  return config;
}

inline TrainConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

/// FNV-1a over the serialized form; stored in checkpoints.
inline std::uint64_t config_hash(const TrainConfig& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : serialize(config)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace coredi
