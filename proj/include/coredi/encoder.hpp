#pragma once

// Synthetic data distribution, the frozen feature encoder standing in for a
// pretrained vision backbone, the fixed-PCA baseline projection and the
// binary dataset format.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coredi/autodiff.hpp"
#include "coredi/config.hpp"
#include "coredi/rng.hpp"

namespace coredi {

struct JointSample {
  Tensor x0;  // [image_tokens, C_img]
  Tensor z0;  // [tokens, D]
  std::size_t label = 0;
};

/// Fixed random per-token affine map C_img -> D followed by tanh. The weights
/// are constants: no loss can ever produce a gradient for them.
class FrozenEncoder {
 public:
  FrozenEncoder(std::size_t in_channels, std::size_t feature_dim, std::uint64_t seed) {
    Rng rng = stream(seed, Stream::kData, 0xE5C0DE);
    const double gain = 1.0 / std::sqrt(static_cast<double>(in_channels));
    std::vector<double> w = rng.normal_vector(in_channels * feature_dim);
    for (double& v : w) v *= gain;
    std::vector<double> b = rng.normal_vector(feature_dim);
    for (double& v : b) v *= 0.5;
    weight_ = Tensor::constant({in_channels, feature_dim}, std::move(w));
    bias_ = Tensor::constant({feature_dim}, std::move(b));
  }

  std::size_t in_channels() const { return weight_.dim(0); }
  std::size_t feature_dim() const { return weight_.dim(1); }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  /// x [..., C_img] -> [..., D].
  Tensor encode(const Tensor& x) const {
    if (x.rank() < 1 || x.shape().back() != in_channels()) {
      throw DimensionError("encode expects [..., " + std::to_string(in_channels()) + "], got " + to_string(x.shape()));
    }
    return tanh(add(matmul(stop_gradient(x), weight_), bias_));
  }

  /// Spectral norm of the affine map; tanh is 1-Lipschitz so this bounds the
  /// encoder's Lipschitz constant.
  double lipschitz_bound() const {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
        weight_.values().data(), static_cast<Eigen::Index>(in_channels()), static_cast<Eigen::Index>(feature_dim()));
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    return svd.singularValues()(0);
  }

 private:
  Tensor weight_;
  Tensor bias_;
};

/// 2x2 average pooling over a square token grid: [.., (2s)^2, C] -> [.., s^2, C].
inline Tensor pooling_matrix(std::size_t coarse_side) {
  const std::size_t fine_side = 2 * coarse_side;
  const std::size_t coarse = coarse_side * coarse_side, fine = fine_side * fine_side;
  std::vector<double> m(coarse * fine, 0.0);
  for (std::size_t r = 0; r < fine_side; ++r)
    for (std::size_t c = 0; c < fine_side; ++c) m[((r / 2) * coarse_side + c / 2) * fine + r * fine_side + c] = 0.25;
  return Tensor::constant({coarse, fine}, std::move(m));
}

/// Nearest-neighbour upsampling over a square token grid: [s^2] -> [(2s)^2].
inline Tensor upsampling_matrix(std::size_t coarse_side) {
  const std::size_t fine_side = 2 * coarse_side;
  const std::size_t coarse = coarse_side * coarse_side, fine = fine_side * fine_side;
  std::vector<double> m(fine * coarse, 0.0);
  for (std::size_t r = 0; r < fine_side; ++r)
    for (std::size_t c = 0; c < fine_side; ++c) m[(r * fine_side + c) * coarse + (r / 2) * coarse_side + c / 2] = 1.0;
  return Tensor::constant({fine, coarse}, std::move(m));
}

struct Dataset {
  std::size_t tokens = 0;
  std::size_t image_channels = 0;
  std::size_t feature_dim = 0;
  std::size_t classes = 0;
  std::size_t image_scale = 1;  // image grid side / feature grid side
  std::vector<JointSample> samples;

  std::size_t image_tokens() const { return tokens * image_scale * image_scale; }
};

namespace detail {

// Smooth class/sample fields: a handful of low-frequency plane waves.
struct Wave {
  double kx, ky, phase, amp;
};

inline double eval_waves(const std::vector<Wave>& waves, double u, double v) {
  double s = 0.0;
  for (const auto& w : waves) s += w.amp * std::cos(2.0 * std::numbers::pi * (w.kx * u + w.ky * v) + w.phase);
  return s;
}

inline std::vector<Wave> random_waves(Rng& rng, std::size_t count, double amp) {
  std::vector<Wave> out;
  for (std::size_t i = 0; i < count; ++i) {
    Wave w;
    w.kx = static_cast<double>(rng.index(3)) * 0.5;
    w.ky = static_cast<double>(rng.index(3)) * 0.5;
    if (w.kx == 0.0 && w.ky == 0.0) w.kx = 0.5;
    w.phase = 2.0 * std::numbers::pi * rng.uniform();
    w.amp = amp * (0.5 + rng.uniform());
    out.push_back(w);
  }
  return out;
}

}  // namespace detail

// Generative model of the synthetic images: per class and channel a smooth
// mean field, per sample a smooth random field, plus white token noise.
inline constexpr double kClassFieldAmplitude = 1.0;
inline constexpr double kSampleFieldAmplitude = 0.5;
inline constexpr double kTokenNoise = 0.5;

/// Draws `config.dataset_size` samples from a K-class Gaussian-mixture token
/// model with class-dependent spatial mean fields. Pure function of
/// (config dims, seed).
inline Dataset make_dataset(const TrainConfig& config, std::uint64_t seed) {
  const std::size_t side = config.grid_side();
  if (config.classes < 1) throw ConfigError("classes: must be >= 1");
  if (side * side != config.tokens || config.tokens == 0) throw ConfigError("tokens: must be a perfect square");
  if (config.image_channels == 0 || config.feature_dim == 0) throw ConfigError("dimensions must be positive");

  Dataset ds;
  ds.tokens = config.tokens;
  ds.image_channels = config.image_channels;
  ds.feature_dim = config.feature_dim;
  ds.classes = config.classes;
  ds.image_scale = config.mode == Mode::kPixel ? 2 : 1;
  const std::size_t C = config.image_channels;
  const std::size_t image_side = side * ds.image_scale;
  const std::size_t image_tokens = image_side * image_side;

  Rng class_rng = stream(seed, Stream::kData, 1);
  std::vector<std::vector<std::vector<detail::Wave>>> class_fields(config.classes);
  for (auto& per_channel : class_fields) {
    per_channel.resize(C);
    for (auto& waves : per_channel) waves = detail::random_waves(class_rng, 2, kClassFieldAmplitude);
  }

  const FrozenEncoder encoder(C, config.feature_dim, seed);
  const Tensor pool = ds.image_scale == 2 ? pooling_matrix(side) : Tensor();
  Rng rng = stream(seed, Stream::kData, 2);
  ds.samples.reserve(config.dataset_size);
  for (std::size_t n = 0; n < config.dataset_size; ++n) {
    JointSample s;
    s.label = rng.index(config.classes);
    std::vector<std::vector<detail::Wave>> sample_field(C);
    for (auto& waves : sample_field) waves = detail::random_waves(rng, 1, kSampleFieldAmplitude);
    std::vector<double> x(image_tokens * C);
    for (std::size_t r = 0; r < image_side; ++r) {
      for (std::size_t c = 0; c < image_side; ++c) {
        const double u = (static_cast<double>(c) + 0.5) / static_cast<double>(image_side);
        const double v = (static_cast<double>(r) + 0.5) / static_cast<double>(image_side);
        for (std::size_t ch = 0; ch < C; ++ch) {
          x[(r * image_side + c) * C + ch] = detail::eval_waves(class_fields[s.label][ch], u, v) +
                                             detail::eval_waves(sample_field[ch], u, v) + kTokenNoise * rng.normal();
        }
      }
    }
    s.x0 = Tensor::constant({image_tokens, C}, std::move(x));
    s.z0 = encoder.encode(ds.image_scale == 2 ? matmul(pool, s.x0) : s.x0);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// The encoder used by `make_dataset(config, seed)`.
inline FrozenEncoder dataset_encoder(const TrainConfig& config, std::uint64_t seed) {
  return FrozenEncoder(config.image_channels, config.feature_dim, seed);
}

// ---------------------------------------------------------------------------
// Fixed PCA baseline

struct PcaProjection {
  Tensor components;  // [D, d], orthonormal columns, descending variance
  Tensor mean;        // [D]
  std::vector<double> eigenvalues;  // top-d covariance eigenvalues

  /// (z - mean) P for z [..., D].
  Tensor apply(const Tensor& z) const { return matmul(sub(z, mean), components); }
};

/// Top-`d` principal directions of the stacked token features (plain centred
/// projection, no whitening). Each component's largest-magnitude entry is
/// made positive.
inline PcaProjection fit_pca(const std::vector<Tensor>& features, std::size_t d) {
  if (features.empty()) throw ContractError("fit_pca: no features");
  const std::size_t D = features.front().shape().back();
  if (d == 0 || d > D) throw ConfigError("fit_pca: d must be in [1, D]");
  std::size_t rows = 0;
  for (const auto& f : features) {
    if (f.shape().back() != D) throw DimensionError("fit_pca: inconsistent feature width");
    rows += f.size() / D;
  }
  if (rows < d) throw ContractError("fit_pca: need at least d feature vectors");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(D));
  Eigen::Index r = 0;
  for (const auto& f : features) {
    const auto& v = f.values();
    for (std::size_t i = 0; i < v.size() / D; ++i, ++r)
      for (std::size_t j = 0; j < D; ++j) X(r, static_cast<Eigen::Index>(j)) = v[i * D + j];
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(rows);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
  const double top = std::max(values(values.size() - 1), 0.0);
  const double kth = values(static_cast<Eigen::Index>(D - d));
  if (!(top > 0.0) || kth <= 1e-12 * top) {
    throw NumericError("fit_pca: covariance rank below " + std::to_string(d));
  }
  PcaProjection pca;
  std::vector<double> comp(D * d);
  for (std::size_t k = 0; k < d; ++k) {
    Eigen::VectorXd col = eig.eigenvectors().col(static_cast<Eigen::Index>(D - 1 - k));
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    for (std::size_t j = 0; j < D; ++j) comp[j * d + k] = col(static_cast<Eigen::Index>(j));
    pca.eigenvalues.push_back(values(static_cast<Eigen::Index>(D - 1 - k)));
  }
  pca.components = Tensor::constant({D, d}, std::move(comp));
  pca.mean = Tensor::constant({D}, std::vector<double>(mu.data(), mu.data() + D));
  return pca;
}

// ---------------------------------------------------------------------------
// Binary dataset files
//
//   "CRDS" | u32 version | u32 L | u32 C_img | u32 D | u32 K | u32 N | u32 scale
//   then N records of little-endian f64: label, x0 (L*scale^2*C_img), z0 (L*D)

inline constexpr std::array<char, 4> kDatasetMagic = {'C', 'R', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[i];
  return v;
}

inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.write(kDatasetMagic.data(), 4);
  detail::put_u32(os, kDatasetVersion);
  for (std::size_t v : {ds.tokens, ds.image_channels, ds.feature_dim, ds.classes, ds.samples.size(), ds.image_scale})
    detail::put_u32(os, static_cast<std::uint32_t>(v));
  for (const auto& s : ds.samples) {
    detail::put_f64(os, static_cast<double>(s.label));
    for (double v : s.x0.values()) detail::put_f64(os, v);
    for (double v : s.z0.values()) detail::put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kDatasetMagic) throw IoError(path + ": not a CRDS file");
  if (detail::get_u32(is) != kDatasetVersion) throw IoError(path + ": unsupported CRDS version");
  Dataset ds;
  ds.tokens = detail::get_u32(is);
  ds.image_channels = detail::get_u32(is);
  ds.feature_dim = detail::get_u32(is);
  ds.classes = detail::get_u32(is);
  const std::size_t n = detail::get_u32(is);
  ds.image_scale = detail::get_u32(is);
  const std::size_t nx = ds.image_tokens() * ds.image_channels, nz = ds.tokens * ds.feature_dim;
  try {
    ds.samples.reserve(n);
  } catch (const std::exception&) {
    throw IoError(path + ": corrupt sample count");
  }
  for (std::size_t i = 0; i < n; ++i) {
    JointSample s;
    const double label = detail::get_f64(is);
    if (!(label >= 0.0) || label >= static_cast<double>(ds.classes)) throw IoError(path + ": label out of range");
    s.label = static_cast<std::size_t>(label);
    std::vector<double> x(nx), z(nz);
    for (double& v : x) v = detail::get_f64(is);
    for (double& v : z) v = detail::get_f64(is);
    s.x0 = Tensor::constant({ds.image_tokens(), ds.image_channels}, std::move(x));
    s.z0 = Tensor::constant({ds.tokens, ds.feature_dim}, std::move(z));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace coredi
