#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace coredi {

/// Deterministic random stream. Streams are keyed by an arbitrary list of
/// integers (global seed, step, purpose tag, ...) so that any step of a run can
/// be replayed without replaying the steps before it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::initializer_list<std::uint64_t> key) {
    std::vector<std::uint32_t> words;
    for (std::uint64_t k : key) {
      words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
      words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::vector<double> normal_vector(std::size_t n) {
    std::vector<double> out(n);
    for (double& v : out) v = normal();
    return out;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Purpose tags mixed into stream keys.
enum class Stream : std::uint64_t {
  kBatch = 1,
  kTime = 2,
  kNoise = 3,
  kInit = 4,
  kData = 5,
  kSample = 6,
  kProjection = 7,
};

inline Rng stream(std::uint64_t seed, Stream tag, std::uint64_t step = 0) {
  return Rng{seed, static_cast<std::uint64_t>(tag), step};
}

}  // namespace coredi
