#pragma once

// Shared helpers for the test suite: small random tensors and the
// central-difference oracle.

#include <vector>

#include "coredi/autodiff.hpp"
#include "coredi/gradcheck.hpp"
#include "coredi/rng.hpp"

namespace oracle {

using coredi::Tensor;

inline Tensor random_param(coredi::Shape shape, coredi::Rng& rng, double scale = 1.0) {
  auto v = rng.normal_vector(coredi::numel(shape));
  for (double& x : v) x *= scale;
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor random_const(coredi::Shape shape, coredi::Rng& rng, double scale = 1.0) {
  auto v = rng.normal_vector(coredi::numel(shape));
  for (double& x : v) x *= scale;
  return Tensor::constant(std::move(shape), std::move(v));
}

using coredi::max_gradient_error;
using coredi::numeric_gradient;
using coredi::relative_error;

}  // namespace oracle
