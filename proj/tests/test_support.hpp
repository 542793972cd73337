#pragma once

#include <random>
#include <vector>

#include "cbias/ops.hpp"
#include "cbias/tensor.hpp"

namespace cbias::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

// Entries with |x| in [0.1, 1], random sign: keeps relu kinks far from
// the finite-difference stencil.
inline Tensor off_kink_tensor(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

// Fixed random projection of `t` to a scalar, so every output entry gets
// a distinct adjoint.
inline Tensor projection(const Shape& shape, std::mt19937_64& rng) {
  return random_tensor(shape, rng, -1.0, 1.0, false);
}

inline Tensor project(const Tensor& t, const Tensor& weights) {
  return ops::sum(ops::mul(t, weights));
}

}  // namespace cbias::testing
