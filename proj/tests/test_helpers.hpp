#pragma once

#include <random>
#include <vector>

#include "pcgan/tensor.hpp"

namespace pcgan::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor(shape, std::move(v), requires_grad);
}

inline std::vector<double> to_vector(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

// Contracts an arbitrary tensor to a scalar with fixed random weights so
// every output coordinate contributes a distinct gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(t, random_tensor(t.shape(), rng, 0.5, 1.5)));
}

}  // namespace pcgan::testing
