#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "hybridnorm/tensor.hpp"

namespace hybridnorm {

using Rng = std::mt19937_64;

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// The (index+1)-th output of a splitmix64 stream seeded with base.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64_mix(base + (index + 1) * kGolden);
}

inline double truncated_normal(Rng& rng, double stddev, double bound_in_std = 3.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  double z = n(rng);
  while (std::abs(z) > bound_in_std) z = n(rng);
  return z * stddev;
}

inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = n(rng);
  return m;
}

inline Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = u(rng);
  return m;
}

inline Matrix truncated_normal_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = truncated_normal(rng, stddev);
  return m;
}

}  // namespace hybridnorm
