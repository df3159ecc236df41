// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "tlora/linalg.hpp"

namespace tlora {

/// Seeded generator with hand-written distributions. std::normal_distribution
/// and std::shuffle are implementation-defined, so they are avoided to keep
/// outputs identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

  Matrix gaussian(std::size_t rows, std::size_t cols, double stddev = 1.0);
  /// Haar-distributed orthogonal n x n matrix (QR of a Gaussian, sign-fixed).
  Matrix orthogonal(std::size_t n);
  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives a child seed from a parent seed and a stream label (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace tlora
