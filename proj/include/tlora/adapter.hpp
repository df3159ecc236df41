// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tlora/linalg.hpp"

namespace tlora {

/// One linear map h = x W^T + b. Biases are never trained.
struct LinearLayer {
  std::string name;
  Matrix w;                 // d_out x d_in
  std::optional<Vector> b;  // d_out
  bool adaptable = true;

  std::size_t d_out() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t d_in() const { return static_cast<std::size_t>(w.cols()); }
};

/// Low-rank update attached to one layer: W' = W0 + (alpha / r) B A.
struct AdapterState {
  std::string layer_name;
  std::size_t r = 0;
  double alpha = 0.0;
  Matrix a;  // r x d_in
  Matrix b;  // d_out x r
  bool frozen_a = true;

  double scale() const { return alpha / static_cast<double>(r); }
  std::size_t d_out() const { return static_cast<std::size_t>(b.rows()); }
  std::size_t d_in() const { return static_cast<std::size_t>(a.cols()); }
};

using AdapterSet = std::vector<AdapterState>;

const AdapterState* find_adapter(const AdapterSet& set, std::string_view layer_name);
AdapterState* find_adapter(AdapterSet& set, std::string_view layer_name);

enum class InitKind { kRandomGaussian, kWSvd, kWcSvd, kTheoretical };

std::string_view to_string(InitKind kind);
InitKind init_kind_from_string(std::string_view name);

struct InitOptions {
  InitKind kind = InitKind::kWcSvd;
  /// Std of A entries for kRandomGaussian; 1/sqrt(d_in) when unset.
  std::optional<double> gaussian_std;
  std::uint64_t seed = 42;
  bool frozen_a = true;
};

/// Builds A per the requested kind and sets B = 0:
///   random_gaussian  A_ij ~ N(0, std^2)
///   w_svd            top-r right singular vectors of W0
///   wc_svd           top-r right singular vectors of W0 C
///   theoretical      top_r_right(W0 (C + eps I)^{1/2}) (C + eps I)^{-1/2}
/// `covariance` may be null only for the first two kinds.
AdapterState init_adapter(const LinearLayer& layer, std::size_t r, double alpha,
                          const InitOptions& options, const Matrix* covariance,
                          double eps = linalg::kDefaultEps);

/// W0 + scale * B A.
Matrix merge(const AdapterState& adapter, const Matrix& w0);

std::size_t trainable_params(const AdapterState& adapter);
std::size_t trainable_params(const AdapterSet& set);

}  // namespace tlora
