// SPDX-License-Identifier: Apache-2.0
//
// Small fully connected network with exact reverse-mode gradients. Samples
// are rows: a batch X is (batch x d_in) and each layer computes
//   H = X W^T + 1 b^T + s (X A^T) B^T
// when an adapter is attached.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tlora/adapter.hpp"
#include "tlora/linalg.hpp"

namespace tlora {

enum class Activation { kRelu, kTanh, kIdentity };
enum class LossKind { kMse, kCrossEntropy };

std::string_view to_string(Activation a);
std::string_view to_string(LossKind l);
Activation activation_from_string(std::string_view name);
LossKind loss_kind_from_string(std::string_view name);

struct Network {
  std::vector<LinearLayer> layers;
  Activation activation = Activation::kRelu;
  LossKind loss = LossKind::kMse;

  /// Throws kInvalidInput on broken chaining, duplicate names or empty nets.
  void validate() const;
  std::size_t d_in() const { return layers.front().d_in(); }
  std::size_t d_out() const { return layers.back().d_out(); }
  const LinearLayer& layer(std::string_view name) const;
  LinearLayer& layer(std::string_view name);
};

/// Rows are samples. For cross entropy, y is either one-hot (batch x classes)
/// or a single column of class indices.
struct Batch {
  Matrix x;
  Matrix y;
};

struct ForwardTrace {
  const Network* net = nullptr;
  const AdapterSet* adapters = nullptr;  // may be null

  std::vector<Matrix> inputs;          // X_i per layer
  std::vector<Matrix> pre_activations; // H_i per layer
  std::vector<Matrix> projections;     // X_i A_i^T, empty when unadapted
  Matrix output;
  Matrix output_grad;  // dL/dOutput
  double loss = 0.0;
};

struct LayerGrad {
  Matrix dw;
  Vector db;  // empty when the layer has no bias
};

struct AdapterGrad {
  std::string layer_name;
  Matrix db;  // dL/dB
  Matrix da;  // dL/dA, empty when the adapter is frozen
};

struct GradientSet {
  std::vector<LayerGrad> layers;
  std::vector<AdapterGrad> adapters;  // same order as the AdapterSet
};

/// The trace keeps pointers to `net` and `adapters`; both must outlive it.
ForwardTrace forward(const Network& net, const Batch& batch, const AdapterSet* adapters = nullptr);

/// Output only, no trace or loss.
Matrix predict(const Network& net, const Matrix& x, const AdapterSet* adapters = nullptr);

GradientSet backward(const ForwardTrace& trace);

struct GradCheckBlock {
  std::string name;  // e.g. "fc1.W", "fc1.b", "fc1.B", "fc1.A"
  std::size_t coords = 0;
  double max_rel_error = 0.0;
};

/// Central differences on up to `max_coords` seeded coordinates per parameter
/// block, relative error against max(|analytic|, |numeric|, 1e-8).
std::vector<GradCheckBlock> fd_gradcheck(const Network& net, const AdapterSet& adapters,
                                         const Batch& batch, double step,
                                         std::uint64_t seed = 42, std::size_t max_coords = 200);

/// Random network with the given layer widths, named fc1..fcL.
Network make_mlp(const std::vector<std::size_t>& dims, Activation activation, LossKind loss,
                 std::uint64_t seed, bool with_bias = true);

}  // namespace tlora
