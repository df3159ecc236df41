// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tlora/adapter.hpp"
#include "tlora/model.hpp"

namespace tlora {

enum class OptimizerKind { kSgd, kAdamW };
enum class TrainMode { kBOnly, kAAndB, kFullFt };
enum class Schedule { kConstant, kCosine };

std::string_view to_string(OptimizerKind k);
std::string_view to_string(TrainMode m);
std::string_view to_string(Schedule s);
OptimizerKind optimizer_from_string(std::string_view name);
TrainMode train_mode_from_string(std::string_view name);
Schedule schedule_from_string(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t steps = 200;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
  std::uint64_t seed = 42;
  TrainMode mode = TrainMode::kBOnly;
  Schedule schedule = Schedule::kConstant;
};

struct OptimizerState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t t = 0;
};

/// One in-place update of every params[i] with grads[i]. State buffers are
/// zero-initialized on the first call.
void optimizer_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                    OptimizerState& state, const OptimizerConfig& cfg, double lr);

/// Learning rate at `step` (0-based) of `total`; cosine decays from lr to 0
/// at the last step.
double scheduled_lr(const TrainConfig& cfg, std::size_t step);

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;    // over all trainable tensors
  double grad_norm_b = 0.0;  // over all adapter B gradients
  double lr = 0.0;
  std::vector<double> grad_norm_b_per_adapter;
};

using MetricsHistory = std::vector<MetricsRow>;

struct TrainResult {
  MetricsHistory history;
  /// W_final - W_0 per layer, full_ft mode only.
  std::vector<Matrix> deltas;
  /// Set when a non-finite loss or gradient stopped the run; history holds
  /// every completed step.
  std::optional<std::string> failure;
};

/// Called after every optimizer update with the 0-based step index.
using StepObserver = std::function<void(std::size_t, const Network&, const AdapterSet&)>;

/// Minibatches cycle through `data` in a seeded per-epoch order. In b_only
/// mode only B moves; a_and_b also trains A of unfrozen adapters; full_ft
/// trains every layer weight (biases stay frozen) and ignores adapters.
TrainResult train_loop(Network& net, AdapterSet& adapters, const Batch& data,
                       const TrainConfig& cfg, const StepObserver& observer = {});

/// Runs full_ft on a copy of `net` and returns the per-layer weight deltas.
std::vector<Matrix> full_finetune_delta(const Network& net, const Batch& data, TrainConfig cfg);

}  // namespace tlora
