// SPDX-License-Identifier: Apache-2.0
//
// Calibration pass and budgeted rank/scale allocation.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tlora/adapter.hpp"
#include "tlora/model.hpp"

namespace tlora {

struct ModuleStats {
  std::string name;
  double importance = 0.0;  // mean |W * dL/dW|, averaged over samples
  Matrix covariance;        // sum over samples of X^T X / N
};

struct CalibrationStats {
  std::vector<ModuleStats> modules;  // network order, adaptable layers only
  std::size_t n_samples = 0;

  const ModuleStats& module(std::string_view name) const;
};

/// One forward/backward per sample on the base network (no adapters).
CalibrationStats run_calibration(const Network& net, std::span<const Batch> samples);

struct ModuleAllocation {
  std::string name;
  std::size_t rank = 0;
  double alpha = 0.0;

  double scale() const { return rank ? alpha / static_cast<double>(rank) : 0.0; }
};

struct AllocationPlan {
  std::vector<ModuleAllocation> modules;
  std::size_t r_total = 0;
  double alpha_total = 0.0;
  std::size_t r_init = 0;
  std::size_t r_min = 1;
};

/// Importance-proportional ranks summing exactly to r_total. Rounding is
/// half-to-even; the sum is then repaired one unit at a time (over budget:
/// smallest fractional remainder first, ties to the larger index; under
/// budget: largest remainder first, ties to the smaller index). Finally ranks
/// are clamped to [r_min, caps[i]] and the remainder is repaired among the
/// modules that were not clamped.
std::vector<std::size_t> allocate_ranks(std::span<const double> importance, std::size_t r_total,
                                        std::size_t r_min, std::span<const std::size_t> caps);

/// alpha_i = r_i * (alpha_total / r_init) * S_i / sum(S), so every module's
/// scale alpha_i / r_i is its importance share of alpha_total / r_init.
std::vector<double> allocate_alphas(std::span<const double> importance,
                                    std::span<const std::size_t> ranks, double alpha_total,
                                    std::size_t r_init);

struct AllocationOptions {
  std::size_t r_init = 8;
  double alpha = 16.0;  // per-module base alpha; alpha_total = L * alpha
  std::size_t r_min = 1;
  bool adapt_ranks = true;
  bool adapt_alphas = true;
};

/// Full plan for the adaptable layers of `net`. With adapt_ranks off every
/// module keeps r_init; with adapt_alphas off every module keeps alpha.
AllocationPlan plan_allocation(const Network& net, const CalibrationStats* stats,
                               const AllocationOptions& options);

/// Adapters for every module of `plan` with a non-zero rank.
AdapterSet build_adapters(const Network& net, const CalibrationStats* stats,
                          const AllocationPlan& plan, const InitOptions& init,
                          double eps = linalg::kDefaultEps);

/// wc_svd adapters with frozen A, as produced by the full calibration recipe.
AdapterSet build_tlora_adapters(const Network& net, const CalibrationStats& stats,
                                const AllocationPlan& plan, double eps = linalg::kDefaultEps);

}  // namespace tlora
