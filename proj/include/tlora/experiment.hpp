// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs: calibrate, allocate, initialize, train, evaluate. Shared by
// the CLI and the acceptance suite.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tlora/calibrate.hpp"
#include "tlora/config.hpp"
#include "tlora/io.hpp"
#include "tlora/task.hpp"
#include "tlora/train.hpp"

namespace tlora {

/// Mean loss of the adapted network over a whole batch.
double evaluate(const Network& net, const AdapterSet* adapters, const Batch& data);

/// Calibration over the first cfg.calib.n_samples calibration batches.
CalibrationStats calibrate_task(const GeneratedTask& task, const RunConfig& cfg);

/// The variant described by cfg.adapter.
VariantSpec variant_from_config(const RunConfig& cfg);

bool needs_calibration(const VariantSpec& v);

struct InitResult {
  AllocationPlan plan;
  AdapterSet adapters;
};

InitResult init_variant(const GeneratedTask& task, const CalibrationStats* stats,
                        const RunConfig& cfg, const VariantSpec& variant, std::uint64_t init_seed);

struct VariantOutcome {
  io::CompareRow row;
  AllocationPlan plan;
  io::Checkpoint final_checkpoint;
  MetricsHistory history;
  std::optional<std::string> failure;
};

/// Trains one variant on `task`. Frozen-A variants train in b_only mode,
/// others in a_and_b, unless `mode_override` is given.
VariantOutcome run_variant(const GeneratedTask& task, const RunConfig& cfg,
                           const VariantSpec& variant, std::uint64_t seed,
                           std::optional<TrainMode> mode_override = std::nullopt);

/// Every variant for every seed; each seed regenerates the task with
/// task.seed = seed. Rows are ordered by seed, then variant.
std::vector<VariantOutcome> run_compare(const RunConfig& cfg);

/// File-system friendly variant label ("+Init+RA" -> "Init_RA").
std::string variant_slug(const std::string& name);

}  // namespace tlora
