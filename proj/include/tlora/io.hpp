// SPDX-License-Identifier: Apache-2.0
//
// File formats. Matrices are {"shape": [rows, cols], "data": [...]} with
// row-major data; doubles are written in shortest round-trip form so a
// load/save cycle is byte-exact.
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tlora/analysis.hpp"
#include "tlora/calibrate.hpp"
#include "tlora/config.hpp"
#include "tlora/task.hpp"
#include "tlora/train.hpp"

namespace tlora::io {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

struct Meta {
  std::uint64_t seed = 0;
  std::string config_hash;
  int format_version = kFormatVersion;
};

Json meta_to_json(const Meta& meta);
Meta meta_from_json(const Json& j);

struct Checkpoint {
  Meta meta;
  Network net;
  AdapterSet adapters;
};

Json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const Json& j);

/// {"meta": ..., "<module>": {"s": ..., "c": {...}}, ..., "n_samples": N}
Json stats_to_json(const CalibrationStats& stats, const Meta& meta);
CalibrationStats stats_from_json(const Json& j);

Json plan_to_json(const AllocationPlan& plan);

/// Everything gen_task produced plus the spec that produced it.
Json dataset_to_json(const GeneratedTask& task, const RunConfig& cfg, const Meta& meta);
GeneratedTask dataset_from_json(const Json& j);

Json report_to_json(const analysis::AlignmentReport& report, const Meta& meta);
void write_report_csv(std::ostream& out, const analysis::AlignmentReport& report,
                      const std::string& config_hash);

/// First line "# config_hash=<hash>", then the header
/// step,loss,grad_norm,grad_norm_B,lr.
void write_metrics_csv(std::ostream& out, const MetricsHistory& history,
                       const std::string& config_hash);

struct CompareRow {
  std::string variant;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  std::size_t trainable_params = 0;
  std::size_t steps = 0;
};

void write_compare_csv(std::ostream& out, const std::vector<CompareRow>& rows,
                       const std::string& config_hash);
std::vector<CompareRow> read_compare_csv(std::istream& in);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

Json read_json_file(const std::string& path);
/// Writes j.dump(1) plus a trailing newline.
void write_json_file(const std::string& path, const Json& j);
std::string read_text_file(const std::string& path);

}  // namespace tlora::io
