// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tlora/adapter.hpp"
#include "tlora/task.hpp"
#include "tlora/train.hpp"

namespace tlora {

enum class AdapterMode { kLora, kTlora, kWSvd, kTheoretical };

std::string_view to_string(AdapterMode m);
AdapterMode adapter_mode_from_string(std::string_view s);
InitKind init_kind_for(AdapterMode m);

struct AdapterConfig {
  AdapterMode mode = AdapterMode::kTlora;
  std::size_t r_init = 4;
  double alpha = 8.0;
  bool adapt_ra = true;
  bool adapt_sa = true;
  bool freeze_a = true;
  std::size_t r_min = 1;
  double eps = 1e-6;
  std::optional<double> gaussian_std;
};

struct CalibConfig {
  std::size_t n_samples = 32;
};

/// One row of the ablation matrix.
struct VariantSpec {
  std::string name;
  InitKind init = InitKind::kRandomGaussian;
  bool adapt_ra = false;
  bool adapt_sa = false;
  bool freeze_a = false;
};

/// LoRA / +RA / +SA / +Init / +Init+RA / +Init+SA / +RA+SA / TLoRA. Variants
/// without +Init use a trainable random-Gaussian A; variants with it use a
/// frozen wc_svd A.
std::vector<VariantSpec> component_variants();
/// Frozen A with identical budgets: random_gaussian, w_svd, wc_svd.
std::vector<VariantSpec> init_ablation_variants();

struct CompareConfig {
  std::vector<std::uint64_t> seeds{42};
  std::string preset = "components";
  std::vector<VariantSpec> variants = component_variants();
  bool parallel = false;
};

struct OutputConfig {
  std::string dir = "out";
};

struct RunConfig {
  TaskSpec task;
  AdapterConfig adapter;
  CalibConfig calib;
  TrainConfig train;
  CompareConfig compare;
  OutputConfig output;

  void validate() const;
};

/// Malformed or invalid configuration; what() is prefixed "source:line:col:"
/// when a location is known.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

/// Normalized JSON with every field present; parse_config(dump) round-trips.
nlohmann::ordered_json to_json(const RunConfig& cfg);

/// 16 hex digits of FNV-1a over the normalized JSON.
std::string config_hash(const RunConfig& cfg);

}  // namespace tlora
