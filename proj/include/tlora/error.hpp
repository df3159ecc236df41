// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tlora {

enum class ErrorCode {
  kInvalidInput,
  kNumericalFailure,
  kInvalidRank,
  kNotPsd,
  kMissingCovariance,
  kInfeasibleBudget,
  kDegenerateImportance,
  kSingularGram,
  kInvalidConfig,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tlora
