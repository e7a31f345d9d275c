#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace infolens {

enum class ErrorCode {
  insufficient_samples,
  invalid_data,
  degenerate_variables,
  insufficient_permutations,
  not_positive_definite,
  invalid_rank,
  degenerate_row,
  invalid_level,
  rank_deficient_design,
  invalid_scale,
  invalid_spec,
  invalid_config,
  invalid_input,
  invalid_label,
  training_diverged,
  empty_set,
  degenerate_map,
  corrupt_file,
  invalid_geometry,
  missing_input,
  schema_violation,
  io_failure,
};

inline constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::insufficient_samples: return "insufficient-samples";
    case ErrorCode::invalid_data: return "invalid-data";
    case ErrorCode::degenerate_variables: return "degenerate-variables";
    case ErrorCode::insufficient_permutations: return "insufficient-permutations";
    case ErrorCode::not_positive_definite: return "not-positive-definite";
    case ErrorCode::invalid_rank: return "invalid-rank";
    case ErrorCode::degenerate_row: return "degenerate-row";
    case ErrorCode::invalid_level: return "invalid-level";
    case ErrorCode::rank_deficient_design: return "rank-deficient-design";
    case ErrorCode::invalid_scale: return "invalid-scale";
    case ErrorCode::invalid_spec: return "invalid-spec";
    case ErrorCode::invalid_config: return "invalid-config";
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::invalid_label: return "invalid-label";
    case ErrorCode::training_diverged: return "training-diverged";
    case ErrorCode::empty_set: return "empty-set";
    case ErrorCode::degenerate_map: return "degenerate-map";
    case ErrorCode::corrupt_file: return "corrupt-file";
    case ErrorCode::invalid_geometry: return "invalid-geometry";
    case ErrorCode::missing_input: return "missing-input";
    case ErrorCode::schema_violation: return "schema-violation";
    case ErrorCode::io_failure: return "io-failure";
  }
  return "unknown";
}

/// Process exit status for a CLI failure: 10 plus the code's position.
inline constexpr int exit_code(ErrorCode code) { return 10 + static_cast<int>(code); }

/// Exception carrying a machine-readable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace infolens
