#pragma once

#include <stdexcept>
#include <string>

namespace ecov {

// machine-readable failure codes; kind_of() groups them for exit-code mapping
enum class ErrorCode {
  dimension_mismatch,
  mixed_dataset_kinds,
  non_binary_response,
  non_finite_value,
  invalid_noise_variance,
  not_symmetric,
  not_positive_semidefinite,
  rank_deficient_design,
  insufficient_rows,
  regime_violation,
  infinite_risk_regime,
  bad_argument,
  io_failure,
  parse_failure,
  singular_system,
  cg_no_convergence,
  em_likelihood_decrease,
  newton_failure,
  nonfinite_objective,
};

enum class ErrorKind { validation, numerical };

constexpr ErrorKind kind_of(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::singular_system:
    case ErrorCode::cg_no_convergence:
    case ErrorCode::em_likelihood_decrease:
    case ErrorCode::newton_failure:
    case ErrorCode::nonfinite_objective:
      return ErrorKind::numerical;
    default:
      return ErrorKind::validation;
  }
}

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorKind kind() const noexcept { return kind_of(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace ecov
