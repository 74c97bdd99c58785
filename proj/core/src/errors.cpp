#include "ecov/errors.hpp"

namespace ecov {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::mixed_dataset_kinds: return "mixed_dataset_kinds";
    case ErrorCode::non_binary_response: return "non_binary_response";
    case ErrorCode::non_finite_value: return "non_finite_value";
    case ErrorCode::invalid_noise_variance: return "invalid_noise_variance";
    case ErrorCode::not_symmetric: return "not_symmetric";
    case ErrorCode::not_positive_semidefinite: return "not_positive_semidefinite";
    case ErrorCode::rank_deficient_design: return "rank_deficient_design";
    case ErrorCode::insufficient_rows: return "insufficient_rows";
    case ErrorCode::regime_violation: return "regime_violation";
    case ErrorCode::infinite_risk_regime: return "infinite_risk_regime";
    case ErrorCode::bad_argument: return "bad_argument";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::parse_failure: return "parse_failure";
    case ErrorCode::singular_system: return "singular_system";
    case ErrorCode::cg_no_convergence: return "cg_no_convergence";
    case ErrorCode::em_likelihood_decrease: return "em_likelihood_decrease";
    case ErrorCode::newton_failure: return "newton_failure";
    case ErrorCode::nonfinite_objective: return "nonfinite_objective";
  }
  return "unknown_error";
}

}  // namespace ecov
