#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ecov/model.hpp"

namespace ecov {

enum class ShrinkageKind { ls, ecov_mm, ecov_mle, edata_mm, id };

const char* to_string(ShrinkageKind kind) noexcept;

// Estimators acting directly on the sufficient statistic beta_LS under an orthogonal
// design with shared rescaled noise (beta_LS = beta + sigma * eps entrywise). All of
// them are singular-value shrinkers sharing one SVD, so the truncated (mle) and
// untruncated (mm) variants coincide bitwise whenever no factor is clipped.
Matrix shrink_sufficient(ShrinkageKind kind, const Matrix& beta_ls, double shared_variance);

struct RiskEstimate {
  double mean_loss = 0.0;
  double sem = 0.0;
  Index replicates = 0;
  ShrinkageKind estimator_kind = ShrinkageKind::ls;
};

RiskEstimate mc_risk(ShrinkageKind kind, const EffectsMatrix& beta_true, double shared_variance,
                     Index replicates, std::uint64_t seed);

struct RiskIdentityReport {
  std::string regime;  // "ecov" (D > Q+1) or "edata" (Q > D+1)
  double empirical_risk = 0.0;
  double empirical_sem = 0.0;
  double identity_value = 0.0;
  double identity_sem = 0.0;
  double mean_difference = 0.0;  // paired per-replicate loss minus identity value
  double difference_sem = 0.0;
  Index replicates = 0;
};

// both sides of the closed-form moment-estimator risk identity from one sample stream:
// empirical loss vs sigma^2 DQ - sigma^4 D (D-2-2Q) ||beta_LS^+||_F^2 (roles of D and Q
// swap in the column-exchangeable regime)
RiskIdentityReport risk_identity_check(const EffectsMatrix& beta_true, double shared_variance,
                                       Index replicates, std::uint64_t seed);

struct PairedComparison {
  std::string lhs;
  std::string rhs;
  double lhs_mean = 0.0;
  double rhs_mean = 0.0;
  double mean_difference = 0.0;  // E[loss(lhs) - loss(rhs)]
  double sem = 0.0;
  double z = 0.0;  // mean_difference / sem, 0 when sem vanishes
  bool all_zero = false;  // every paired difference was exactly 0.0
};

struct DominanceEntry {
  std::string label;
  std::vector<PairedComparison> comparisons;
};

struct DominanceReport {
  Index dim = 0;
  Index tasks = 0;
  double shared_variance = 0.0;
  Index replicates = 0;
  std::vector<DominanceEntry> entries;
};

// paired-sample comparisons at each beta in the grid; which pairs appear depends on
// the (D, Q) regime: (ls, ecov-mm) needs D > 2Q+2, (ecov-mm, ecov-mle) needs D > Q+1,
// (ls, edata-mm) needs D <= Q
DominanceReport dominance_check(const std::vector<std::pair<std::string, EffectsMatrix>>& grid,
                                double shared_variance, Index replicates, std::uint64_t seed);

struct GainReport {
  Matrix effect_covariance;
  Vector eigenvalues_desc;
  Vector diagonals_desc;
  double gain = 0.0;
  double lower_bound = 0.0;
  double upper_bound = 0.0;
  std::pair<double, double> snr_upper_bounds{0.0, 0.0};  // +inf when lambda_min = 0
  double condition_number = 0.0;
};

GainReport gain(const TaskCovariance& effect_covariance, double shared_variance);

struct GainTrajectoryPoint {
  Index dim = 0;
  double normalized_gap = 0.0;  // MC estimate of [risk(id) - risk(ecov)] / (sigma^2 D Q)
  double sem = 0.0;
};

struct GainConvergenceReport {
  double gain_value = 0.0;
  std::vector<GainTrajectoryPoint> trajectory;
  double terminal_gap_error = 0.0;
};

GainConvergenceReport gain_convergence_check(const TaskCovariance& effect_covariance,
                                             double shared_variance,
                                             const std::vector<Index>& dims, Index replicates,
                                             std::uint64_t seed);

}  // namespace ecov
