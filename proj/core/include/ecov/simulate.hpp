#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ecov/covariance.hpp"
#include "ecov/edata.hpp"
#include "ecov/model.hpp"

namespace ecov {

enum class EffectKind { correlated, independent, explicit_matrix };

inline EstimateOptions sweep_estimate_options() {
  EstimateOptions o;
  o.em_init = EmInit::moment;
  o.em.record_iterates = false;
  return o;
}

inline EdataOptions sweep_edata_options() {
  EdataOptions o;
  o.em_init = EmInit::moment;
  o.em.record_iterates = false;
  return o;
}

struct SimulationConfig {
  Index task_count = 0;                 // Q
  std::vector<Index> covariate_dims;    // strictly increasing D values
  Index replicates = 20;
  EffectKind effect_kind = EffectKind::correlated;
  std::optional<TaskCovariance> explicit_sigma;  // used iff effect_kind == explicit_matrix
  double expected_points = 1000.0;      // Poisson rate for per-dataset row counts
  double noise_variance = 1.0;
  std::uint64_t seed = 0;
  EstimateOptions estimate = sweep_estimate_options();
  EdataOptions edata = sweep_edata_options();
};

// correlated: Sigma = U diag(1, 1/2, ..., 2^{-(Q-1)}) U^T with Haar-ish random
// orthonormal U (QR of a Gaussian draw, sign-fixed); independent: I_Q
TaskCovariance make_effect_covariance(EffectKind kind, Index task_count, std::uint64_t seed);

struct SimulatedCollection {
  DatasetCollection collection;
  EffectsMatrix true_beta;
};

// One synthetic problem: beta rows iid N(0, Sigma); N^q ~ Poisson(expected_points)
// redrawn while N^q <= D (up to 100 times); X rows iid N(0, I_D/expected_points);
// Y = X beta^q + noise. Draw order (beta, then per dataset N, X, noise) is pinned:
// the output is a pure function of (config, dim, replicate).
SimulatedCollection simulate_collection(const SimulationConfig& config, Index dim,
                                        Index replicate);

enum class SweepEstimator { ls, id, ecov_em, ecov_mm, edata_em, edata_mm };

const char* to_string(SweepEstimator kind) noexcept;
SweepEstimator sweep_estimator_from_token(const std::string& token);
std::vector<SweepEstimator> default_sweep_estimators();

struct RiskCurveRow {
  Index dimension = 0;
  std::string estimator;
  double mean_error = 0.0;  // mean ||beta_hat - beta||_F^2 over successful replicates
  double sem = 0.0;
  Index replicates = 0;  // successful replicates behind the mean
  Index failures = 0;
};

// Sweeps every (dimension, estimator) cell; estimator failures are counted per
// cell, never fatal. Column-exchangeable cells are omitted above the EData
// dimension cap. The table is a pure function of (config, kinds).
std::vector<RiskCurveRow> risk_curve(const SimulationConfig& config,
                                     const std::vector<SweepEstimator>& kinds);

}  // namespace ecov
