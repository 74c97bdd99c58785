#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ecov/model.hpp"
#include "ecov/posterior.hpp"

namespace ecov {

struct EmOptions {
  Index max_iterations = 500;
  double rel_tolerance = 1e-8;  // on |delta log marginal likelihood| / max(1, |value|)
  bool record_iterates = true;  // false keeps only the first and last iterate
};

struct EmTrace {
  std::vector<Matrix> sigma_iterates;
  std::vector<double> log_marginal_likelihoods;
  bool converged = false;
  Index iterations = 0;
};

// EM for Sigma: E-step is the exact posterior, M-step averages mu_d mu_dT + V_d over
// covariates. Aborts if the log marginal likelihood ever drops by more than 1e-8.
std::pair<TaskCovariance, EmTrace> em_fit_linear(const DatasetCollection& collection,
                                                 const NoiseModel& noise,
                                                 const TaskCovariance& init,
                                                 const EmOptions& options = {});

// log p(beta_LS | Sigma): Gaussian marginal of the least-squares sufficient statistic,
// constant included; exact for singular PSD Sigma
double log_marginal_likelihood(const DatasetCollection& collection, const TaskCovariance& sigma,
                               const NoiseModel& noise);

struct MomentEstimate {
  Matrix matrix;
  bool positive_semidefinite = true;
};

// Sigma_MM = D^{-1} beta_LS^T beta_LS - D^{-1} diag(sigma_q^2 tr[(X^qT X^q)^{-1}])
MomentEstimate moment_sigma(const DatasetCollection& collection, const NoiseModel& noise);

struct PseudoStatistics {
  Matrix pseudo_responses;       // D x Q, column q = S^qT Y^q
  Matrix trace_inverse_weights;  // Q x Q, entry 1 / tr(W^qT W^q')
  Vector noise_vector;
};

PseudoStatistics pseudo_statistics(const DatasetCollection& collection, const NoiseModel& noise);

// [Z^T Z - D diag(noise)] entrywise-scaled by the trace weights; may be non-PSD
Matrix practical_moment_raw(const PseudoStatistics& stats);

// eigen-clipped to condition number <= condition_cap (fallback: tiny multiple of I)
TaskCovariance practical_moment_sigma(const DatasetCollection& collection,
                                      const NoiseModel& noise, double condition_cap = 100.0);

struct SvdShrinkageResult {
  Matrix left_vectors;            // D x Q
  Matrix right_vectors;           // Q x Q
  Vector singular_value_squares;  // lambda, descending
  TaskCovariance sigma_hat;
  EffectsMatrix beta_hat;
};

// closed-form marginal-likelihood maximizer under an orthogonal design with D > Q:
// Sigma = U diag[(lambda/D - shared_variance)_+] U^T and the positive-part
// singular-value shrinkage of beta_LS
SvdShrinkageResult mle_sigma_orthogonal(const EffectsMatrix& beta_ls, double shared_variance);

enum class EcovMethod { em, mm, mm_practical, mle_orthogonal };
enum class EmInit { identity, moment };

struct EstimateOptions {
  SolverOptions solver;
  EmOptions em;
  EmInit em_init = EmInit::identity;
  double condition_cap = 100.0;
};

struct FitReport {
  std::string method;
  std::optional<Matrix> covariance;  // Sigma-hat or Gamma-hat, as estimated (possibly non-PSD)
  bool covariance_psd = true;
  std::optional<EmTrace> trace;
};

// composes the chosen Sigma estimator with posterior inference; mm keeps the raw
// (possibly non-PSD) moment estimate and solves the posterior in inverse-free form
std::pair<EffectsMatrix, FitReport> ecov_estimate(const DatasetCollection& collection,
                                                  const NoiseModel& noise, EcovMethod method,
                                                  const EstimateOptions& options = {});

}  // namespace ecov
