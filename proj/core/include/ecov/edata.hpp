#pragma once

#include <utility>

#include "ecov/covariance.hpp"
#include "ecov/model.hpp"

namespace ecov {

enum class EdataMethod { em, mm };

struct EdataOptions {
  EmOptions em;
  EmInit em_init = EmInit::identity;
  Index max_dimension = 500;  // EM works with D x D matrices; raise deliberately
  SolverOptions solver;
};

// EM for Gamma under column exchangeability; factorizes across datasets, so the
// E-step is Q independent D x D solves
std::pair<CovariateCovariance, EmTrace> em_fit_edata(const DatasetCollection& collection,
                                                     const NoiseModel& noise,
                                                     const CovariateCovariance& init,
                                                     const EdataOptions& options = {});

double log_marginal_likelihood_edata(const DatasetCollection& collection,
                                     const CovariateCovariance& gamma, const NoiseModel& noise);

// Gamma_MM = Q^{-1} beta_LS beta_LS^T - Q^{-1} sum_q sigma_q^2 (X^qT X^q)^{-1}
MomentEstimate moment_gamma(const DatasetCollection& collection, const NoiseModel& noise);

std::pair<EffectsMatrix, FitReport> edata_estimate(const DatasetCollection& collection,
                                                   const NoiseModel& noise, EdataMethod method,
                                                   const EdataOptions& options = {});

}  // namespace ecov
