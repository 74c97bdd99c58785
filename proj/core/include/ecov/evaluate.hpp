#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecov/covariance.hpp"
#include "ecov/edata.hpp"
#include "ecov/logistic.hpp"
#include "ecov/model.hpp"

namespace ecov {

struct NamedCollection {
  DatasetCollection collection;
  std::vector<std::string> names;  // one per dataset, unique
};

// center to mean 0, scale to unit sample variance (n-1), then clip at +-2; responses
// only, covariates untouched; stored noise variances are rescaled with the responses
DatasetCollection preprocess(const DatasetCollection& collection);

// ||P-perp Y||^2 / (N - D), the residual variance of the least-squares fit
double estimate_noise(const RegressionDataset& dataset);

// deterministic permutation-based fold labels; a pure function of (seed, count)
std::vector<Index> fold_assignment(std::uint64_t seed, Index count, Index folds);

enum class CvEstimator { ecov_em, ecov_mm_practical, edata_em, ls, ls_pooled, id };
enum class CvMetric { mse, classification_error };

const char* to_string(CvEstimator kind) noexcept;
const char* to_string(CvMetric metric) noexcept;
CvEstimator cv_estimator_from_token(const std::string& token);

struct CvOptions {
  Index folds = 5;
  std::uint64_t seed = 0;
  EstimateOptions estimate;  // regression fits
  EdataOptions edata;
  EmOptions logistic_em;  // classification ecov fit
  NewtonOptions newton;
};

struct CvRow {
  std::string estimator;
  std::string dataset;
  Index fold = 0;
  double value = 0.0;  // NaN when failed
  bool failed = false;
};

struct CvAggregate {
  std::string estimator;
  double mean = 0.0;  // of per-fold means over datasets
  double sem = 0.0;   // across folds
  Index folds_used = 0;
};

struct CvFit {
  std::string estimator;
  Index fold = 0;
  Matrix beta;
};

struct CvReport {
  CvMetric metric = CvMetric::mse;
  std::vector<CvRow> rows;
  std::vector<CvAggregate> aggregates;
  std::vector<CvFit> fits;  // training-split fits, exposed so leakage can be asserted
};

// k-fold comparison with training-split-only preprocessing and noise estimation
CvReport cross_validate(const NamedCollection& data, const std::vector<CvEstimator>& estimators,
                        const CvOptions& options = {});

// the Q=1 row-exchangeable fit applied to each dataset separately
EffectsMatrix independent_estimate(const DatasetCollection& collection, const NoiseModel& noise,
                                   const EstimateOptions& options = {});

// one coefficient vector fit on all rows stacked, replicated across columns
EffectsMatrix pooled_least_squares(const DatasetCollection& collection);

}  // namespace ecov
