#include "ecov/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "ecov/rng.hpp"
#include "internal.hpp"

namespace ecov {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct ResponseScale {
  double mean = 0.0;
  double scale = 1.0;  // standard deviation of the fitting split

  Vector apply(const Vector& y) const {
    return ((y.array() - mean) / scale).cwiseMax(-2.0).cwiseMin(2.0);
  }
};

ResponseScale response_scale(const Vector& y) {
  if (y.size() < 2) {
    fail(ErrorCode::insufficient_rows, "need at least two responses to standardize");
  }
  ResponseScale s;
  s.mean = y.mean();
  const double var = (y.array() - s.mean).square().sum() / static_cast<double>(y.size() - 1);
  if (!(var > 0.0)) {
    fail(ErrorCode::bad_argument, "zero-variance responses cannot be standardized");
  }
  s.scale = std::sqrt(var);
  return s;
}

}  // namespace

DatasetCollection preprocess(const DatasetCollection& collection) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "preprocessing is defined for regression collections");
  }
  std::vector<RegressionDataset> out;
  out.reserve(static_cast<size_t>(collection.size()));
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    const ResponseScale s = response_scale(ds.responses());
    std::optional<double> noise = ds.noise_variance();
    if (noise.has_value()) noise = *noise / (s.scale * s.scale);
    out.emplace_back(ds.design(), s.apply(ds.responses()), noise, ds.kind());
  }
  return DatasetCollection(std::move(out));
}

double estimate_noise(const RegressionDataset& dataset) {
  if (dataset.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "noise estimation is defined for regression datasets");
  }
  const Index n = dataset.point_count();
  const Index d = dataset.covariate_count();
  if (n <= d) {
    fail(ErrorCode::insufficient_rows,
         "residual variance needs more rows than covariates (" + std::to_string(n) + " <= " +
             std::to_string(d) + "); supply noise_variance in the manifest instead");
  }
  const Matrix gram = dataset.design().transpose() * dataset.design();
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::rank_deficient_design, "design is rank deficient");
  }
  const Vector beta = llt.solve(dataset.design().transpose() * dataset.responses());
  const Vector resid = dataset.responses() - dataset.design() * beta;
  return resid.squaredNorm() / static_cast<double>(n - d);
}

std::vector<Index> fold_assignment(std::uint64_t seed, Index count, Index folds) {
  if (folds < 2) fail(ErrorCode::bad_argument, "folds must be >= 2");
  if (count < folds) {
    fail(ErrorCode::insufficient_rows, "cannot split " + std::to_string(count) + " rows into " +
                                           std::to_string(folds) + " folds");
  }
  Rng rng = Rng::substream(seed, {static_cast<std::uint64_t>(count)});
  std::vector<Index> perm(static_cast<size_t>(count));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = count - 1; i > 0; --i) {
    const Index j = static_cast<Index>(rng.bits() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  std::vector<Index> fold(static_cast<size_t>(count));
  for (Index i = 0; i < count; ++i) {
    fold[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i % folds;
  }
  return fold;
}

const char* to_string(CvEstimator kind) noexcept {
  switch (kind) {
    case CvEstimator::ecov_em: return "ecov-em";
    case CvEstimator::ecov_mm_practical: return "ecov-mm-practical";
    case CvEstimator::edata_em: return "edata-em";
    case CvEstimator::ls: return "ls";
    case CvEstimator::ls_pooled: return "ls-pooled";
    case CvEstimator::id: return "id";
  }
  return "?";
}

const char* to_string(CvMetric metric) noexcept {
  return metric == CvMetric::mse ? "mse" : "classification_error";
}

CvEstimator cv_estimator_from_token(const std::string& token) {
  for (CvEstimator kind : {CvEstimator::ecov_em, CvEstimator::ecov_mm_practical,
                           CvEstimator::edata_em, CvEstimator::ls, CvEstimator::ls_pooled,
                           CvEstimator::id}) {
    if (token == to_string(kind)) return kind;
  }
  fail(ErrorCode::bad_argument, "unknown estimator '" + token + "'");
}

EffectsMatrix independent_estimate(const DatasetCollection& collection, const NoiseModel& noise,
                                   const EstimateOptions& options) {
  if (noise.size() != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "noise model size must match the dataset count");
  }
  Matrix out(collection.covariate_count(), collection.size());
  for (Index q = 0; q < collection.size(); ++q) {
    DatasetCollection single(std::vector<RegressionDataset>{collection.dataset(q)});
    NoiseModel single_noise = NoiseModel::shared(noise.variance(q), 1);
    out.col(q) = ecov_estimate(single, single_noise, EcovMethod::em, options).first.values();
  }
  return EffectsMatrix(std::move(out));
}

EffectsMatrix pooled_least_squares(const DatasetCollection& collection) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "pooled least squares requires gaussian datasets");
  }
  const Index d = collection.covariate_count();
  Matrix gram = Matrix::Zero(d, d);
  Vector xty = Vector::Zero(d);
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    gram.noalias() += ds.design().transpose() * ds.design();
    xty.noalias() += ds.design().transpose() * ds.responses();
  }
  Eigen::LLT<Matrix> llt(std::move(gram));
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::rank_deficient_design, "stacked design is rank deficient");
  }
  const Vector beta = llt.solve(xty);
  return EffectsMatrix(beta.replicate(1, collection.size()));
}

namespace {

struct FoldSplit {
  std::vector<RegressionDataset> train;
  std::vector<Matrix> test_design;
  std::vector<Vector> test_response;  // standardized+clipped for regression, raw for binary
};

FoldSplit split_fold(const DatasetCollection& collection,
                     const std::vector<std::vector<Index>>& assignment, Index fold) {
  const bool regression = collection.kind() == DatasetKind::gaussian;
  FoldSplit split;
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    const auto& folds = assignment[static_cast<size_t>(q)];
    std::vector<Index> train_idx, test_idx;
    for (Index i = 0; i < ds.point_count(); ++i) {
      (folds[static_cast<size_t>(i)] == fold ? test_idx : train_idx).push_back(i);
    }
    Matrix x_train(static_cast<Index>(train_idx.size()), ds.covariate_count());
    Vector y_train(static_cast<Index>(train_idx.size()));
    for (size_t i = 0; i < train_idx.size(); ++i) {
      x_train.row(static_cast<Index>(i)) = ds.design().row(train_idx[i]);
      y_train(static_cast<Index>(i)) = ds.responses()(train_idx[i]);
    }
    Matrix x_test(static_cast<Index>(test_idx.size()), ds.covariate_count());
    Vector y_test(static_cast<Index>(test_idx.size()));
    for (size_t i = 0; i < test_idx.size(); ++i) {
      x_test.row(static_cast<Index>(i)) = ds.design().row(test_idx[i]);
      y_test(static_cast<Index>(i)) = ds.responses()(test_idx[i]);
    }

    if (regression) {
      // training-split statistics only; the test responses reuse them (no leakage)
      const ResponseScale s = response_scale(y_train);
      std::optional<double> noise = ds.noise_variance();
      if (noise.has_value()) noise = *noise / (s.scale * s.scale);
      RegressionDataset train(std::move(x_train), s.apply(y_train), noise, ds.kind());
      if (!train.noise_variance().has_value()) {
        // per-fold residual estimate; failures surface per estimator cell later
        train = RegressionDataset(train.design(), train.responses(), estimate_noise(train),
                                  ds.kind());
      }
      split.train.push_back(std::move(train));
      split.test_response.push_back(s.apply(y_test));
    } else {
      split.train.emplace_back(std::move(x_train), std::move(y_train), std::nullopt, ds.kind());
      split.test_response.push_back(std::move(y_test));
    }
    split.test_design.push_back(std::move(x_test));
  }
  return split;
}

Matrix fit_regression(CvEstimator kind, const DatasetCollection& train, const CvOptions& options) {
  switch (kind) {
    case CvEstimator::ls:
      return least_squares(train).values();
    case CvEstimator::ls_pooled:
      return pooled_least_squares(train).values();
    case CvEstimator::id:
      return independent_estimate(train, NoiseModel::from_collection(train), options.estimate)
          .values();
    case CvEstimator::ecov_em:
      return ecov_estimate(train, NoiseModel::from_collection(train), EcovMethod::em,
                           options.estimate)
          .first.values();
    case CvEstimator::ecov_mm_practical:
      return ecov_estimate(train, NoiseModel::from_collection(train), EcovMethod::mm_practical,
                           options.estimate)
          .first.values();
    case CvEstimator::edata_em:
      return edata_estimate(train, NoiseModel::from_collection(train), EdataMethod::em,
                            options.edata)
          .first.values();
  }
  fail(ErrorCode::bad_argument, "unknown estimator");
}

Matrix fit_classification(CvEstimator kind, const DatasetCollection& train,
                          const CvOptions& options) {
  const Index d = train.covariate_count();
  const Index t = train.size();
  switch (kind) {
    case CvEstimator::ls: {
      // per-task MAP with a unit prior (the non-hierarchical baseline)
      Matrix out(d, t);
      for (Index q = 0; q < t; ++q) {
        DatasetCollection single(std::vector<RegressionDataset>{train.dataset(q)});
        out.col(q) = map_newton(single, TaskCovariance(Matrix::Identity(1, 1)),
                                Matrix::Zero(d, 1), options.newton)
                         .mode;
      }
      return out;
    }
    case CvEstimator::ls_pooled: {
      Index total = 0;
      for (Index q = 0; q < t; ++q) total += train.dataset(q).point_count();
      Matrix x(total, d);
      Vector y(total);
      Index at = 0;
      for (Index q = 0; q < t; ++q) {
        const auto& ds = train.dataset(q);
        x.middleRows(at, ds.point_count()) = ds.design();
        y.segment(at, ds.point_count()) = ds.responses();
        at += ds.point_count();
      }
      DatasetCollection pooled(std::vector<RegressionDataset>{
          RegressionDataset(std::move(x), std::move(y), std::nullopt, DatasetKind::binary)});
      const Matrix beta = map_newton(pooled, TaskCovariance(Matrix::Identity(1, 1)),
                                     Matrix::Zero(d, 1), options.newton)
                              .mode;
      return beta.replicate(1, t);
    }
    case CvEstimator::id: {
      Matrix out(d, t);
      for (Index q = 0; q < t; ++q) {
        DatasetCollection single(std::vector<RegressionDataset>{train.dataset(q)});
        out.col(q) = em_fit_logistic(single, TaskCovariance(Matrix::Identity(1, 1)),
                                     options.logistic_em, options.newton)
                         .map;
      }
      return out;
    }
    case CvEstimator::ecov_em:
      return em_fit_logistic(train, TaskCovariance(Matrix::Identity(t, t)), options.logistic_em,
                             options.newton)
          .map;
    default:
      fail(ErrorCode::bad_argument, std::string(to_string(kind)) +
                                        " is not defined for classification tasks");
  }
}

}  // namespace

CvReport cross_validate(const NamedCollection& data, const std::vector<CvEstimator>& estimators,
                        const CvOptions& options) {
  const DatasetCollection& collection = data.collection;
  if (static_cast<Index>(data.names.size()) != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "dataset name count must match the collection");
  }
  if (estimators.empty()) fail(ErrorCode::bad_argument, "no estimators requested");
  if (options.folds < 2) fail(ErrorCode::bad_argument, "folds must be >= 2");
  const bool regression = collection.kind() == DatasetKind::gaussian;
  const Index d = collection.covariate_count();

  std::vector<std::vector<Index>> assignment;
  for (Index q = 0; q < collection.size(); ++q) {
    const Index n = collection.dataset(q).point_count();
    if (regression && n < options.folds * (d + 2)) {
      fail(ErrorCode::insufficient_rows,
           "dataset " + data.names[static_cast<size_t>(q)] + " has " + std::to_string(n) +
               " rows; k-fold regression needs at least folds*(D+2) = " +
               std::to_string(options.folds * (d + 2)));
    }
    assignment.push_back(fold_assignment(options.seed, n, options.folds));
  }

  CvReport report;
  report.metric = regression ? CvMetric::mse : CvMetric::classification_error;

  // per estimator: per fold mean over datasets (only folds with no failed cell aggregate)
  std::vector<std::vector<double>> fold_means(estimators.size());

  for (Index fold = 0; fold < options.folds; ++fold) {
    const FoldSplit split = split_fold(collection, assignment, fold);
    const DatasetCollection train(split.train);
    for (size_t e = 0; e < estimators.size(); ++e) {
      const CvEstimator kind = estimators[e];
      Matrix beta;
      bool fitted = true;
      try {
        beta = regression ? fit_regression(kind, train, options)
                          : fit_classification(kind, train, options);
      } catch (const Error&) {
        fitted = false;
      }
      if (fitted) {
        report.fits.push_back(CvFit{to_string(kind), fold, beta});
      }
      double total = 0.0;
      for (Index q = 0; q < collection.size(); ++q) {
        CvRow row;
        row.estimator = to_string(kind);
        row.dataset = data.names[static_cast<size_t>(q)];
        row.fold = fold;
        if (!fitted) {
          row.value = kNaN;
          row.failed = true;
        } else {
          const Matrix& x = split.test_design[static_cast<size_t>(q)];
          const Vector& y = split.test_response[static_cast<size_t>(q)];
          if (regression) {
            const Vector pred = x * beta.col(q);
            row.value = (pred - y).squaredNorm() / static_cast<double>(y.size());
          } else {
            const Vector z = x * beta.col(q);
            Index wrong = 0;
            for (Index i = 0; i < z.size(); ++i) {
              const double p = 1.0 / (1.0 + std::exp(-z(i)));
              const double label = p >= 0.5 ? 1.0 : 0.0;
              if (label != y(i)) ++wrong;
            }
            row.value = static_cast<double>(wrong) / static_cast<double>(z.size());
          }
          total += row.value;
        }
        report.rows.push_back(std::move(row));
      }
      if (fitted) {
        fold_means[e].push_back(total / static_cast<double>(collection.size()));
      }
    }
  }

  for (size_t e = 0; e < estimators.size(); ++e) {
    CvAggregate agg;
    agg.estimator = to_string(estimators[e]);
    const auto& values = fold_means[e];
    agg.folds_used = static_cast<Index>(values.size());
    if (values.empty()) {
      agg.mean = kNaN;
      agg.sem = kNaN;
    } else {
      const double n = static_cast<double>(values.size());
      agg.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
      if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
        agg.sem = std::sqrt(ss / (n - 1.0) / n);
      }
    }
    report.aggregates.push_back(std::move(agg));
  }
  return report;
}

}  // namespace ecov
