#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "ecov/errors.hpp"

namespace ecov {

using Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class DatasetKind { gaussian, binary };

// One regression problem: N_q x D design X^q, length-N_q responses Y^q.
// All domain types validate their invariants on construction and are immutable afterwards.
class RegressionDataset {
 public:
  RegressionDataset(Matrix design, Vector responses,
                    std::optional<double> noise_variance = std::nullopt,
                    DatasetKind kind = DatasetKind::gaussian);

  const Matrix& design() const noexcept { return design_; }
  const Vector& responses() const noexcept { return responses_; }
  const std::optional<double>& noise_variance() const noexcept { return noise_variance_; }
  DatasetKind kind() const noexcept { return kind_; }
  Index point_count() const noexcept { return design_.rows(); }
  Index covariate_count() const noexcept { return design_.cols(); }

 private:
  Matrix design_;
  Vector responses_;
  std::optional<double> noise_variance_;
  DatasetKind kind_;
};

// Q datasets sharing the same D covariates and the same kind.
class DatasetCollection {
 public:
  explicit DatasetCollection(std::vector<RegressionDataset> datasets);

  Index size() const noexcept { return static_cast<Index>(datasets_.size()); }  // Q
  Index covariate_count() const noexcept { return covariate_count_; }           // D
  DatasetKind kind() const noexcept { return kind_; }
  const RegressionDataset& dataset(Index q) const { return datasets_.at(static_cast<size_t>(q)); }
  const std::vector<RegressionDataset>& datasets() const noexcept { return datasets_; }

 private:
  std::vector<RegressionDataset> datasets_;
  Index covariate_count_;
  DatasetKind kind_;
};

// D x Q effects: column q is beta^q, row d is beta_d.
class EffectsMatrix {
 public:
  explicit EffectsMatrix(Matrix values);

  const Matrix& values() const noexcept { return values_; }
  Index covariate_count() const noexcept { return values_.rows(); }
  Index dataset_count() const noexcept { return values_.cols(); }

 private:
  Matrix values_;
};

// Q x Q prior covariance of an effects row (Sigma). Symmetric PSD up to slack
// 1e-10 * trace/dim; stored symmetrized.
class TaskCovariance {
 public:
  explicit TaskCovariance(Matrix matrix);

  const Matrix& matrix() const noexcept { return matrix_; }
  Index dimension() const noexcept { return matrix_.rows(); }

 private:
  Matrix matrix_;
};

// D x D prior covariance of an effects column (Gamma), same validation.
class CovariateCovariance {
 public:
  explicit CovariateCovariance(Matrix matrix);

  const Matrix& matrix() const noexcept { return matrix_; }
  Index dimension() const noexcept { return matrix_.rows(); }

 private:
  Matrix matrix_;
};

enum class NoiseSource { user_supplied, estimated };

// Dataset-specific noise variances sigma_q^2.
class NoiseModel {
 public:
  NoiseModel(Vector variances, NoiseSource source);

  // pulls the per-dataset variances stored in the collection; errors if any is missing
  static NoiseModel from_collection(const DatasetCollection& collection);
  static NoiseModel shared(double variance, Index count);

  const Vector& variances() const noexcept { return variances_; }
  double variance(Index q) const { return variances_(q); }
  NoiseSource source() const noexcept { return source_; }
  Index size() const noexcept { return variances_.size(); }

 private:
  Vector variances_;
  NoiseSource source_;
};

// re-checks every invariant of the collection and its datasets (construction already does)
void validate_collection(const DatasetCollection& collection);

// column q solves X^qT X^q b = X^qT Y^q; errors on rank deficiency or N_q < D
EffectsMatrix least_squares(const DatasetCollection& collection);

}  // namespace ecov
