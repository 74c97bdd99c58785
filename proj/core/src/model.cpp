#include "ecov/model.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace ecov {

namespace {

std::string at_dataset(std::optional<Index> index) {
  return index ? "dataset " + std::to_string(*index) + ": " : std::string{};
}

void check_dataset(const RegressionDataset& ds, std::optional<Index> index) {
  const auto where = at_dataset(index);
  if (ds.design().rows() != ds.responses().size()) {
    fail(ErrorCode::dimension_mismatch,
         where + "design has " + std::to_string(ds.design().rows()) + " rows but " +
             std::to_string(ds.responses().size()) + " responses");
  }
  if (ds.design().size() > 0 && !ds.design().allFinite()) {
    fail(ErrorCode::non_finite_value, where + "design contains a non-finite value");
  }
  if (ds.responses().size() > 0 && !ds.responses().allFinite()) {
    fail(ErrorCode::non_finite_value, where + "responses contain a non-finite value");
  }
  if (ds.kind() == DatasetKind::binary) {
    for (Index i = 0; i < ds.responses().size(); ++i) {
      const double y = ds.responses()(i);
      if (y != 0.0 && y != 1.0) {
        fail(ErrorCode::non_binary_response,
             where + "non-binary response " + std::to_string(y) + " at row " + std::to_string(i));
      }
    }
    if (ds.noise_variance()) {
      fail(ErrorCode::invalid_noise_variance,
           where + "noise_variance must be absent for binary datasets");
    }
  } else if (ds.noise_variance()) {
    const double v = *ds.noise_variance();
    if (!(v > 0.0) || !std::isfinite(v)) {
      fail(ErrorCode::invalid_noise_variance,
           where + "noise_variance must be strictly positive and finite, got " + std::to_string(v));
    }
  }
}

Matrix check_covariance(Matrix m, const char* label) {
  if (m.rows() != m.cols()) {
    fail(ErrorCode::dimension_mismatch,
         std::string(label) + " must be square, got " + std::to_string(m.rows()) + "x" +
             std::to_string(m.cols()));
  }
  if (m.size() == 0) {
    fail(ErrorCode::bad_argument, std::string(label) + " must be non-empty");
  }
  if (!m.allFinite()) {
    fail(ErrorCode::non_finite_value, std::string(label) + " contains a non-finite value");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * scale) {
    fail(ErrorCode::not_symmetric,
         std::string(label) + " is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
  Matrix sym = 0.5 * (m + m.transpose());
  const Index dim = sym.rows();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  const double slack = 1e-10 * sym.trace() / static_cast<double>(dim);
  if (eig.eigenvalues().minCoeff() < -slack) {
    fail(ErrorCode::not_positive_semidefinite,
         std::string(label) + " has eigenvalue " + std::to_string(eig.eigenvalues().minCoeff()) +
             " below the PSD slack");
  }
  return sym;
}

}  // namespace

RegressionDataset::RegressionDataset(Matrix design, Vector responses,
                                     std::optional<double> noise_variance, DatasetKind kind)
    : design_(std::move(design)),
      responses_(std::move(responses)),
      noise_variance_(noise_variance),
      kind_(kind) {
  check_dataset(*this, std::nullopt);
}

DatasetCollection::DatasetCollection(std::vector<RegressionDataset> datasets)
    : datasets_(std::move(datasets)) {
  if (datasets_.empty()) {
    fail(ErrorCode::bad_argument, "a collection needs at least one dataset");
  }
  covariate_count_ = datasets_.front().covariate_count();
  kind_ = datasets_.front().kind();
  for (size_t q = 0; q < datasets_.size(); ++q) {
    const auto idx = static_cast<Index>(q);
    check_dataset(datasets_[q], idx);
    if (datasets_[q].covariate_count() != covariate_count_) {
      fail(ErrorCode::dimension_mismatch,
           "dataset " + std::to_string(q) + ": covariate count mismatch (" +
               std::to_string(datasets_[q].covariate_count()) + " vs " +
               std::to_string(covariate_count_) + ")");
    }
    if (datasets_[q].kind() != kind_) {
      fail(ErrorCode::mixed_dataset_kinds,
           "dataset " + std::to_string(q) + ": kind differs from dataset 0");
    }
  }
}

EffectsMatrix::EffectsMatrix(Matrix values) : values_(std::move(values)) {
  if (values_.size() == 0) {
    fail(ErrorCode::bad_argument, "effects matrix must be non-empty");
  }
  if (!values_.allFinite()) {
    fail(ErrorCode::non_finite_value, "effects matrix contains a non-finite value");
  }
}

TaskCovariance::TaskCovariance(Matrix matrix)
    : matrix_(check_covariance(std::move(matrix), "task covariance")) {}

CovariateCovariance::CovariateCovariance(Matrix matrix)
    : matrix_(check_covariance(std::move(matrix), "covariate covariance")) {}

NoiseModel::NoiseModel(Vector variances, NoiseSource source)
    : variances_(std::move(variances)), source_(source) {
  if (variances_.size() == 0) {
    fail(ErrorCode::bad_argument, "noise model must cover at least one dataset");
  }
  for (Index q = 0; q < variances_.size(); ++q) {
    const double v = variances_(q);
    if (!(v > 0.0) || !std::isfinite(v)) {
      fail(ErrorCode::invalid_noise_variance,
           "dataset " + std::to_string(q) + ": noise variance must be strictly positive and " +
               "finite, got " + std::to_string(v));
    }
  }
}

NoiseModel NoiseModel::from_collection(const DatasetCollection& collection) {
  Vector v(collection.size());
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& nv = collection.dataset(q).noise_variance();
    if (!nv) {
      fail(ErrorCode::invalid_noise_variance,
           "dataset " + std::to_string(q) + ": noise variance missing");
    }
    v(q) = *nv;
  }
  return NoiseModel(std::move(v), NoiseSource::user_supplied);
}

NoiseModel NoiseModel::shared(double variance, Index count) {
  return NoiseModel(Vector::Constant(count, variance), NoiseSource::user_supplied);
}

void validate_collection(const DatasetCollection& collection) {
  for (Index q = 0; q < collection.size(); ++q) {
    check_dataset(collection.dataset(q), q);
    if (collection.dataset(q).covariate_count() != collection.covariate_count()) {
      fail(ErrorCode::dimension_mismatch,
           "dataset " + std::to_string(q) + ": covariate count mismatch");
    }
    if (collection.dataset(q).kind() != collection.kind()) {
      fail(ErrorCode::mixed_dataset_kinds, "dataset " + std::to_string(q) + ": kind mismatch");
    }
  }
}

EffectsMatrix least_squares(const DatasetCollection& collection) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "least squares requires gaussian datasets");
  }
  const Index d = collection.covariate_count();
  Matrix beta(d, collection.size());
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    if (ds.point_count() < d) {
      fail(ErrorCode::insufficient_rows,
           "dataset " + std::to_string(q) + ": " + std::to_string(ds.point_count()) +
               " rows < " + std::to_string(d) + " covariates");
    }
    Eigen::BDCSVD<Matrix> svd(ds.design(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smax = svd.singularValues()(0);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);
    const double tol = std::numeric_limits<double>::epsilon() *
                       static_cast<double>(std::max(ds.point_count(), d)) * smax;
    if (!(smin > tol)) {
      fail(ErrorCode::rank_deficient_design,
           "dataset " + std::to_string(q) + ": design is rank deficient (smallest singular " +
               "value " + std::to_string(smin) + ")");
    }
    beta.col(q) = svd.solve(ds.responses());
  }
  return EffectsMatrix(std::move(beta));
}

}  // namespace ecov
