#include "ecov/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ecov/evaluate.hpp"
#include "ecov/rng.hpp"

namespace ecov {

namespace {

void validate(const SimulationConfig& config) {
  if (config.task_count < 1) fail(ErrorCode::bad_argument, "task_count must be >= 1");
  if (config.covariate_dims.empty()) {
    fail(ErrorCode::bad_argument, "covariate_dims must not be empty");
  }
  Index prev = 0;
  for (Index d : config.covariate_dims) {
    if (d < 1) fail(ErrorCode::bad_argument, "covariate dimensions must be >= 1");
    if (d <= prev) fail(ErrorCode::bad_argument, "covariate_dims must be strictly increasing");
    prev = d;
  }
  if (config.replicates < 1) fail(ErrorCode::bad_argument, "replicates must be >= 1");
  if (!(config.expected_points > 0.0)) {
    fail(ErrorCode::bad_argument, "expected_points must be positive");
  }
  if (!(config.noise_variance > 0.0)) {
    fail(ErrorCode::bad_argument, "noise_variance must be positive");
  }
  if (config.effect_kind == EffectKind::explicit_matrix) {
    if (!config.explicit_sigma.has_value()) {
      fail(ErrorCode::bad_argument, "explicit effect covariance requested but none supplied");
    }
    if (config.explicit_sigma->dimension() != config.task_count) {
      fail(ErrorCode::dimension_mismatch, "explicit effect covariance must be Q x Q");
    }
  }
}

TaskCovariance effect_covariance(const SimulationConfig& config) {
  if (config.effect_kind == EffectKind::explicit_matrix) return *config.explicit_sigma;
  return make_effect_covariance(config.effect_kind, config.task_count, config.seed);
}

Matrix covariance_sqrt(const TaskCovariance& sigma) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma.matrix());
  if (eig.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, "effect covariance eigendecomposition failed");
  }
  const Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

struct CellMoments {
  double sum = 0.0;
  double sum_sq = 0.0;
  Index count = 0;
  Index failures = 0;

  void add(double value) {
    sum += value;
    sum_sq += value * value;
    ++count;
  }
  double mean() const {
    if (count == 0) return std::numeric_limits<double>::quiet_NaN();
    return sum / static_cast<double>(count);
  }
  double sem() const {
    if (count < 2) return 0.0;
    const double n = static_cast<double>(count);
    const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
    return std::sqrt(var / n);
  }
};

Matrix fit_sweep(SweepEstimator kind, const DatasetCollection& collection,
                 const NoiseModel& noise, const SimulationConfig& config) {
  switch (kind) {
    case SweepEstimator::ls:
      return least_squares(collection).values();
    case SweepEstimator::id:
      return independent_estimate(collection, noise, config.estimate).values();
    case SweepEstimator::ecov_em:
      return ecov_estimate(collection, noise, EcovMethod::em, config.estimate).first.values();
    case SweepEstimator::ecov_mm:
      return ecov_estimate(collection, noise, EcovMethod::mm, config.estimate).first.values();
    case SweepEstimator::edata_em:
      return edata_estimate(collection, noise, EdataMethod::em, config.edata).first.values();
    case SweepEstimator::edata_mm:
      return edata_estimate(collection, noise, EdataMethod::mm, config.edata).first.values();
  }
  fail(ErrorCode::bad_argument, "unknown estimator");
}

}  // namespace

TaskCovariance make_effect_covariance(EffectKind kind, Index task_count, std::uint64_t seed) {
  if (task_count < 1) fail(ErrorCode::bad_argument, "task_count must be >= 1");
  if (kind == EffectKind::independent) {
    return TaskCovariance(Matrix::Identity(task_count, task_count));
  }
  if (kind != EffectKind::correlated) {
    fail(ErrorCode::bad_argument, "explicit effect covariance has no generator");
  }
  Rng rng = Rng::substream(seed, {0});
  const Matrix z = rng.normal_matrix(task_count, task_count);
  Eigen::HouseholderQR<Matrix> qr(z);
  Matrix u = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < task_count; ++j) {
    if (r(j, j) < 0.0) u.col(j) = -u.col(j);  // pin the sign convention
  }
  Vector evals(task_count);
  for (Index j = 0; j < task_count; ++j) evals(j) = std::pow(2.0, -static_cast<double>(j));
  Matrix sigma = u * evals.asDiagonal() * u.transpose();
  sigma = ((sigma + sigma.transpose()) / 2.0).eval();
  return TaskCovariance(std::move(sigma));
}

SimulatedCollection simulate_collection(const SimulationConfig& config, Index dim,
                                        Index replicate) {
  validate(config);
  if (dim < 1) fail(ErrorCode::bad_argument, "dim must be >= 1");
  if (replicate < 0) fail(ErrorCode::bad_argument, "replicate must be >= 0");
  const Index q_count = config.task_count;
  const TaskCovariance sigma = effect_covariance(config);
  const Matrix root = covariance_sqrt(sigma);

  Rng rng = Rng::substream(config.seed, {1, static_cast<std::uint64_t>(dim),
                                         static_cast<std::uint64_t>(replicate)});
  const Matrix beta = rng.normal_matrix(dim, q_count) * root;  // rows iid N(0, Sigma)

  const double noise_sd = std::sqrt(config.noise_variance);
  std::vector<RegressionDataset> datasets;
  datasets.reserve(static_cast<size_t>(q_count));
  for (Index q = 0; q < q_count; ++q) {
    std::int64_t rows = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      rows = rng.poisson(config.expected_points);
      if (rows >= dim + 1) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      fail(ErrorCode::insufficient_rows,
           "Poisson row counts stayed below D+1 after 100 redraws; raise expected_points");
    }
    Matrix x = rng.normal_matrix(static_cast<Index>(rows), dim) / std::sqrt(config.expected_points);
    Vector y = x * beta.col(q) + noise_sd * rng.normal_vector(static_cast<Index>(rows));
    datasets.emplace_back(std::move(x), std::move(y), config.noise_variance);
  }
  return SimulatedCollection{DatasetCollection(std::move(datasets)), EffectsMatrix(beta)};
}

const char* to_string(SweepEstimator kind) noexcept {
  switch (kind) {
    case SweepEstimator::ls: return "ls";
    case SweepEstimator::id: return "id";
    case SweepEstimator::ecov_em: return "ecov-em";
    case SweepEstimator::ecov_mm: return "ecov-mm";
    case SweepEstimator::edata_em: return "edata-em";
    case SweepEstimator::edata_mm: return "edata-mm";
  }
  return "?";
}

SweepEstimator sweep_estimator_from_token(const std::string& token) {
  for (SweepEstimator kind : default_sweep_estimators()) {
    if (token == to_string(kind)) return kind;
  }
  fail(ErrorCode::bad_argument, "unknown estimator '" + token + "'");
}

std::vector<SweepEstimator> default_sweep_estimators() {
  return {SweepEstimator::ls,      SweepEstimator::id,       SweepEstimator::ecov_em,
          SweepEstimator::ecov_mm, SweepEstimator::edata_em, SweepEstimator::edata_mm};
}

std::vector<RiskCurveRow> risk_curve(const SimulationConfig& config,
                                     const std::vector<SweepEstimator>& kinds) {
  validate(config);
  if (kinds.empty()) fail(ErrorCode::bad_argument, "no estimators requested");

  std::vector<RiskCurveRow> rows;
  for (Index dim : config.covariate_dims) {
    std::vector<bool> active(kinds.size(), true);
    for (size_t k = 0; k < kinds.size(); ++k) {
      const bool edata = kinds[k] == SweepEstimator::edata_em || kinds[k] == SweepEstimator::edata_mm;
      if (edata && dim > config.edata.max_dimension) active[k] = false;  // omit above the cap
    }
    std::vector<CellMoments> cells(kinds.size());
    for (Index rep = 0; rep < config.replicates; ++rep) {
      const SimulatedCollection sim = simulate_collection(config, dim, rep);
      const NoiseModel noise = NoiseModel::from_collection(sim.collection);
      for (size_t k = 0; k < kinds.size(); ++k) {
        if (!active[k]) continue;
        try {
          const Matrix fit = fit_sweep(kinds[k], sim.collection, noise, config);
          cells[k].add((fit - sim.true_beta.values()).squaredNorm());
        } catch (const Error&) {
          ++cells[k].failures;
        }
      }
    }
    for (size_t k = 0; k < kinds.size(); ++k) {
      if (!active[k]) continue;
      rows.push_back(RiskCurveRow{dim, to_string(kinds[k]), cells[k].mean(), cells[k].sem(),
                                  cells[k].count, cells[k].failures});
    }
  }
  return rows;
}

}  // namespace ecov
