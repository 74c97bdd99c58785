#include "ecov/edata.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "internal.hpp"

namespace ecov {

namespace {

void check_em_options(const EmOptions& options) {
  if (options.max_iterations < 1) fail(ErrorCode::bad_argument, "max_iterations must be >= 1");
  if (!(options.rel_tolerance >= 0.0) || !std::isfinite(options.rel_tolerance)) {
    fail(ErrorCode::bad_argument, "rel_tolerance must be finite and non-negative");
  }
}

void check_dimension_cap(Index dim, const EdataOptions& options) {
  if (dim > options.max_dimension) {
    fail(ErrorCode::bad_argument,
         "covariate dimension " + std::to_string(dim) + " exceeds max_dimension " +
             std::to_string(options.max_dimension) + "; raise it explicitly for large problems");
  }
}

struct EdataEstep {
  Matrix mean;  // D x Q, column q = m_q
  Matrix sum_outer;  // sum_q (m_q m_q^T + C_q)
  double log_marginal = 0.0;
};

// per-dataset conjugate update at a fixed PSD Gamma, routed through the marginal
// covariance M_q = Gamma + sigma_q^2 G_q^{-1} (positive definite even for singular
// Gamma): m_q = Gamma M_q^{-1} beta_LS^q and C_q = Gamma - Gamma M_q^{-1} Gamma,
// with the marginal likelihood the Gaussian of beta_LS^q under N(0, M_q)
EdataEstep edata_estep(const detail::CollectionStats& stats, const detail::LsStats& ls,
                       const Matrix& gamma) {
  const Index d = stats.dim;
  EdataEstep out;
  out.mean.resize(d, stats.tasks);
  out.sum_outer = Matrix::Zero(d, d);
  const double norm_const = static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& ds = stats.data[static_cast<size_t>(q)];
    Matrix m_q = gamma + ds.noise * ls.gram_inverse[static_cast<size_t>(q)];
    Eigen::LLT<Matrix> llt(std::move(m_q));
    if (llt.info() != Eigen::Success) {
      fail(ErrorCode::singular_system,
           "dataset " + std::to_string(q) + ": marginal covariance is not positive definite");
    }
    double log_det = 0.0;
    for (Index i = 0; i < d; ++i) log_det += std::log(llt.matrixL()(i, i));
    log_det *= 2.0;
    const Vector solved = llt.solve(ls.beta_ls.col(q));
    out.log_marginal -= 0.5 * (norm_const + log_det + ls.beta_ls.col(q).dot(solved));
    const Vector m = gamma * solved;
    const Matrix c = gamma - gamma * llt.solve(gamma);
    out.sum_outer += m * m.transpose() + 0.5 * (c + c.transpose());
    out.mean.col(q) = m;
  }
  return out;
}

}  // namespace

std::pair<CovariateCovariance, EmTrace> em_fit_edata(const DatasetCollection& collection,
                                                     const NoiseModel& noise,
                                                     const CovariateCovariance& init,
                                                     const EdataOptions& options) {
  check_em_options(options.em);
  if (init.dimension() != collection.covariate_count()) {
    fail(ErrorCode::dimension_mismatch,
         "initial covariance dimension must match the covariate count");
  }
  check_dimension_cap(collection.covariate_count(), options);
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  const double tasks = static_cast<double>(stats.tasks);

  Matrix gamma = init.matrix();
  EmTrace trace;
  trace.sigma_iterates.push_back(gamma);
  Index msteps = 0;

  for (Index t = 0; t < options.em.max_iterations; ++t) {
    EdataEstep e = edata_estep(stats, ls, gamma);
    const double logml = e.log_marginal;
    if (!std::isfinite(logml)) {
      fail(ErrorCode::nonfinite_objective,
           "log marginal likelihood is not finite at iteration " + std::to_string(t));
    }
    if (!trace.log_marginal_likelihoods.empty()) {
      const double prev = trace.log_marginal_likelihoods.back();
      if (logml < prev - 1e-8) {
        fail(ErrorCode::em_likelihood_decrease,
             "log marginal likelihood decreased from " + std::to_string(prev) + " to " +
                 std::to_string(logml) + " at iteration " + std::to_string(t));
      }
      trace.log_marginal_likelihoods.push_back(logml);
      if (std::abs(logml - prev) < options.em.rel_tolerance * std::max(1.0, std::abs(logml))) {
        trace.converged = true;
        break;
      }
    } else {
      trace.log_marginal_likelihoods.push_back(logml);
    }
    if (t + 1 == options.em.max_iterations) break;

    Matrix next = e.sum_outer / tasks;
    gamma = 0.5 * (next + next.transpose());
    ++msteps;
    if (options.em.record_iterates) trace.sigma_iterates.push_back(gamma);
  }

  if (!options.em.record_iterates && msteps > 0) trace.sigma_iterates.push_back(gamma);
  trace.iterations = static_cast<Index>(trace.log_marginal_likelihoods.size());
  return {CovariateCovariance(gamma), trace};
}

double log_marginal_likelihood_edata(const DatasetCollection& collection,
                                     const CovariateCovariance& gamma, const NoiseModel& noise) {
  if (gamma.dimension() != collection.covariate_count()) {
    fail(ErrorCode::dimension_mismatch,
         "covariate covariance dimension must match the covariate count");
  }
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  const Index d = stats.dim;
  double total = 0.0;
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& ds = stats.data[static_cast<size_t>(q)];
    Matrix m = gamma.matrix() + ds.noise * ls.gram_inverse[static_cast<size_t>(q)];
    Eigen::LLT<Matrix> llt(std::move(m));
    if (llt.info() != Eigen::Success) {
      fail(ErrorCode::singular_system, "marginal covariance is not positive definite");
    }
    double log_det = 0.0;
    for (Index i = 0; i < d; ++i) log_det += std::log(llt.matrixL()(i, i));
    log_det *= 2.0;
    const double quad = ls.beta_ls.col(q).dot(llt.solve(ls.beta_ls.col(q)));
    total += -0.5 * (static_cast<double>(d) * std::log(2.0 * std::numbers::pi) + log_det + quad);
  }
  return total;
}

MomentEstimate moment_gamma(const DatasetCollection& collection, const NoiseModel& noise) {
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  Matrix m = ls.beta_ls * ls.beta_ls.transpose();
  for (Index q = 0; q < stats.tasks; ++q) {
    m -= stats.data[static_cast<size_t>(q)].noise * ls.gram_inverse[static_cast<size_t>(q)];
  }
  m /= static_cast<double>(stats.tasks);
  m = 0.5 * (m + m.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
  return MomentEstimate{std::move(m), eig.eigenvalues().minCoeff() >= 0.0};
}

namespace {

CovariateCovariance psd_projected_gamma(const DatasetCollection& collection,
                                        const NoiseModel& noise) {
  const MomentEstimate est = moment_gamma(collection, noise);
  if (est.positive_semidefinite) return CovariateCovariance(est.matrix);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(est.matrix);
  const Vector clipped = eig.eigenvalues().cwiseMax(0.0);
  if (clipped.maxCoeff() <= 0.0) {
    const double eps = noise.variances().mean() * 1e-3;
    return CovariateCovariance(eps * Matrix::Identity(est.matrix.rows(), est.matrix.cols()));
  }
  Matrix out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return CovariateCovariance(0.5 * (out + out.transpose()));
}

}  // namespace

std::pair<EffectsMatrix, FitReport> edata_estimate(const DatasetCollection& collection,
                                                   const NoiseModel& noise, EdataMethod method,
                                                   const EdataOptions& options) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "edata_estimate requires gaussian datasets");
  }
  FitReport report;
  if (method == EdataMethod::em) {
    CovariateCovariance init =
        options.em_init == EmInit::identity
            ? CovariateCovariance(
                  Matrix::Identity(collection.covariate_count(), collection.covariate_count()))
            : psd_projected_gamma(collection, noise);
    auto [gamma, trace] = em_fit_edata(collection, noise, init, options);
    const auto stats = detail::make_stats(collection, noise);
    const auto ls = detail::make_ls_stats(stats);
    Matrix mean(stats.dim, stats.tasks);
    for (Index q = 0; q < stats.tasks; ++q) {
      Matrix m_q =
          gamma.matrix() + stats.data[static_cast<size_t>(q)].noise *
                               ls.gram_inverse[static_cast<size_t>(q)];
      mean.col(q) = gamma.matrix() * Eigen::LLT<Matrix>(std::move(m_q)).solve(ls.beta_ls.col(q));
    }
    report.method = "edata-em";
    report.covariance = gamma.matrix();
    report.covariance_psd = true;
    report.trace = std::move(trace);
    return {EffectsMatrix(std::move(mean)), std::move(report)};
  }

  // moment composition: only meaningful when D <= Q, mirroring the row-exchangeable
  // regime condition
  if (collection.covariate_count() > collection.size()) {
    fail(ErrorCode::infinite_risk_regime,
         "column-exchangeable moment composition requires no more covariates than datasets");
  }
  MomentEstimate est = moment_gamma(collection, noise);
  const auto stats = detail::make_stats(collection, noise);
  const Index d = stats.dim;
  Matrix mean(d, stats.tasks);
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& ds = stats.data[static_cast<size_t>(q)];
    Matrix k = Matrix::Identity(d, d) + est.matrix * (ds.gram / ds.noise);
    Eigen::FullPivLU<Matrix> lu(std::move(k));
    if (!lu.isInvertible()) {
      fail(ErrorCode::singular_system,
           "moment-composed posterior system is singular for dataset " + std::to_string(q));
    }
    mean.col(q) = lu.solve((est.matrix * (ds.xty / ds.noise)).eval());
  }
  report.method = "edata-mm";
  report.covariance = std::move(est.matrix);
  report.covariance_psd = est.positive_semidefinite;
  return {EffectsMatrix(std::move(mean)), std::move(report)};
}

}  // namespace ecov
