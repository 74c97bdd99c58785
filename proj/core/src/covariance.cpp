#include "ecov/covariance.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "internal.hpp"

namespace ecov {

namespace {

using detail::CollectionStats;
using detail::LsStats;

void validate(const EmOptions& options) {
  if (options.max_iterations < 1) fail(ErrorCode::bad_argument, "max_iterations must be >= 1");
  if (!(options.rel_tolerance >= 0.0) || !std::isfinite(options.rel_tolerance)) {
    fail(ErrorCode::bad_argument, "rel_tolerance must be finite and non-negative");
  }
}

// Cov(vec beta_LS) = Sigma (x) I_D + blockdiag(sigma_q^2 G_q^{-1}) in q-major order.
// Positive definite for every PSD Sigma, so EM can ride the boundary (singular
// iterates included) without inverting Sigma or adding jitter.
struct MarginalFactor {
  Eigen::LLT<Matrix> llt;
  double log_det = 0.0;
};

MarginalFactor marginal_factor(const CollectionStats& stats, const LsStats& ls,
                               const Matrix& sigma) {
  const Index d = stats.dim;
  const Index n = stats.n();
  Matrix m = Matrix::Zero(n, n);
  for (Index q = 0; q < stats.tasks; ++q) {
    for (Index p = 0; p < stats.tasks; ++p) {
      m.block(q * d, p * d, d, d).diagonal().array() += sigma(q, p);
    }
    m.block(q * d, q * d, d, d) +=
        stats.data[static_cast<size_t>(q)].noise * ls.gram_inverse[static_cast<size_t>(q)];
  }
  MarginalFactor out;
  out.llt.compute(std::move(m));
  if (out.llt.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, "marginal covariance is not positive definite");
  }
  for (Index i = 0; i < n; ++i) out.log_det += std::log(out.llt.matrixL()(i, i));
  out.log_det *= 2.0;
  return out;
}

}  // namespace

std::pair<TaskCovariance, EmTrace> em_fit_linear(const DatasetCollection& collection,
                                                 const NoiseModel& noise,
                                                 const TaskCovariance& init,
                                                 const EmOptions& options) {
  validate(options);
  if (init.dimension() != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "initial covariance dimension must match dataset count");
  }
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  const Index d = stats.dim;
  const Index n = stats.n();
  const double dim = static_cast<double>(d);
  const Vector beta_vec = ls.beta_ls.reshaped();

  Matrix sigma = init.matrix();
  EmTrace trace;
  trace.sigma_iterates.push_back(sigma);
  Index msteps = 0;

  for (Index t = 0; t < options.max_iterations; ++t) {
    const MarginalFactor marginal = marginal_factor(stats, ls, sigma);
    const Vector w = marginal.llt.solve(beta_vec);
    const double logml = -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) +
                                 marginal.log_det + beta_vec.dot(w));
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
      if (std::abs(logml - prev) < options.rel_tolerance * std::max(1.0, std::abs(logml))) {
        trace.converged = true;
        break;
      }
    } else {
      trace.log_marginal_likelihoods.push_back(logml);
    }
    if (t + 1 == options.max_iterations) break;

    // E-step moments through the marginal: mu = (Sigma (x) I) M^{-1} beta_vec and
    // sum_d V_d = D Sigma - Sigma T Sigma with T_ab = tr[(M^{-1})_ab]
    const Matrix mu = w.reshaped(d, stats.tasks) * sigma;
    const Matrix inverse = marginal.llt.solve(Matrix::Identity(n, n));
    Matrix tmat(stats.tasks, stats.tasks);
    for (Index a = 0; a < stats.tasks; ++a) {
      for (Index b = 0; b < stats.tasks; ++b) {
        tmat(a, b) = inverse.block(a * d, b * d, d, d).trace();
      }
    }
    // M-step: Sigma <- D^{-1} sum_d (mu_d mu_d^T + V_d)
    Matrix next = (mu.transpose() * mu + dim * sigma - sigma * tmat * sigma) / dim;
    sigma = 0.5 * (next + next.transpose());
    ++msteps;
    if (options.record_iterates) trace.sigma_iterates.push_back(sigma);
  }

  if (!options.record_iterates && msteps > 0) trace.sigma_iterates.push_back(sigma);
  trace.iterations = static_cast<Index>(trace.log_marginal_likelihoods.size());
  return {TaskCovariance(sigma), trace};
}

double log_marginal_likelihood(const DatasetCollection& collection, const TaskCovariance& sigma,
                               const NoiseModel& noise) {
  if (sigma.dimension() != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "task covariance dimension must match dataset count");
  }
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  const MarginalFactor marginal = marginal_factor(stats, ls, sigma.matrix());
  const Vector beta_vec = ls.beta_ls.reshaped();
  const double quad = beta_vec.dot(marginal.llt.solve(beta_vec));
  return -0.5 * (static_cast<double>(stats.n()) * std::log(2.0 * std::numbers::pi) +
                 marginal.log_det + quad);
}

MomentEstimate moment_sigma(const DatasetCollection& collection, const NoiseModel& noise) {
  const auto stats = detail::make_stats(collection, noise);
  const auto ls = detail::make_ls_stats(stats);
  Matrix m = ls.beta_ls.transpose() * ls.beta_ls;
  for (Index q = 0; q < stats.tasks; ++q) {
    m(q, q) -= stats.data[static_cast<size_t>(q)].noise *
               ls.gram_inverse[static_cast<size_t>(q)].trace();
  }
  m /= static_cast<double>(stats.dim);
  m = 0.5 * (m + m.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
  return MomentEstimate{std::move(m), eig.eigenvalues().minCoeff() >= 0.0};
}

PseudoStatistics pseudo_statistics(const DatasetCollection& collection, const NoiseModel& noise) {
  const auto stats = detail::make_stats(collection, noise);
  const Index d = stats.dim;
  const Index t = stats.tasks;

  // whiten each dataset through the eigendecomposition of its Gram matrix:
  // z^q = diag(1/omega) R^T X^qT Y^q has E z^q = W^q beta^q, Cov = sigma_q^2 I
  // with W^q = diag(omega) R^T
  std::vector<Matrix> w(static_cast<size_t>(t));
  PseudoStatistics out;
  out.pseudo_responses.resize(d, t);
  out.noise_vector.resize(t);
  for (Index q = 0; q < t; ++q) {
    const auto& ds = stats.data[static_cast<size_t>(q)];
    Eigen::SelfAdjointEigenSolver<Matrix> eig(ds.gram);
    if (eig.info() != Eigen::Success) {
      fail(ErrorCode::singular_system, "dataset " + std::to_string(q) +
                                           ": Gram eigendecomposition failed");
    }
    const Vector& evals = eig.eigenvalues();
    if (!(evals.minCoeff() > 0.0) ||
        evals.minCoeff() <=
            std::numeric_limits<double>::epsilon() * static_cast<double>(d) * evals.maxCoeff()) {
      fail(ErrorCode::rank_deficient_design,
           "dataset " + std::to_string(q) + ": Gram matrix is numerically singular");
    }
    const Vector omega = evals.cwiseSqrt();
    w[static_cast<size_t>(q)] = omega.asDiagonal() * eig.eigenvectors().transpose();
    out.pseudo_responses.col(q) =
        (eig.eigenvectors().transpose() * ds.xty).cwiseQuotient(omega);
    out.noise_vector(q) = ds.noise;
  }

  out.trace_inverse_weights.resize(t, t);
  for (Index q = 0; q < t; ++q) {
    for (Index p = q; p < t; ++p) {
      const double tr =
          (w[static_cast<size_t>(q)].array() * w[static_cast<size_t>(p)].array()).sum();
      if (tr == 0.0) {
        fail(ErrorCode::singular_system, "trace weight between datasets " + std::to_string(q) +
                                             " and " + std::to_string(p) + " vanishes");
      }
      out.trace_inverse_weights(q, p) = 1.0 / tr;
      out.trace_inverse_weights(p, q) = 1.0 / tr;
    }
  }
  return out;
}

Matrix practical_moment_raw(const PseudoStatistics& stats) {
  const Index d = stats.pseudo_responses.rows();
  Matrix m = stats.pseudo_responses.transpose() * stats.pseudo_responses;
  m.diagonal() -= static_cast<double>(d) * stats.noise_vector;
  m = (m.array() * stats.trace_inverse_weights.array()).matrix().eval();
  return 0.5 * (m + m.transpose());
}

TaskCovariance practical_moment_sigma(const DatasetCollection& collection,
                                      const NoiseModel& noise, double condition_cap) {
  if (!(condition_cap >= 1.0) || !std::isfinite(condition_cap)) {
    fail(ErrorCode::bad_argument, "condition_cap must be finite and >= 1");
  }
  const Matrix raw = practical_moment_raw(pseudo_statistics(collection, noise));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(raw);
  const Vector& evals = eig.eigenvalues();
  const double top = evals.maxCoeff();
  if (top <= 0.0) {
    // nothing salvageable: fall back to a small multiple of the identity
    const double eps = noise.variances().mean() * 1e-3;
    return TaskCovariance(eps * Matrix::Identity(raw.rows(), raw.cols()));
  }
  const Vector clipped = evals.cwiseMax(top / condition_cap);
  Matrix out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return TaskCovariance(0.5 * (out + out.transpose()));
}

SvdShrinkageResult mle_sigma_orthogonal(const EffectsMatrix& beta_ls, double shared_variance) {
  const Index d = beta_ls.covariate_count();
  const Index t = beta_ls.dataset_count();
  if (d <= t) {
    fail(ErrorCode::regime_violation,
         "closed-form maximizer requires more covariates than datasets (got " +
             std::to_string(d) + " x " + std::to_string(t) + ")");
  }
  if (!(shared_variance > 0.0) || !std::isfinite(shared_variance)) {
    fail(ErrorCode::bad_argument, "shared_variance must be strictly positive");
  }
  Eigen::JacobiSVD<Matrix> svd(beta_ls.values(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU();   // D x Q
  Matrix v = svd.matrixV();   // Q x Q
  const Vector s = svd.singularValues();

  // fix the sign ambiguity: the dominant entry of each right vector is positive
  for (Index j = 0; j < t; ++j) {
    Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0.0) {
      v.col(j) = -v.col(j);
      u.col(j) = -u.col(j);
    }
  }

  Vector lambda = s.cwiseProduct(s);
  Vector sigma_evals(t);
  Vector beta_factors(t);
  const double dd = static_cast<double>(d);
  for (Index j = 0; j < t; ++j) {
    sigma_evals(j) = std::max(lambda(j) / dd - shared_variance, 0.0);
    beta_factors(j) = lambda(j) > 0.0 ? std::max(s(j) - shared_variance * dd / s(j), 0.0) : 0.0;
  }
  Matrix sigma = v * sigma_evals.asDiagonal() * v.transpose();
  Matrix beta = u * beta_factors.asDiagonal() * v.transpose();
  return SvdShrinkageResult{std::move(u), std::move(v), std::move(lambda),
                            TaskCovariance(0.5 * (sigma + sigma.transpose())),
                            EffectsMatrix(std::move(beta))};
}

namespace {

Matrix posterior_mean_only(const CollectionStats& stats, const Matrix& sigma,
                           const SolverOptions& options) {
  if (detail::is_zero_matrix(sigma)) return Matrix::Zero(stats.dim, stats.tasks);
  const Matrix sigma_j = detail::apply_jitter(sigma, options.jitter_scale);
  const detail::SpdFactor prior = detail::factor_spd(sigma_j, "task covariance (after jitter)");
  const bool dense = options.mode == SolverMode::dense ||
                     (options.mode == SolverMode::auto_select && stats.n() <= 2000);
  if (dense) {
    return detail::dense_posterior(stats, prior.inverse, false, false).mean;
  }
  return detail::cg_posterior(stats, sigma_j, prior.inverse, options).mean;
}

// posterior mean for a possibly indefinite Sigma, in inverse-free form:
// [I + (Sigma (x) I) blockdiag(G_q/sigma_q^2)] vec(mu) = (Sigma (x) I) vec(rhs)
Matrix indefinite_posterior_mean(const CollectionStats& stats, const Matrix& sigma) {
  const Index d = stats.dim;
  const Index n = stats.n();
  Matrix k = Matrix::Identity(n, n);
  for (Index p = 0; p < stats.tasks; ++p) {
    const Matrix scaled =
        stats.data[static_cast<size_t>(p)].gram / stats.data[static_cast<size_t>(p)].noise;
    for (Index q = 0; q < stats.tasks; ++q) {
      k.block(q * d, p * d, d, d) += sigma(q, p) * scaled;
    }
  }
  Eigen::FullPivLU<Matrix> lu(std::move(k));
  if (!lu.isInvertible()) {
    fail(ErrorCode::singular_system,
         "moment-composed posterior system is singular; the moment estimate is too indefinite");
  }
  const Matrix rhs = stats.rhs * sigma;
  Vector mu = lu.solve(rhs.reshaped().eval());
  return mu.reshaped(d, stats.tasks);
}

}  // namespace

std::pair<EffectsMatrix, FitReport> ecov_estimate(const DatasetCollection& collection,
                                                  const NoiseModel& noise, EcovMethod method,
                                                  const EstimateOptions& options) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "ecov_estimate requires gaussian datasets");
  }
  validate(options.solver);
  FitReport report;
  switch (method) {
    case EcovMethod::em: {
      TaskCovariance init =
          options.em_init == EmInit::identity
              ? TaskCovariance(Matrix::Identity(collection.size(), collection.size()))
              : practical_moment_sigma(collection, noise, options.condition_cap);
      auto [sigma, trace] = em_fit_linear(collection, noise, init, options.em);
      const auto stats = detail::make_stats(collection, noise);
      Matrix mean = posterior_mean_only(stats, sigma.matrix(), options.solver);
      report.method = "ecov-em";
      report.covariance = sigma.matrix();
      report.covariance_psd = true;
      report.trace = std::move(trace);
      return {EffectsMatrix(std::move(mean)), std::move(report)};
    }
    case EcovMethod::mm: {
      MomentEstimate est = moment_sigma(collection, noise);
      const auto stats = detail::make_stats(collection, noise);
      Matrix mean = indefinite_posterior_mean(stats, est.matrix);
      report.method = "ecov-mm";
      report.covariance = std::move(est.matrix);
      report.covariance_psd = est.positive_semidefinite;
      return {EffectsMatrix(std::move(mean)), std::move(report)};
    }
    case EcovMethod::mm_practical: {
      TaskCovariance sigma = practical_moment_sigma(collection, noise, options.condition_cap);
      const auto stats = detail::make_stats(collection, noise);
      Matrix mean = posterior_mean_only(stats, sigma.matrix(), options.solver);
      report.method = "ecov-mm-practical";
      report.covariance = sigma.matrix();
      report.covariance_psd = true;
      return {EffectsMatrix(std::move(mean)), std::move(report)};
    }
    case EcovMethod::mle_orthogonal: {
      const auto stats = detail::make_stats(collection, noise);
      const Index d = stats.dim;
      double shared = 0.0;
      for (Index q = 0; q < stats.tasks; ++q) {
        const auto& ds = stats.data[static_cast<size_t>(q)];
        const double scale = ds.gram.trace() / static_cast<double>(d);
        const double dev =
            (ds.gram - scale * Matrix::Identity(d, d)).norm();
        if (!(dev <= 1e-8 * scale * std::sqrt(static_cast<double>(d)))) {
          fail(ErrorCode::regime_violation,
               "dataset " + std::to_string(q) + ": design is not orthogonal");
        }
        const double v = ds.noise / scale;
        if (q == 0) {
          shared = v;
        } else if (std::abs(v - shared) > 1e-8 * std::max(1.0, std::abs(shared))) {
          fail(ErrorCode::regime_violation,
               "datasets do not share a common rescaled noise variance");
        }
      }
      const auto ls = detail::make_ls_stats(stats);
      auto res = mle_sigma_orthogonal(EffectsMatrix(ls.beta_ls), shared);
      report.method = "ecov-mle";
      report.covariance = res.sigma_hat.matrix();
      report.covariance_psd = true;
      return {std::move(res.beta_hat), std::move(report)};
    }
  }
  fail(ErrorCode::bad_argument, "unknown estimation method");
}

}  // namespace ecov
