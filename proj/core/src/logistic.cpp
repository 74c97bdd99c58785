#include "ecov/logistic.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include "internal.hpp"

namespace ecov {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

void check_binary(const DatasetCollection& collection) {
  if (collection.kind() != DatasetKind::binary) {
    fail(ErrorCode::bad_argument, "logistic operations require binary datasets");
  }
}

void check_shapes(const DatasetCollection& collection, const TaskCovariance& sigma,
                  const Matrix& beta) {
  if (sigma.dimension() != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "task covariance dimension must match dataset count");
  }
  if (beta.rows() != collection.covariate_count() || beta.cols() != collection.size()) {
    fail(ErrorCode::dimension_mismatch, "effects matrix must be covariates x datasets");
  }
  if (!beta.allFinite()) fail(ErrorCode::non_finite_value, "effects matrix has non-finite entries");
}

detail::SpdFactor prior_factor(const TaskCovariance& sigma, double jitter_scale) {
  const Matrix sigma_j = detail::apply_jitter(sigma.matrix(), jitter_scale);
  return detail::factor_spd(sigma_j, "task covariance (after jitter)");
}

double log_likelihood(const DatasetCollection& collection, const Matrix& beta) {
  double total = 0.0;
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    const Vector z = ds.design() * beta.col(q);
    for (Index i = 0; i < z.size(); ++i) {
      total += ds.responses()(i) * z(i) - softplus(z(i));
    }
  }
  return total;
}

double log_posterior_at(const DatasetCollection& collection, const detail::SpdFactor& prior,
                        const Matrix& beta) {
  const double dim = static_cast<double>(beta.rows());
  const double quad = (beta.array() * (beta * prior.inverse).array()).sum();
  const double log_prior = -0.5 * (quad + dim * prior.log_det +
                                   dim * static_cast<double>(beta.cols()) *
                                       std::log(2.0 * std::numbers::pi));
  return log_likelihood(collection, beta) + log_prior;
}

Matrix gradient_at(const DatasetCollection& collection, const detail::SpdFactor& prior,
                   const Matrix& beta) {
  Matrix grad = -(beta * prior.inverse);
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& ds = collection.dataset(q);
    const Vector z = ds.design() * beta.col(q);
    Vector resid(z.size());
    for (Index i = 0; i < z.size(); ++i) resid(i) = ds.responses()(i) - sigmoid(z(i));
    grad.col(q).noalias() += ds.design().transpose() * resid;
  }
  return grad;
}

// sufficient statistics of the Gaussianized problem at beta: gram <- X^qT W_q X^q with
// W_q = diag(p (1 - p)); shares the assembly/cg machinery with the linear posterior
detail::CollectionStats weighted_stats(const DatasetCollection& collection, const Matrix& beta) {
  detail::CollectionStats stats;
  stats.dim = collection.covariate_count();
  stats.tasks = collection.size();
  stats.rhs = Matrix::Zero(stats.dim, stats.tasks);
  stats.data.reserve(static_cast<size_t>(stats.tasks));
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& ds = collection.dataset(q);
    const Vector z = ds.design() * beta.col(q);
    Vector w(z.size());
    for (Index i = 0; i < z.size(); ++i) {
      const double p = sigmoid(z(i));
      w(i) = p * (1.0 - p);
    }
    detail::DatasetStats d;
    d.gram.noalias() = ds.design().transpose() * w.asDiagonal() * ds.design();
    d.xty = Vector::Zero(stats.dim);
    d.noise = 1.0;
    stats.data.push_back(std::move(d));
  }
  return stats;
}

bool use_dense(const SolverOptions& options, Index n) {
  if (options.mode == SolverMode::dense) return true;
  if (options.mode == SolverMode::cg) return false;
  return n <= 2000;
}

}  // namespace

double log_posterior_logistic(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const Matrix& beta) {
  check_binary(collection);
  check_shapes(collection, sigma, beta);
  return log_posterior_at(collection, prior_factor(sigma, 1e-10), beta);
}

Matrix log_posterior_gradient(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const Matrix& beta) {
  check_binary(collection);
  check_shapes(collection, sigma, beta);
  return gradient_at(collection, prior_factor(sigma, 1e-10), beta);
}

Matrix log_posterior_neg_hessian(const DatasetCollection& collection, const TaskCovariance& sigma,
                                 const Matrix& beta) {
  check_binary(collection);
  check_shapes(collection, sigma, beta);
  const auto prior = prior_factor(sigma, 1e-10);
  return detail::assemble_precision(weighted_stats(collection, beta), prior.inverse);
}

MapResult map_newton(const DatasetCollection& collection, const TaskCovariance& sigma,
                     const Matrix& init, const NewtonOptions& options) {
  check_binary(collection);
  check_shapes(collection, sigma, init);
  if (options.max_iterations < 1) fail(ErrorCode::bad_argument, "max_iterations must be >= 1");
  if (!(options.grad_tolerance > 0.0)) {
    fail(ErrorCode::bad_argument, "grad_tolerance must be positive");
  }
  validate(options.solver);
  const auto prior = prior_factor(sigma, options.jitter_scale);

  MapResult result;
  result.mode = init;
  double obj = log_posterior_at(collection, prior, result.mode);
  if (!std::isfinite(obj)) {
    fail(ErrorCode::nonfinite_objective, "log posterior is not finite at the initial point");
  }

  for (Index it = 0; it < options.max_iterations; ++it) {
    const Matrix grad = gradient_at(collection, prior, result.mode);
    result.iterations = it;
    result.log_posterior = obj;
    if (grad.norm() <= options.grad_tolerance * std::max(1.0, result.mode.norm())) {
      result.converged = true;
      return result;
    }

    const auto wstats = weighted_stats(collection, result.mode);
    Matrix step;
    if (use_dense(options.solver, wstats.n())) {
      Matrix h = detail::assemble_precision(wstats, prior.inverse);
      Eigen::LLT<Matrix> llt(std::move(h));
      if (llt.info() != Eigen::Success) {
        fail(ErrorCode::singular_system, "Newton system is not positive definite");
      }
      step = llt.solve(grad.reshaped().eval()).reshaped(grad.rows(), grad.cols());
    } else {
      step = detail::cg_system(wstats, prior.inverse, grad,
                               Matrix::Zero(grad.rows(), grad.cols()), options.solver)
                 .mean;
    }

    // damped update: halve until the strictly concave objective stops decreasing
    double scale = 1.0;
    bool accepted = false;
    for (Index h = 0; h <= options.max_step_halvings; ++h) {
      const Matrix cand = result.mode + scale * step;
      const double cand_obj = log_posterior_at(collection, prior, cand);
      if (std::isfinite(cand_obj) && cand_obj >= obj - 1e-10 * std::max(1.0, std::abs(obj))) {
        result.mode = cand;
        obj = cand_obj;
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted) {
      fail(ErrorCode::newton_failure,
           "step halving failed to improve the objective at iteration " + std::to_string(it));
    }
  }

  const Matrix grad = gradient_at(collection, prior, result.mode);
  result.log_posterior = obj;
  result.iterations = options.max_iterations;
  if (grad.norm() <= options.grad_tolerance * std::max(1.0, result.mode.norm())) {
    result.converged = true;
    return result;
  }
  fail(ErrorCode::newton_failure,
       "Newton did not reach the gradient tolerance within " +
           std::to_string(options.max_iterations) + " iterations");
}

LaplaceSummary laplace_estep(const DatasetCollection& collection, const TaskCovariance& sigma,
                             const NewtonOptions& options, const Matrix* warm_start) {
  const Matrix init = warm_start != nullptr
                          ? *warm_start
                          : Matrix::Zero(collection.covariate_count(), collection.size());
  MapResult map = map_newton(collection, sigma, init, options);

  const auto prior = prior_factor(sigma, options.jitter_scale);
  const auto wstats = weighted_stats(collection, map.mode);
  LaplaceSummary summary;
  summary.log_posterior = map.log_posterior;
  if (use_dense(options.solver, wstats.n())) {
    auto dense = detail::dense_posterior(wstats, prior.inverse, /*want_cov=*/false,
                                         /*want_blocks=*/true);
    summary.covariate_blocks = std::move(dense.blocks);
    summary.log_evidence =
        map.log_posterior +
        0.5 * static_cast<double>(wstats.n()) * std::log(2.0 * std::numbers::pi) -
        0.5 * dense.log_det_precision;
  } else {
    summary.covariate_blocks =
        detail::cg_covariate_blocks(wstats, sigma.matrix(), prior.inverse, options.solver);
    summary.log_evidence = std::numeric_limits<double>::quiet_NaN();
  }
  summary.mode = std::move(map.mode);
  return summary;
}

LogisticEmFit em_fit_logistic(const DatasetCollection& collection, const TaskCovariance& init,
                              const EmOptions& em, const NewtonOptions& newton) {
  check_binary(collection);
  if (em.max_iterations < 1) fail(ErrorCode::bad_argument, "max_iterations must be >= 1");
  if (!(em.rel_tolerance >= 0.0)) fail(ErrorCode::bad_argument, "rel_tolerance must be >= 0");
  const double dim = static_cast<double>(collection.covariate_count());

  Matrix sigma = init.matrix();
  EmTrace trace;
  trace.sigma_iterates.push_back(sigma);
  Matrix warm = Matrix::Zero(collection.covariate_count(), collection.size());
  bool have_warm = false;

  for (Index t = 0; t < em.max_iterations; ++t) {
    auto e = laplace_estep(collection, TaskCovariance(sigma), newton,
                           have_warm ? &warm : nullptr);
    trace.log_marginal_likelihoods.push_back(e.log_evidence);
    warm = e.mode;
    have_warm = true;

    Matrix next = e.mode.transpose() * e.mode;
    for (const auto& block : e.covariate_blocks) next += block;
    next /= dim;
    next = 0.5 * (next + next.transpose()).eval();
    const double delta = (next - sigma).norm();
    const double scale = std::max(1.0, sigma.norm());
    sigma = std::move(next);
    if (em.record_iterates) trace.sigma_iterates.push_back(sigma);
    if (delta < em.rel_tolerance * scale) {
      trace.converged = true;
      break;
    }
  }
  if (!em.record_iterates) trace.sigma_iterates.push_back(sigma);
  trace.iterations = static_cast<Index>(trace.log_marginal_likelihoods.size());

  LogisticEmFit fit{TaskCovariance(sigma), std::move(trace), Matrix()};
  fit.map = map_newton(collection, fit.sigma, warm, newton).mode;
  return fit;
}

Vector predict_proba(const EffectsMatrix& beta, const Matrix& design, Index task) {
  if (task < 0 || task >= beta.dataset_count()) {
    fail(ErrorCode::bad_argument, "task index out of range");
  }
  if (design.cols() != beta.covariate_count()) {
    fail(ErrorCode::dimension_mismatch, "design has " + std::to_string(design.cols()) +
                                            " columns, effects have " +
                                            std::to_string(beta.covariate_count()));
  }
  if (!design.allFinite()) fail(ErrorCode::non_finite_value, "design has non-finite entries");
  const Vector z = design * beta.values().col(task);
  Vector p(z.size());
  for (Index i = 0; i < z.size(); ++i) p(i) = sigmoid(z(i));
  return p;
}

}  // namespace ecov
