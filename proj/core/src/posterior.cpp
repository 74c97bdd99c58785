#include "ecov/posterior.hpp"

#include <cmath>
#include <string>

#include "internal.hpp"

namespace ecov {

namespace detail {

CollectionStats make_stats(const DatasetCollection& collection, const NoiseModel& noise) {
  if (noise.size() != collection.size()) {
    fail(ErrorCode::dimension_mismatch,
         "noise model covers " + std::to_string(noise.size()) + " datasets, collection has " +
             std::to_string(collection.size()));
  }
  CollectionStats stats;
  stats.dim = collection.covariate_count();
  stats.tasks = collection.size();
  stats.data.reserve(static_cast<size_t>(stats.tasks));
  stats.rhs.resize(stats.dim, stats.tasks);
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& ds = collection.dataset(q);
    DatasetStats d;
    d.gram.noalias() = ds.design().transpose() * ds.design();
    d.xty.noalias() = ds.design().transpose() * ds.responses();
    d.noise = noise.variance(q);
    stats.rhs.col(q) = d.xty / d.noise;
    stats.data.push_back(std::move(d));
  }
  return stats;
}

LsStats make_ls_stats(const CollectionStats& stats) {
  LsStats ls;
  ls.beta_ls.resize(stats.dim, stats.tasks);
  ls.gram_inverse.reserve(static_cast<size_t>(stats.tasks));
  for (Index q = 0; q < stats.tasks; ++q) {
    Eigen::LLT<Matrix> llt(stats.data[static_cast<size_t>(q)].gram);
    if (llt.info() != Eigen::Success) {
      fail(ErrorCode::rank_deficient_design,
           "dataset " + std::to_string(q) + ": Gram matrix is not positive definite");
    }
    ls.beta_ls.col(q) = llt.solve(stats.data[static_cast<size_t>(q)].xty);
    ls.gram_inverse.push_back(llt.solve(Matrix::Identity(stats.dim, stats.dim)));
  }
  return ls;
}

bool is_zero_matrix(const Matrix& m) { return m.cwiseAbs().maxCoeff() == 0.0; }

Matrix apply_jitter(const Matrix& sigma, double jitter_scale) {
  if (jitter_scale <= 0.0) return sigma;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma, Eigen::EigenvaluesOnly);
  const double floor = jitter_scale * sigma.trace() / static_cast<double>(sigma.rows());
  if (eig.eigenvalues().minCoeff() < floor) {
    return sigma + floor * Matrix::Identity(sigma.rows(), sigma.cols());
  }
  return sigma;
}

Matrix assemble_precision(const CollectionStats& stats, const Matrix& sigma_inv) {
  const Index d = stats.dim;
  const Index n = stats.n();
  Matrix a = Matrix::Zero(n, n);
  for (Index q = 0; q < stats.tasks; ++q) {
    a.block(q * d, q * d, d, d) = stats.data[static_cast<size_t>(q)].gram /
                                  stats.data[static_cast<size_t>(q)].noise;
  }
  for (Index q = 0; q < stats.tasks; ++q) {
    for (Index p = 0; p < stats.tasks; ++p) {
      a.block(q * d, p * d, d, d).diagonal().array() += sigma_inv(q, p);
    }
  }
  return a;
}

DenseResult dense_posterior(const CollectionStats& stats, const Matrix& sigma_inv, bool want_cov,
                            bool want_blocks) {
  const Index d = stats.dim;
  const Index t = stats.tasks;
  const Index n = stats.n();
  Matrix a = assemble_precision(stats, sigma_inv);
  Eigen::LLT<Matrix> llt(std::move(a));
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, "posterior precision is not positive definite");
  }
  DenseResult result;
  result.log_det_precision = 0.0;
  for (Index i = 0; i < n; ++i) result.log_det_precision += std::log(llt.matrixL()(i, i));
  result.log_det_precision *= 2.0;

  Vector mu = llt.solve(stats.rhs.reshaped());
  result.mean = mu.reshaped(d, t);

  if (want_cov || want_blocks) {
    Matrix v = llt.solve(Matrix::Identity(n, n));
    if (want_blocks) {
      result.blocks.resize(static_cast<size_t>(d));
      for (Index i = 0; i < d; ++i) {
        Matrix block(t, t);
        for (Index q = 0; q < t; ++q) {
          for (Index p = 0; p < t; ++p) {
            block(q, p) = v(q * d + i, p * d + i);
          }
        }
        result.blocks[static_cast<size_t>(i)] = 0.5 * (block + block.transpose());
      }
    }
    if (want_cov) result.cov_qmajor = std::move(v);
  }
  return result;
}

namespace {

// A v in q-major layout without materializing A: vec(v Sigma^{-1}) + per-column Gram terms
Matrix apply_precision(const CollectionStats& stats, const Matrix& sigma_inv, const Matrix& v) {
  Matrix out = v * sigma_inv;
  for (Index q = 0; q < stats.tasks; ++q) {
    out.col(q).noalias() +=
        stats.data[static_cast<size_t>(q)].gram * v.col(q) / stats.data[static_cast<size_t>(q)].noise;
  }
  return out;
}

}  // namespace

CgInfo cg_system(const CollectionStats& stats, const Matrix& sigma_inv, const Matrix& rhs,
                 Matrix x, const SolverOptions& options) {
  const double bnorm = rhs.norm();
  CgInfo info;
  if (bnorm == 0.0) {
    info.mean = Matrix::Zero(rhs.rows(), rhs.cols());
    return info;
  }
  const Index max_iter =
      options.cg_max_iterations > 0 ? options.cg_max_iterations : stats.n();
  Matrix r = rhs - apply_precision(stats, sigma_inv, x);
  double rr = r.squaredNorm();
  const double tol = options.cg_rel_tolerance;
  auto finish = [&](Index iterations) {
    info.mean = std::move(x);
    info.iterations = iterations;
    info.relative_residual = std::sqrt(rr) / bnorm;
  };
  if (std::sqrt(rr) / bnorm <= tol) {
    finish(0);
    return info;
  }
  Matrix p = r;
  for (Index k = 1; k <= max_iter; ++k) {
    Matrix ap = apply_precision(stats, sigma_inv, p);
    const double pap = (p.array() * ap.array()).sum();
    if (!(pap > 0.0)) {
      fail(ErrorCode::singular_system, "cg encountered a non-positive curvature direction");
    }
    const double alpha = rr / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) / bnorm <= tol || rr_next == 0.0) {
      rr = rr_next;
      finish(k);
      return info;
    }
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  if (tol == 0.0) {
    finish(max_iter);
    return info;
  }
  fail(ErrorCode::cg_no_convergence,
       "cg did not reach tolerance " + std::to_string(tol) + " within " +
           std::to_string(max_iter) + " iterations (residual " +
           std::to_string(std::sqrt(rr) / bnorm) + ")");
}

namespace {

// posterior mean of each dataset conditioned on that dataset alone; exact for diagonal Sigma
Matrix per_dataset_init(const CollectionStats& stats, const Matrix& sigma) {
  Matrix x(stats.dim, stats.tasks);
  for (Index q = 0; q < stats.tasks; ++q) {
    const auto& d = stats.data[static_cast<size_t>(q)];
    Matrix prec = d.gram / d.noise;
    prec.diagonal().array() += 1.0 / sigma(q, q);
    x.col(q) = Eigen::LLT<Matrix>(prec).solve(d.xty / d.noise);
  }
  return x;
}

}  // namespace

CgInfo cg_posterior(const CollectionStats& stats, const Matrix& sigma, const Matrix& sigma_inv,
                    const SolverOptions& options) {
  return cg_system(stats, sigma_inv, stats.rhs, per_dataset_init(stats, sigma), options);
}

std::vector<Matrix> cg_covariate_blocks(const CollectionStats& stats, const Matrix& sigma,
                                        const Matrix& sigma_inv, const SolverOptions& options) {
  (void)sigma;
  const Index d = stats.dim;
  const Index t = stats.tasks;
  std::vector<Matrix> blocks(static_cast<size_t>(d));
  for (Index i = 0; i < d; ++i) {
    Matrix block(t, t);
    for (Index p = 0; p < t; ++p) {
      Matrix e = Matrix::Zero(d, t);
      e(i, p) = 1.0;
      CgInfo sol = cg_system(stats, sigma_inv, e, Matrix::Zero(d, t), options);
      for (Index q = 0; q < t; ++q) block(q, p) = sol.mean(i, q);
    }
    blocks[static_cast<size_t>(i)] = 0.5 * (block + block.transpose());
  }
  return blocks;
}

Matrix qmajor_to_dmajor(const Matrix& cov, Index dim, Index tasks) {
  Matrix out(dim * tasks, dim * tasks);
  for (Index i = 0; i < dim; ++i) {
    for (Index q = 0; q < tasks; ++q) {
      for (Index j = 0; j < dim; ++j) {
        for (Index p = 0; p < tasks; ++p) {
          out(i * tasks + q, j * tasks + p) = cov(q * dim + i, p * dim + j);
        }
      }
    }
  }
  return out;
}

}  // namespace detail

void validate(const SolverOptions& options) {
  if (!(options.cg_rel_tolerance >= 0.0) || options.cg_rel_tolerance >= 1.0) {
    fail(ErrorCode::bad_argument, "cg_rel_tolerance must lie in [0, 1)");
  }
  if (options.cg_max_iterations < 0) {
    fail(ErrorCode::bad_argument, "cg_max_iterations must be non-negative");
  }
  if (!(options.jitter_scale >= 0.0)) {
    fail(ErrorCode::bad_argument, "jitter_scale must be non-negative");
  }
}

namespace {

void check_gaussian(const DatasetCollection& collection) {
  if (collection.kind() != DatasetKind::gaussian) {
    fail(ErrorCode::bad_argument, "posterior inference requires gaussian datasets");
  }
}

void check_sigma_dim(const TaskCovariance& sigma, const DatasetCollection& collection) {
  if (sigma.dimension() != collection.size()) {
    fail(ErrorCode::dimension_mismatch,
         "task covariance is " + std::to_string(sigma.dimension()) + "x" +
             std::to_string(sigma.dimension()) + " but the collection has " +
             std::to_string(collection.size()) + " datasets");
  }
}

SolverMode resolve_mode(const SolverOptions& options, Index n) {
  if (options.mode != SolverMode::auto_select) return options.mode;
  return n <= 2000 ? SolverMode::dense : SolverMode::cg;
}

Matrix invert_spd(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, std::string(what) + " is not positive definite");
  }
  return llt.solve(Matrix::Identity(m.rows(), m.cols()));
}

}  // namespace

PosteriorSummary posterior_gaussian(const DatasetCollection& collection,
                                    const TaskCovariance& sigma, const NoiseModel& noise,
                                    const SolverOptions& options) {
  check_gaussian(collection);
  check_sigma_dim(sigma, collection);
  validate(options);
  const Index d = collection.covariate_count();
  const Index t = collection.size();

  PosteriorSummary summary;
  if (detail::is_zero_matrix(sigma.matrix())) {
    // degenerate prior: posterior collapses to the prior mean 0
    summary.mean = Matrix::Zero(d, t);
    summary.covariate_blocks.assign(static_cast<size_t>(d), Matrix::Zero(t, t));
    summary.full_covariance = Matrix::Zero(d * t, d * t);
    return summary;
  }

  auto stats = detail::make_stats(collection, noise);
  const Matrix sigma_j = detail::apply_jitter(sigma.matrix(), options.jitter_scale);
  const Matrix sigma_inv = invert_spd(sigma_j, "task covariance (after jitter)");

  if (resolve_mode(options, stats.n()) == SolverMode::dense) {
    auto dense = detail::dense_posterior(stats, sigma_inv, /*want_cov=*/true, /*want_blocks=*/true);
    summary.mean = std::move(dense.mean);
    summary.covariate_blocks = std::move(dense.blocks);
    summary.full_covariance = detail::qmajor_to_dmajor(dense.cov_qmajor, d, t);
  } else {
    auto cg = detail::cg_posterior(stats, sigma_j, sigma_inv, options);
    summary.mean = std::move(cg.mean);
    summary.cg_iterations = cg.iterations;
    if (options.want_covariate_blocks) {
      summary.covariate_blocks = detail::cg_covariate_blocks(stats, sigma_j, sigma_inv, options);
    }
  }
  return summary;
}

EffectsMatrix posterior_mean_orthogonal(const EffectsMatrix& beta_ls, const TaskCovariance& sigma,
                                        double shared_variance) {
  if (!(shared_variance > 0.0) || !std::isfinite(shared_variance)) {
    fail(ErrorCode::bad_argument, "shared_variance must be strictly positive");
  }
  if (sigma.dimension() != beta_ls.dataset_count()) {
    fail(ErrorCode::dimension_mismatch, "task covariance dimension must match dataset count");
  }
  const Index t = sigma.dimension();
  Matrix m = sigma.matrix() / shared_variance + Matrix::Identity(t, t);
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, "sigma/shared_variance + I is not positive definite");
  }
  Matrix correction = llt.solve(beta_ls.values().transpose()).transpose();
  return EffectsMatrix(beta_ls.values() - correction);
}

CgInfo posterior_mean_cg_info(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const NoiseModel& noise, const SolverOptions& options) {
  check_gaussian(collection);
  check_sigma_dim(sigma, collection);
  validate(options);
  if (detail::is_zero_matrix(sigma.matrix())) {
    CgInfo info;
    info.mean = Matrix::Zero(collection.covariate_count(), collection.size());
    return info;
  }
  auto stats = detail::make_stats(collection, noise);
  const Matrix sigma_j = detail::apply_jitter(sigma.matrix(), options.jitter_scale);
  const Matrix sigma_inv = invert_spd(sigma_j, "task covariance (after jitter)");
  return detail::cg_posterior(stats, sigma_j, sigma_inv, options);
}

EffectsMatrix posterior_mean_cg(const DatasetCollection& collection, const TaskCovariance& sigma,
                                const NoiseModel& noise, const SolverOptions& options) {
  return EffectsMatrix(posterior_mean_cg_info(collection, sigma, noise, options).mean);
}

}  // namespace ecov
