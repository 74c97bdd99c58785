#pragma once

// shared implementation details: per-dataset sufficient statistics and the
// dataset-major (q-major) dense/cg posterior solves that EM and the public
// posterior operations are built on

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ecov/model.hpp"
#include "ecov/posterior.hpp"

namespace ecov::detail {

struct DatasetStats {
  Matrix gram;   // X^qT X^q
  Vector xty;    // X^qT Y^q
  double noise;  // sigma_q^2
};

struct CollectionStats {
  Index dim = 0;    // D
  Index tasks = 0;  // Q
  std::vector<DatasetStats> data;
  Matrix rhs;  // D x Q, column q = xty_q / noise_q

  Index n() const { return dim * tasks; }
};

CollectionStats make_stats(const DatasetCollection& collection, const NoiseModel& noise);

// least-squares solutions and Gram inverses on top of the stats; errors on
// rank-deficient grams (required by the marginal-likelihood path)
struct LsStats {
  Matrix beta_ls;  // D x Q
  std::vector<Matrix> gram_inverse;
};
LsStats make_ls_stats(const CollectionStats& stats);

bool is_zero_matrix(const Matrix& m);

// policy: if any eigenvalue < jitter_scale * trace/dim, add jitter_scale * trace/dim * I
Matrix apply_jitter(const Matrix& sigma, double jitter_scale);

struct DenseResult {
  Matrix mean;                 // D x Q
  std::vector<Matrix> blocks;  // V_d, Q x Q each
  Matrix cov_qmajor;           // DQ x DQ, only if want_cov
  double log_det_precision = 0.0;
};

// posterior precision in q-major layout: A = Sigma^{-1} (x) I_D + blockdiag(G_q / noise_q)
Matrix assemble_precision(const CollectionStats& stats, const Matrix& sigma_inv);

DenseResult dense_posterior(const CollectionStats& stats, const Matrix& sigma_inv, bool want_cov,
                            bool want_blocks);

// conjugate gradients on A x = rhs with A = Sigma^{-1} (x) I_D + blockdiag(G_q / noise_q),
// never materializing A; rhs and iterates are D x Q matrices in q-major correspondence
CgInfo cg_system(const CollectionStats& stats, const Matrix& sigma_inv, const Matrix& rhs,
                 Matrix init, const SolverOptions& options);

CgInfo cg_posterior(const CollectionStats& stats, const Matrix& sigma, const Matrix& sigma_inv,
                    const SolverOptions& options);

// V_d blocks in cg mode: Q unit-vector solves per covariate
std::vector<Matrix> cg_covariate_blocks(const CollectionStats& stats, const Matrix& sigma,
                                        const Matrix& sigma_inv, const SolverOptions& options);

Matrix qmajor_to_dmajor(const Matrix& cov, Index dim, Index tasks);

struct SpdFactor {
  Matrix inverse;
  double log_det = 0.0;
};

inline SpdFactor factor_spd(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    fail(ErrorCode::singular_system, std::string(what) + " is not positive definite");
  }
  SpdFactor f;
  f.inverse = llt.solve(Matrix::Identity(m.rows(), m.cols()));
  for (Index i = 0; i < m.rows(); ++i) f.log_det += std::log(llt.matrixL()(i, i));
  f.log_det *= 2.0;
  return f;
}

}  // namespace ecov::detail
