#pragma once

#include <vector>

#include "ecov/covariance.hpp"
#include "ecov/model.hpp"
#include "ecov/posterior.hpp"

namespace ecov {

struct NewtonOptions {
  double grad_tolerance = 1e-8;  // on ||grad|| / max(1, ||beta||)
  Index max_iterations = 100;
  Index max_step_halvings = 30;
  double jitter_scale = 1e-10;
  SolverOptions solver;  // Newton systems above the dense cutoff go through cg
};

// log p(beta | Y, Sigma) + log p(Y | beta): Bernoulli likelihood with logit link plus the
// row-exchangeable Gaussian prior, all normalizing constants included
double log_posterior_logistic(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const Matrix& beta);

Matrix log_posterior_gradient(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const Matrix& beta);

// negative Hessian in q-major layout: blockdiag(X^qT W_q X^q) + Sigma^{-1} (x) I_D
Matrix log_posterior_neg_hessian(const DatasetCollection& collection, const TaskCovariance& sigma,
                                 const Matrix& beta);

struct MapResult {
  Matrix mode;  // D x Q
  Index iterations = 0;
  double log_posterior = 0.0;
  bool converged = false;
};

// damped Newton ascent on the strictly concave log posterior
MapResult map_newton(const DatasetCollection& collection, const TaskCovariance& sigma,
                     const Matrix& init, const NewtonOptions& options = {});

struct LaplaceSummary {
  Matrix mode;
  std::vector<Matrix> covariate_blocks;  // V_d from the Gaussian approximation at the mode
  double log_posterior = 0.0;
  double log_evidence = 0.0;  // Laplace approximation; NaN when the problem exceeds the dense cutoff
};

LaplaceSummary laplace_estep(const DatasetCollection& collection, const TaskCovariance& sigma,
                             const NewtonOptions& options = {},
                             const Matrix* warm_start = nullptr);

struct LogisticEmFit {
  TaskCovariance sigma;
  EmTrace trace;  // log_marginal_likelihoods holds Laplace evidence values (not enforced monotone)
  Matrix map;     // posterior mode at the final sigma
};

// EM with a Laplace E-step; stops when the Frobenius change of Sigma falls below
// rel_tolerance * max(1, ||Sigma||_F)
LogisticEmFit em_fit_logistic(const DatasetCollection& collection, const TaskCovariance& init,
                              const EmOptions& em = {}, const NewtonOptions& newton = {});

// sigmoid(design * beta column `task`); numerically stable, may round to exactly 0 or 1
Vector predict_proba(const EffectsMatrix& beta, const Matrix& design, Index task);

}  // namespace ecov
