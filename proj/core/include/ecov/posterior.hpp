#pragma once

#include <optional>
#include <vector>

#include "ecov/model.hpp"

namespace ecov {

enum class SolverMode { dense, cg, auto_select };

struct SolverOptions {
  SolverMode mode = SolverMode::auto_select;
  double cg_rel_tolerance = 1e-10;  // in [0,1); 0 runs cg to max iterations without erroring
  Index cg_max_iterations = 0;      // 0 means DQ
  double jitter_scale = 1e-10;
  bool want_covariate_blocks = true;  // in cg mode the blocks cost extra solves
};

void validate(const SolverOptions& options);

// Posterior of beta given Sigma: mean is D x Q, V_d = Cov(beta_d | data) is Q x Q.
// full_covariance (dense mode) is DQ x DQ in covariate-major block order, so V_d is
// its (d,d) Q x Q diagonal block.
struct PosteriorSummary {
  Matrix mean;
  std::vector<Matrix> covariate_blocks;
  std::optional<Matrix> full_covariance;
  std::optional<Index> cg_iterations;
};

struct CgInfo {
  Matrix mean;
  Index iterations = 0;
  double relative_residual = 0.0;
};

PosteriorSummary posterior_gaussian(const DatasetCollection& collection,
                                    const TaskCovariance& sigma, const NoiseModel& noise,
                                    const SolverOptions& options = {});

// closed form under sigma_q^{-2} X^qT X^q = shared_variance^{-1} I_D:
// beta_ls - beta_ls [shared_variance^{-1} Sigma + I_Q]^{-1}
EffectsMatrix posterior_mean_orthogonal(const EffectsMatrix& beta_ls, const TaskCovariance& sigma,
                                        double shared_variance);

EffectsMatrix posterior_mean_cg(const DatasetCollection& collection, const TaskCovariance& sigma,
                                const NoiseModel& noise, const SolverOptions& options);

// same, with iteration count and final relative residual
CgInfo posterior_mean_cg_info(const DatasetCollection& collection, const TaskCovariance& sigma,
                              const NoiseModel& noise, const SolverOptions& options);

}  // namespace ecov
