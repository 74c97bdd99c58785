#include "ecov/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "ecov/rng.hpp"

namespace ecov {

const char* to_string(ShrinkageKind kind) noexcept {
  switch (kind) {
    case ShrinkageKind::ls: return "ls";
    case ShrinkageKind::ecov_mm: return "ecov-mm";
    case ShrinkageKind::ecov_mle: return "ecov-mle";
    case ShrinkageKind::edata_mm: return "edata-mm";
    case ShrinkageKind::id: return "id";
  }
  return "?";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_variance(double shared_variance) {
  if (!(shared_variance > 0.0) || !std::isfinite(shared_variance)) {
    fail(ErrorCode::bad_argument, "shared_variance must be strictly positive");
  }
}

// one thin SVD per replicate, shared by every singular-value shrinker; keeping the
// mm / mle factors in the same arithmetic makes their coincidence exact when nothing
// is clipped
struct SvdParts {
  Matrix u;  // D x Q (thin)
  Matrix v;  // Q x Q
  Vector s;
  double s_tol = 0.0;

  explicit SvdParts(const Matrix& beta_ls) {
    Eigen::JacobiSVD<Matrix> svd(beta_ls, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU();
    v = svd.matrixV();
    s = svd.singularValues();
    s_tol = std::numeric_limits<double>::epsilon() *
            static_cast<double>(std::max(beta_ls.rows(), beta_ls.cols())) *
            (s.size() > 0 ? s(0) : 0.0);
  }

  Vector mm_factors(double coeff) const {
    Vector f(s.size());
    for (Index i = 0; i < s.size(); ++i) {
      f(i) = s(i) > s_tol ? s(i) - coeff / s(i) : 0.0;
    }
    return f;
  }

  Matrix reconstruct(const Vector& factors) const {
    return u * factors.asDiagonal() * v.transpose();
  }

  double pinv_squared_norm() const {
    double total = 0.0;
    for (Index i = 0; i < s.size(); ++i) {
      if (s(i) > s_tol) total += 1.0 / (s(i) * s(i));
    }
    return total;
  }
};

bool needs_svd(ShrinkageKind kind) {
  return kind == ShrinkageKind::ecov_mm || kind == ShrinkageKind::ecov_mle ||
         kind == ShrinkageKind::edata_mm;
}

void check_regime(ShrinkageKind kind, Index rows, Index cols) {
  switch (kind) {
    case ShrinkageKind::ecov_mm:
      if (rows < cols) {
        fail(ErrorCode::regime_violation,
             "row-exchangeable moment shrinkage needs at least as many covariates as datasets");
      }
      break;
    case ShrinkageKind::ecov_mle:
      if (rows <= cols) {
        fail(ErrorCode::regime_violation,
             "positive-part shrinkage needs more covariates than datasets");
      }
      break;
    case ShrinkageKind::edata_mm:
      if (rows > cols) {
        fail(ErrorCode::regime_violation,
             "column-exchangeable moment shrinkage needs at least as many datasets as covariates");
      }
      break;
    default:
      break;
  }
}

// parts may be null for the kinds that do not touch the SVD
Matrix apply_kind(ShrinkageKind kind, const Matrix& beta_ls, double shared_variance,
                  const SvdParts* parts) {
  const double d = static_cast<double>(beta_ls.rows());
  const double t = static_cast<double>(beta_ls.cols());
  check_regime(kind, beta_ls.rows(), beta_ls.cols());
  switch (kind) {
    case ShrinkageKind::ls:
      return beta_ls;
    case ShrinkageKind::ecov_mm:
      return parts->reconstruct(parts->mm_factors(shared_variance * d));
    case ShrinkageKind::ecov_mle:
      return parts->reconstruct(parts->mm_factors(shared_variance * d).cwiseMax(0.0));
    case ShrinkageKind::edata_mm:
      return parts->reconstruct(parts->mm_factors(shared_variance * t));
    case ShrinkageKind::id: {
      Matrix out(beta_ls.rows(), beta_ls.cols());
      for (Index q = 0; q < beta_ls.cols(); ++q) {
        const double nsq = beta_ls.col(q).squaredNorm();
        const double factor = nsq > 0.0 ? std::max(1.0 - shared_variance * d / nsq, 0.0) : 0.0;
        out.col(q) = factor * beta_ls.col(q);
      }
      return out;
    }
  }
  fail(ErrorCode::bad_argument, "unknown shrinkage kind");
}

struct RunningMoments {
  double sum = 0.0;
  double sum_sq = 0.0;
  Index count = 0;

  void add(double x) {
    sum += x;
    sum_sq += x * x;
    ++count;
  }
  double mean() const { return sum / static_cast<double>(count); }
  double sem() const {
    if (count < 2) return 0.0;
    const double n = static_cast<double>(count);
    const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
    return std::sqrt(var / n);
  }
};

}  // namespace

Matrix shrink_sufficient(ShrinkageKind kind, const Matrix& beta_ls, double shared_variance) {
  check_variance(shared_variance);
  if (!beta_ls.allFinite()) {
    fail(ErrorCode::non_finite_value, "sufficient statistic has non-finite entries");
  }
  if (!needs_svd(kind)) return apply_kind(kind, beta_ls, shared_variance, nullptr);
  const SvdParts parts(beta_ls);
  return apply_kind(kind, beta_ls, shared_variance, &parts);
}

RiskEstimate mc_risk(ShrinkageKind kind, const EffectsMatrix& beta_true, double shared_variance,
                     Index replicates, std::uint64_t seed) {
  check_variance(shared_variance);
  if (replicates < 100) fail(ErrorCode::bad_argument, "replicates must be >= 100");
  const Matrix& beta = beta_true.values();
  check_regime(kind, beta.rows(), beta.cols());

  const double noise_sd = std::sqrt(shared_variance);
  const bool svd = needs_svd(kind);
  RunningMoments loss;
  for (Index r = 0; r < replicates; ++r) {
    Rng rng = Rng::substream(seed, {static_cast<std::uint64_t>(r)});
    const Matrix beta_ls = beta + noise_sd * rng.normal_matrix(beta.rows(), beta.cols());
    Matrix est;
    if (svd) {
      const SvdParts parts(beta_ls);
      est = apply_kind(kind, beta_ls, shared_variance, &parts);
    } else {
      est = apply_kind(kind, beta_ls, shared_variance, nullptr);
    }
    loss.add((est - beta).squaredNorm());
  }
  return RiskEstimate{loss.mean(), loss.sem(), replicates, kind};
}

RiskIdentityReport risk_identity_check(const EffectsMatrix& beta_true, double shared_variance,
                                       Index replicates, std::uint64_t seed) {
  check_variance(shared_variance);
  if (replicates < 2) fail(ErrorCode::bad_argument, "replicates must be >= 2");
  const Matrix& beta = beta_true.values();
  const double d = static_cast<double>(beta.rows());
  const double t = static_cast<double>(beta.cols());

  RiskIdentityReport report;
  ShrinkageKind kind;
  double coeff;  // multiplies sigma^4 ||beta_LS^+||_F^2 in the identity
  if (beta.rows() > beta.cols() + 1) {
    report.regime = "ecov";
    kind = ShrinkageKind::ecov_mm;
    coeff = d * (d - 2.0 - 2.0 * t);
  } else if (beta.cols() > beta.rows() + 1) {
    report.regime = "edata";
    kind = ShrinkageKind::edata_mm;
    coeff = t * (t - 2.0 - 2.0 * d);
  } else {
    fail(ErrorCode::infinite_risk_regime,
         "infinite-risk regime: the identity needs D > Q+1 or Q > D+1, got " +
             std::to_string(beta.rows()) + " x " + std::to_string(beta.cols()));
  }

  const double base = shared_variance * d * t;
  const double sigma4 = shared_variance * shared_variance;
  const double noise_sd = std::sqrt(shared_variance);
  RunningMoments loss, identity, difference;
  for (Index r = 0; r < replicates; ++r) {
    Rng rng = Rng::substream(seed, {static_cast<std::uint64_t>(r)});
    const Matrix beta_ls = beta + noise_sd * rng.normal_matrix(beta.rows(), beta.cols());
    SvdParts parts(beta_ls);
    const double loss_r = (apply_kind(kind, beta_ls, shared_variance, &parts) - beta).squaredNorm();
    const double identity_r = base - sigma4 * coeff * parts.pinv_squared_norm();
    loss.add(loss_r);
    identity.add(identity_r);
    difference.add(loss_r - identity_r);
  }
  report.empirical_risk = loss.mean();
  report.empirical_sem = loss.sem();
  report.identity_value = identity.mean();
  report.identity_sem = identity.sem();
  report.mean_difference = difference.mean();
  report.difference_sem = difference.sem();
  report.replicates = replicates;
  return report;
}

DominanceReport dominance_check(const std::vector<std::pair<std::string, EffectsMatrix>>& grid,
                                double shared_variance, Index replicates, std::uint64_t seed) {
  check_variance(shared_variance);
  if (replicates < 2) fail(ErrorCode::bad_argument, "replicates must be >= 2");
  if (grid.empty()) fail(ErrorCode::bad_argument, "beta grid is empty");
  const Index dim = grid.front().second.covariate_count();
  const Index tasks = grid.front().second.dataset_count();
  for (const auto& [label, beta] : grid) {
    if (beta.covariate_count() != dim || beta.dataset_count() != tasks) {
      fail(ErrorCode::dimension_mismatch, "grid entry '" + label + "' has mismatched shape");
    }
  }

  struct Pair {
    ShrinkageKind lhs;
    ShrinkageKind rhs;
  };
  std::vector<Pair> pairs;
  if (dim > 2 * tasks + 2) pairs.push_back({ShrinkageKind::ls, ShrinkageKind::ecov_mm});
  if (dim > tasks + 1) pairs.push_back({ShrinkageKind::ecov_mm, ShrinkageKind::ecov_mle});
  if (dim <= tasks) pairs.push_back({ShrinkageKind::ls, ShrinkageKind::edata_mm});
  if (pairs.empty()) {
    fail(ErrorCode::regime_violation,
         "no dominance comparison is defined for D=" + std::to_string(dim) +
             ", Q=" + std::to_string(tasks));
  }

  DominanceReport report;
  report.dim = dim;
  report.tasks = tasks;
  report.shared_variance = shared_variance;
  report.replicates = replicates;
  const double noise_sd = std::sqrt(shared_variance);

  for (size_t g = 0; g < grid.size(); ++g) {
    const Matrix& beta = grid[g].second.values();
    std::vector<RunningMoments> lhs_loss(pairs.size()), rhs_loss(pairs.size()),
        diff(pairs.size());
    std::vector<bool> all_zero(pairs.size(), true);
    for (Index r = 0; r < replicates; ++r) {
      Rng rng = Rng::substream(seed, {static_cast<std::uint64_t>(g),
                                      static_cast<std::uint64_t>(r)});
      const Matrix beta_ls = beta + noise_sd * rng.normal_matrix(dim, tasks);
      SvdParts parts(beta_ls);
      auto loss_of = [&](ShrinkageKind kind) {
        return (apply_kind(kind, beta_ls, shared_variance, &parts) - beta).squaredNorm();
      };
      for (size_t i = 0; i < pairs.size(); ++i) {
        const double l = loss_of(pairs[i].lhs);
        const double h = loss_of(pairs[i].rhs);
        lhs_loss[i].add(l);
        rhs_loss[i].add(h);
        diff[i].add(l - h);
        if (l - h != 0.0) all_zero[i] = false;
      }
    }
    DominanceEntry entry;
    entry.label = grid[g].first;
    for (size_t i = 0; i < pairs.size(); ++i) {
      PairedComparison cmp;
      cmp.lhs = to_string(pairs[i].lhs);
      cmp.rhs = to_string(pairs[i].rhs);
      cmp.lhs_mean = lhs_loss[i].mean();
      cmp.rhs_mean = rhs_loss[i].mean();
      cmp.mean_difference = diff[i].mean();
      cmp.sem = diff[i].sem();
      cmp.z = cmp.sem > 0.0 ? cmp.mean_difference / cmp.sem : 0.0;
      cmp.all_zero = all_zero[i];
      entry.comparisons.push_back(std::move(cmp));
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

GainReport gain(const TaskCovariance& effect_covariance, double shared_variance) {
  check_variance(shared_variance);
  const Matrix& sigma = effect_covariance.matrix();
  const Index t = sigma.rows();

  GainReport report;
  report.effect_covariance = sigma;

  // exactly-diagonal input short-circuits the eigensolver so that the two sums below
  // run over identical floating-point values and cancel to exactly zero
  bool diagonal = true;
  for (Index i = 0; i < t && diagonal; ++i) {
    for (Index j = 0; j < t; ++j) {
      if (i != j && sigma(i, j) != 0.0) {
        diagonal = false;
        break;
      }
    }
  }
  Vector evals;
  if (diagonal) {
    evals = sigma.diagonal();
  } else {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma, Eigen::EigenvaluesOnly);
    evals = eig.eigenvalues();
  }
  evals = evals.cwiseMax(0.0);
  std::sort(evals.data(), evals.data() + evals.size(), std::greater<double>());
  Vector diag = sigma.diagonal();
  std::sort(diag.data(), diag.data() + diag.size(), std::greater<double>());

  report.eigenvalues_desc = evals;
  report.diagonals_desc = diag;

  double sum_eval = 0.0;
  double sum_diag = 0.0;
  for (Index i = 0; i < t; ++i) {
    sum_eval += 1.0 / (evals(i) + shared_variance);
    sum_diag += 1.0 / (diag(i) + shared_variance);
  }
  const double tq = static_cast<double>(t);
  report.gain = shared_variance / tq * (sum_eval - sum_diag);

  const double lambda_min = evals(t - 1);
  const double lambda_max = evals(0);
  const double gap = (diag - evals).norm();
  report.upper_bound = 2.0 * shared_variance / tq * evals.norm() * gap /
                       std::pow(lambda_min + shared_variance, 3.0);
  report.lower_bound =
      shared_variance / tq * gap * gap / std::pow(lambda_max + shared_variance, 3.0);

  if (lambda_min > 0.0) {
    report.condition_number = lambda_max / lambda_min;
    const double k2 = report.condition_number * report.condition_number;
    report.snr_upper_bounds = {4.0 * k2 * lambda_min / shared_variance,
                               4.0 * k2 * shared_variance / lambda_min};
  } else {
    report.condition_number = kInf;
    report.snr_upper_bounds = {kInf, kInf};
  }
  return report;
}

GainConvergenceReport gain_convergence_check(const TaskCovariance& effect_covariance,
                                             double shared_variance,
                                             const std::vector<Index>& dims, Index replicates,
                                             std::uint64_t seed) {
  check_variance(shared_variance);
  if (replicates < 2) fail(ErrorCode::bad_argument, "replicates must be >= 2");
  if (dims.empty()) fail(ErrorCode::bad_argument, "dims is empty");
  const Index t = effect_covariance.dimension();
  for (size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] <= t + 1) {
      fail(ErrorCode::regime_violation,
           "every dimension must exceed the dataset count plus one");
    }
    if (i > 0 && dims[i] <= dims[i - 1]) {
      fail(ErrorCode::bad_argument, "dims must be strictly increasing");
    }
  }

  // symmetric square root for sampling rows beta_d ~ N(0, Sigma-tilde)
  Eigen::SelfAdjointEigenSolver<Matrix> eig(effect_covariance.matrix());
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Matrix sqrt_sigma =
      eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();

  GainConvergenceReport report;
  report.gain_value = gain(effect_covariance, shared_variance).gain;
  const double noise_sd = std::sqrt(shared_variance);

  for (const Index dim : dims) {
    const double norm = shared_variance * static_cast<double>(dim) * static_cast<double>(t);
    RunningMoments gap;
    RunningMoments risk_id;
    RunningMoments risk_ecov;
    for (Index r = 0; r < replicates; ++r) {
      Rng rng = Rng::substream(seed, {static_cast<std::uint64_t>(dim),
                                      static_cast<std::uint64_t>(r)});
      const Matrix beta = rng.normal_matrix(dim, t) * sqrt_sigma;
      const Matrix beta_ls = beta + noise_sd * rng.normal_matrix(dim, t);
      const SvdParts parts(beta_ls);
      const double loss_ecov =
          (apply_kind(ShrinkageKind::ecov_mle, beta_ls, shared_variance, &parts) - beta)
              .squaredNorm();
      const double loss_id =
          (apply_kind(ShrinkageKind::id, beta_ls, shared_variance, nullptr) - beta).squaredNorm();
      gap.add((loss_id - loss_ecov) / norm);
      risk_id.add(loss_id / norm);
      risk_ecov.add(loss_ecov / norm);
    }
    // joint uncertainty of the two normalized risks being subtracted, matching how
    // risk-curve comparisons combine per-estimator standard errors
    const double sem = std::sqrt(risk_id.sem() * risk_id.sem() +
                                 risk_ecov.sem() * risk_ecov.sem());
    report.trajectory.push_back(GainTrajectoryPoint{dim, gap.mean(), sem});
  }
  report.terminal_gap_error = std::abs(report.trajectory.back().normalized_gap - report.gain_value);
  return report;
}

}  // namespace ecov
