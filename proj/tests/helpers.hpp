#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ecov/model.hpp"
#include "ecov/rng.hpp"

namespace ecov::test {

inline Matrix random_spd(Index n, Rng& rng, double ridge = 0.1) {
  const Matrix a = rng.normal_matrix(n, n);
  return Matrix(a * a.transpose() / static_cast<double>(n) + ridge * Matrix::Identity(n, n));
}

inline Matrix psd_root(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  return Matrix(eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                eig.eigenvectors().transpose());
}

// identity designs with shared noise, so beta_LS equals the response matrix and
// Condition 1 holds with shared_variance = noise
inline DatasetCollection identity_collection(const Matrix& beta_ls, double noise) {
  std::vector<RegressionDataset> ds;
  ds.reserve(static_cast<size_t>(beta_ls.cols()));
  for (Index q = 0; q < beta_ls.cols(); ++q) {
    ds.emplace_back(Matrix::Identity(beta_ls.rows(), beta_ls.rows()), Vector(beta_ls.col(q)),
                    noise);
  }
  return DatasetCollection(std::move(ds));
}

struct RandomProblem {
  DatasetCollection collection;
  Matrix beta;
};

// rows of X ~ N(0, I/points) as in the synthetic sweeps; responses carry `noise`
inline RandomProblem random_problem(Index d, Index q, Index points, double noise, Rng& rng,
                                    const Matrix* sigma = nullptr) {
  Matrix beta = sigma != nullptr ? Matrix(rng.normal_matrix(d, q) * psd_root(*sigma))
                                 : Matrix(rng.normal_matrix(d, q));
  std::vector<RegressionDataset> ds;
  ds.reserve(static_cast<size_t>(q));
  for (Index j = 0; j < q; ++j) {
    Matrix x = rng.normal_matrix(points, d) / std::sqrt(static_cast<double>(points));
    Vector y = x * beta.col(j) + std::sqrt(noise) * rng.normal_vector(points);
    ds.emplace_back(std::move(x), std::move(y), noise);
  }
  return RandomProblem{DatasetCollection(std::move(ds)), std::move(beta)};
}

inline std::filesystem::path fresh_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("ecov-test-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline double rel_error(const Matrix& got, const Matrix& want) {
  const double scale = want.norm();
  return scale > 0.0 ? (got - want).norm() / scale : (got - want).norm();
}

}  // namespace ecov::test
