#include <benchmark/benchmark.h>

#include <cmath>

#include "ecov/covariance.hpp"
#include "ecov/logistic.hpp"
#include "ecov/model.hpp"
#include "ecov/posterior.hpp"
#include "ecov/rng.hpp"
#include "ecov/theory.hpp"

#include "../tests/helpers.hpp"

using namespace ecov;

namespace {

// one deterministic problem per (d, q); rebuilt per benchmark, reused across iterations
test::RandomProblem make_problem(Index d, Index q) {
  Rng rng = Rng::substream(777, {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(q)});
  return test::random_problem(d, q, 2 * d + 10, 0.5, rng);
}

void posterior_dense(benchmark::State& state) {
  const Index d = state.range(0);
  const Index q = 4;
  const auto problem = make_problem(d, q);
  const NoiseModel noise = NoiseModel::from_collection(problem.collection);
  Rng rng = Rng::substream(778, {static_cast<std::uint64_t>(d)});
  const TaskCovariance sigma(test::random_spd(q, rng));
  SolverOptions options;
  options.mode = SolverMode::dense;
  options.want_covariate_blocks = false;
  for (auto _ : state) {
    benchmark::DoNotOptimize(posterior_gaussian(problem.collection, sigma, noise, options));
  }
}
BENCHMARK(posterior_dense)->Arg(25)->Arg(100)->Arg(250);

void posterior_cg(benchmark::State& state) {
  const Index d = state.range(0);
  const Index q = 4;
  const auto problem = make_problem(d, q);
  const NoiseModel noise = NoiseModel::from_collection(problem.collection);
  Rng rng = Rng::substream(778, {static_cast<std::uint64_t>(d)});
  const TaskCovariance sigma(test::random_spd(q, rng));
  SolverOptions options;
  options.mode = SolverMode::cg;
  options.want_covariate_blocks = false;
  for (auto _ : state) {
    benchmark::DoNotOptimize(posterior_mean_cg(problem.collection, sigma, noise, options));
  }
}
BENCHMARK(posterior_cg)->Arg(25)->Arg(100)->Arg(250);

void em_step_pair(benchmark::State& state) {
  const Index d = state.range(0);
  const Index q = 4;
  const auto problem = make_problem(d, q);
  const NoiseModel noise = NoiseModel::from_collection(problem.collection);
  EmOptions options;
  options.max_iterations = 2;
  options.rel_tolerance = 0.0;
  options.record_iterates = false;
  const TaskCovariance init(Matrix::Identity(q, q));
  for (auto _ : state) {
    benchmark::DoNotOptimize(em_fit_linear(problem.collection, noise, init, options));
  }
}
BENCHMARK(em_step_pair)->Arg(25)->Arg(100);

void moment_estimate(benchmark::State& state) {
  const Index d = state.range(0);
  const auto problem = make_problem(d, 4);
  const NoiseModel noise = NoiseModel::from_collection(problem.collection);
  for (auto _ : state) {
    benchmark::DoNotOptimize(moment_sigma(problem.collection, noise));
  }
}
BENCHMARK(moment_estimate)->Arg(100)->Arg(400);

void sufficient_shrinkage(benchmark::State& state) {
  const Index d = state.range(0);
  Rng rng = Rng::substream(779, {static_cast<std::uint64_t>(d)});
  const Matrix beta_ls = rng.normal_matrix(d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(shrink_sufficient(ShrinkageKind::ecov_mle, beta_ls, 1.0));
  }
}
BENCHMARK(sufficient_shrinkage)->Arg(100)->Arg(1000);

void logistic_map(benchmark::State& state) {
  const Index d = state.range(0);
  const Index q = 3;
  Rng rng = Rng::substream(780, {static_cast<std::uint64_t>(d)});
  const Matrix beta = rng.normal_matrix(d, q);
  std::vector<RegressionDataset> datasets;
  for (Index j = 0; j < q; ++j) {
    Matrix x = rng.normal_matrix(4 * d, d) / std::sqrt(static_cast<double>(d));
    const Vector z = x * beta.col(j);
    Vector y(4 * d);
    for (Index i = 0; i < y.size(); ++i) {
      y(i) = rng.uniform() < 1.0 / (1.0 + std::exp(-z(i))) ? 1.0 : 0.0;
    }
    datasets.emplace_back(std::move(x), std::move(y), std::nullopt, DatasetKind::binary);
  }
  const DatasetCollection collection(std::move(datasets));
  const TaskCovariance sigma(Matrix::Identity(q, q));
  const Matrix init = Matrix::Zero(d, q);
  for (auto _ : state) {
    benchmark::DoNotOptimize(map_newton(collection, sigma, init));
  }
}
BENCHMARK(logistic_map)->Arg(20)->Arg(60);

}  // namespace

BENCHMARK_MAIN();
