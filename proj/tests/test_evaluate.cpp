#include <doctest.h>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ecov/evaluate.hpp"
#include "ecov/logistic.hpp"
#include "ecov/model.hpp"
#include "ecov/rng.hpp"

#include "helpers.hpp"

using namespace ecov;

namespace {

DatasetCollection single(Matrix x, Vector y,
                         std::optional<double> noise = std::nullopt,
                         DatasetKind kind = DatasetKind::gaussian) {
  std::vector<RegressionDataset> ds;
  ds.emplace_back(std::move(x), std::move(y), noise, kind);
  return DatasetCollection(std::move(ds));
}

std::vector<std::string> names(Index count) {
  std::vector<std::string> out;
  for (Index i = 0; i < count; ++i) out.push_back("task" + std::to_string(i));
  return out;
}

const CvAggregate& aggregate_for(const CvReport& report, const std::string& estimator) {
  for (const auto& agg : report.aggregates) {
    if (agg.estimator == estimator) return agg;
  }
  REQUIRE(false);
  return report.aggregates.front();
}

CvOptions fast_cv() {
  CvOptions o;
  o.estimate.em_init = EmInit::moment;
  o.estimate.em.max_iterations = 200;
  o.estimate.em.rel_tolerance = 1e-7;
  o.estimate.em.record_iterates = false;
  o.edata.em_init = EmInit::moment;
  o.edata.em.record_iterates = false;
  o.logistic_em.max_iterations = 50;
  o.logistic_em.rel_tolerance = 1e-5;
  o.logistic_em.record_iterates = false;
  return o;
}

}  // namespace

TEST_CASE("preprocess standardizes, clips, and rescales noise") {
  SUBCASE("two-point hand fixture") {
    Vector y(2);
    y << 0.0, 10.0;
    const DatasetCollection out =
        preprocess(single(Matrix::Identity(2, 2), y, 2.0));
    const Vector& r = out.dataset(0).responses();
    const double s = 1.0 / std::sqrt(2.0);  // sample sd of (0,10) is sqrt(50)
    CHECK(r(0) == doctest::Approx(-s).epsilon(1e-12));
    CHECK(r(1) == doctest::Approx(s).epsilon(1e-12));
    CHECK(r.cwiseAbs().maxCoeff() <= 2.0);
    CHECK(*out.dataset(0).noise_variance() == doctest::Approx(2.0 / 50.0).epsilon(1e-12));
  }

  SUBCASE("idempotent on in-range data") {
    Vector y(4);
    y << -1.5, -0.5, 0.5, 1.5;
    const DatasetCollection once = preprocess(single(Matrix::Identity(4, 4), y, 1.0));
    const DatasetCollection twice = preprocess(once);
    CHECK((once.dataset(0).responses() - twice.dataset(0).responses()).cwiseAbs().maxCoeff() <
          1e-12);
  }

  SUBCASE("a single extreme outlier is the only clipped value") {
    Vector y(6);
    y << 0.0, 0.0, 0.0, 0.0, 0.0, 6.0;  // z-scores: five at -0.408, one at 2.041
    const DatasetCollection out = preprocess(single(Matrix::Identity(6, 6), y, 1.0));
    const Vector& r = out.dataset(0).responses();
    Index clipped = 0;
    for (Index i = 0; i < r.size(); ++i) {
      if (std::abs(std::abs(r(i)) - 2.0) < 1e-12) ++clipped;
      CHECK(std::abs(r(i)) <= 2.0 + 1e-15);
    }
    CHECK(clipped == 1);
  }

  SUBCASE("rejects binary collections and degenerate responses") {
    Vector labels(3);
    labels << 0.0, 1.0, 0.0;
    CHECK_THROWS_AS(
        preprocess(single(Matrix::Identity(3, 3), labels, std::nullopt, DatasetKind::binary)),
        Error);
    CHECK_THROWS_AS(preprocess(single(Matrix::Identity(3, 3), Vector::Ones(3), 1.0)), Error);
  }
}

TEST_CASE("residual noise estimator") {
  Rng rng(431);

  SUBCASE("matches the projector formula") {
    const Matrix x = rng.normal_matrix(20, 4);
    const Vector y = rng.normal_vector(20);
    const RegressionDataset ds(x, y, std::nullopt);
    const Matrix hat = x * (x.transpose() * x).ldlt().solve(x.transpose());
    const double expected =
        (y - hat * y).squaredNorm() / static_cast<double>(20 - 4);
    CHECK(estimate_noise(ds) == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("vanishes for responses in the column span") {
    const Matrix x = rng.normal_matrix(15, 3);
    const Vector y = x * rng.normal_vector(3);
    CHECK(estimate_noise(RegressionDataset(x, y)) <= 1e-10);
  }

  SUBCASE("is unbiased in expectation") {
    const Matrix x = Rng(433).normal_matrix(30, 3);
    const double noise = 0.8;
    double sum = 0.0, sum_sq = 0.0;
    const int reps = 10000;
    for (int r = 0; r < reps; ++r) {
      Rng rng_r = Rng::substream(433, {static_cast<std::uint64_t>(r)});
      const Vector y = x * rng_r.normal_vector(3) + std::sqrt(noise) * rng_r.normal_vector(30);
      const double v = estimate_noise(RegressionDataset(x, y));
      sum += v;
      sum_sq += v * v;
    }
    const double mean = sum / reps;
    const double var = (sum_sq - sum * sum / reps) / (reps - 1.0);
    CHECK(std::abs(mean - noise) < 3.0 * std::sqrt(var / reps));
  }

  SUBCASE("needs strictly more rows than covariates") {
    const Matrix x = rng.normal_matrix(4, 4);
    try {
      estimate_noise(RegressionDataset(x, rng.normal_vector(4)));
      FAIL("expected an insufficient-rows error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::insufficient_rows);
    }
  }
}

TEST_CASE("fold assignment") {
  const auto folds = fold_assignment(7, 23, 5);
  REQUIRE(folds.size() == 23);
  std::vector<Index> counts(5, 0);
  for (Index f : folds) {
    REQUIRE(f >= 0);
    REQUIRE(f < 5);
    ++counts[static_cast<size_t>(f)];
  }
  for (Index c : counts) CHECK((c == 4 || c == 5));

  CHECK(fold_assignment(7, 23, 5) == folds);
  CHECK(fold_assignment(8, 23, 5) != folds);
  CHECK_THROWS_AS(fold_assignment(7, 4, 5), Error);
  CHECK_THROWS_AS(fold_assignment(7, 23, 1), Error);
}

TEST_CASE("cv estimator tokens round-trip") {
  for (const CvEstimator kind :
       {CvEstimator::ecov_em, CvEstimator::ecov_mm_practical, CvEstimator::edata_em,
        CvEstimator::ls, CvEstimator::ls_pooled, CvEstimator::id}) {
    CHECK(cv_estimator_from_token(to_string(kind)) == kind);
  }
  CHECK_THROWS_AS(cv_estimator_from_token("bogus"), Error);
  CHECK(std::string(to_string(CvMetric::mse)) == "mse");
  CHECK(std::string(to_string(CvMetric::classification_error)) == "classification_error");
}

TEST_CASE("least squares recovers a noiseless linear model across folds") {
  const Index n = 60;
  Matrix x(n, 2);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    const double t = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    x(i, 0) = 1.0;
    x(i, 1) = t;
    y(i) = 0.3 + 0.5 * t;
  }
  NamedCollection data{single(std::move(x), std::move(y), 1e-4), {"grid"}};
  const CvReport report = cross_validate(data, {CvEstimator::ls});
  CHECK(report.metric == CvMetric::mse);
  const CvAggregate& agg = aggregate_for(report, "ls");
  CHECK(agg.folds_used == 5);
  CHECK(agg.mean <= 1e-10);
  for (const auto& row : report.rows) {
    CHECK_FALSE(row.failed);
    CHECK(row.value <= 1e-10);
  }
}

TEST_CASE("pooling across strongly correlated tasks beats per-task least squares") {
  const Index d = 30, n = 160, q = 8;
  Matrix sigma = 0.02 * (0.95 * Matrix::Ones(q, q) + 0.05 * Matrix::Identity(q, q));
  Rng rng(439);
  const Matrix beta = rng.normal_matrix(d, q) * test::psd_root(sigma);
  std::vector<RegressionDataset> ds;
  for (Index j = 0; j < q; ++j) {
    Matrix x = rng.normal_matrix(n, d);
    Vector y = x * beta.col(j) + rng.normal_vector(n);
    ds.emplace_back(std::move(x), std::move(y), std::nullopt);
  }
  NamedCollection data{DatasetCollection(std::move(ds)), names(q)};
  const CvReport report =
      cross_validate(data, {CvEstimator::ls, CvEstimator::ecov_em}, fast_cv());
  const CvAggregate& ls = aggregate_for(report, "ls");
  const CvAggregate& ecov = aggregate_for(report, "ecov-em");
  CHECK(ls.folds_used == 5);
  CHECK(ecov.folds_used == 5);
  const double joint_sem = std::sqrt(ls.sem * ls.sem + ecov.sem * ecov.sem);
  CHECK(ecov.mean < ls.mean - 2.0 * joint_sem);
}

TEST_CASE("pooled least squares is worst on heterogeneous tasks") {
  const Index d = 8, n = 60, q = 4;
  Rng rng(443);
  std::vector<RegressionDataset> ds;
  for (Index j = 0; j < q; ++j) {
    const Vector beta = 2.0 * rng.normal_vector(d);
    Matrix x = rng.normal_matrix(n, d);
    Vector y = x * beta + std::sqrt(0.5) * rng.normal_vector(n);
    ds.emplace_back(std::move(x), std::move(y), std::nullopt);
  }
  NamedCollection data{DatasetCollection(std::move(ds)), names(q)};
  const CvReport report = cross_validate(
      data, {CvEstimator::ls, CvEstimator::id, CvEstimator::ecov_em, CvEstimator::ls_pooled},
      fast_cv());
  const double pooled = aggregate_for(report, "ls-pooled").mean;
  CHECK(pooled > aggregate_for(report, "ls").mean);
  CHECK(pooled > aggregate_for(report, "id").mean);
  CHECK(pooled > aggregate_for(report, "ecov-em").mean);
}

TEST_CASE("training fits never see test responses") {
  const Index d = 5, n = 50, q = 2;
  Rng rng(449);
  std::vector<Matrix> designs;
  std::vector<Vector> responses;
  std::vector<RegressionDataset> ds;
  for (Index j = 0; j < q; ++j) {
    designs.push_back(rng.normal_matrix(n, d));
    responses.push_back(designs.back() * rng.normal_vector(d) + rng.normal_vector(n));
    ds.emplace_back(designs.back(), responses.back(), std::nullopt);
  }
  NamedCollection data{DatasetCollection(std::move(ds)), names(q)};
  CvOptions options = fast_cv();
  options.seed = 5;
  const CvReport clean =
      cross_validate(data, {CvEstimator::ls, CvEstimator::ecov_em}, options);

  // corrupt exactly the rows that land in fold 0
  std::vector<RegressionDataset> garbage;
  for (Index j = 0; j < q; ++j) {
    const auto folds = fold_assignment(options.seed, n, options.folds);
    Vector y = responses[static_cast<size_t>(j)];
    for (Index i = 0; i < n; ++i) {
      if (folds[static_cast<size_t>(i)] == 0) y(i) += 100.0 + static_cast<double>(i);
    }
    garbage.emplace_back(designs[static_cast<size_t>(j)], std::move(y), std::nullopt);
  }
  NamedCollection corrupted{DatasetCollection(std::move(garbage)), names(q)};
  const CvReport dirty =
      cross_validate(corrupted, {CvEstimator::ls, CvEstimator::ecov_em}, options);

  // fold-0 fits are bit-identical; fold-0 metric values move
  bool compared_fit = false, metric_changed = false;
  for (const auto& fit : clean.fits) {
    if (fit.fold != 0) continue;
    for (const auto& other : dirty.fits) {
      if (other.fold == 0 && other.estimator == fit.estimator) {
        CHECK((fit.beta - other.beta).norm() == 0.0);
        compared_fit = true;
      }
    }
  }
  REQUIRE(clean.rows.size() == dirty.rows.size());
  for (size_t i = 0; i < clean.rows.size(); ++i) {
    if (clean.rows[i].fold == 0 && clean.rows[i].value != dirty.rows[i].value) {
      metric_changed = true;
    }
  }
  CHECK(compared_fit);
  CHECK(metric_changed);
}

TEST_CASE("estimator failures stay inside their cells") {
  const Index n = 60;
  Rng rng(457);
  Matrix x(n, 4);
  x.leftCols(3) = rng.normal_matrix(n, 3);
  x.col(3) = x.col(1);  // exactly collinear -> least squares fails in every fold
  Vector y = rng.normal_vector(n);
  NamedCollection data{single(std::move(x), std::move(y), 1.0), {"collinear"}};
  const CvReport report = cross_validate(data, {CvEstimator::ls});
  const CvAggregate& agg = aggregate_for(report, "ls");
  CHECK(agg.folds_used == 0);
  CHECK(std::isnan(agg.mean));
  CHECK(report.fits.empty());
  for (const auto& row : report.rows) {
    CHECK(row.failed);
    CHECK(std::isnan(row.value));
  }
}

TEST_CASE("classification rows are recomputable from the exposed fits") {
  const Index d = 3, n = 60, q = 2;
  Rng rng(461);
  std::vector<Matrix> designs;
  std::vector<Vector> labels;
  std::vector<RegressionDataset> ds;
  for (Index j = 0; j < q; ++j) {
    designs.push_back(rng.normal_matrix(n, d));
    Vector y(n);
    const Vector beta = rng.normal_vector(d);
    for (Index i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-designs.back().row(i).dot(beta)));
      y(i) = rng.uniform() < p ? 1.0 : 0.0;
    }
    labels.push_back(y);
    ds.emplace_back(designs.back(), std::move(y), std::nullopt, DatasetKind::binary);
  }
  NamedCollection data{DatasetCollection(std::move(ds)), names(q)};
  CvOptions options = fast_cv();
  const CvReport report =
      cross_validate(data, {CvEstimator::ls, CvEstimator::ecov_em}, options);
  CHECK(report.metric == CvMetric::classification_error);

  for (const auto& row : report.rows) {
    REQUIRE_FALSE(row.failed);
    const Index j = row.dataset == "task0" ? 0 : 1;
    const Matrix* beta = nullptr;
    for (const auto& fit : report.fits) {
      if (fit.fold == row.fold && fit.estimator == row.estimator) beta = &fit.beta;
    }
    REQUIRE(beta != nullptr);
    const auto folds = fold_assignment(options.seed, n, options.folds);
    std::vector<Index> test_idx;
    for (Index i = 0; i < n; ++i) {
      if (folds[static_cast<size_t>(i)] == row.fold) test_idx.push_back(i);
    }
    Matrix x_test(static_cast<Index>(test_idx.size()), d);
    for (size_t i = 0; i < test_idx.size(); ++i) {
      x_test.row(static_cast<Index>(i)) = designs[static_cast<size_t>(j)].row(test_idx[i]);
    }
    const Vector p = predict_proba(EffectsMatrix(*beta), x_test, j);
    Index wrong = 0;
    for (size_t i = 0; i < test_idx.size(); ++i) {
      const double label = p(static_cast<Index>(i)) >= 0.5 ? 1.0 : 0.0;
      if (label != labels[static_cast<size_t>(j)](test_idx[i])) ++wrong;
    }
    const double value =
        static_cast<double>(wrong) / static_cast<double>(test_idx.size());
    CHECK(row.value == value);
  }

  SUBCASE("regression-only estimators fail cleanly on binary data") {
    const CvReport bad = cross_validate(data, {CvEstimator::edata_em}, options);
    CHECK(aggregate_for(bad, "edata-em").folds_used == 0);
  }
}

TEST_CASE("independent estimate") {
  Rng rng(463);

  SUBCASE("single task equals the joint fit") {
    auto problem = test::random_problem(5, 1, 40, 0.7, rng);
    const NoiseModel noise = NoiseModel::from_collection(problem.collection);
    EstimateOptions options;
    options.em.rel_tolerance = 1e-10;
    const EffectsMatrix ind = independent_estimate(problem.collection, noise, options);
    const auto [joint, report] =
        ecov_estimate(problem.collection, noise, EcovMethod::em, options);
    CHECK(test::rel_error(ind.values(), joint.values()) < 1e-12);
  }

  SUBCASE("identity designs give the per-task positive-part oracle") {
    const Index d = 12;
    const double noise = 0.6;
    Rng local(467);
    Matrix beta_ls = local.normal_matrix(d, 3);
    beta_ls.col(0) *= 3.0;   // interior solution
    beta_ls.col(1) *= 0.05;  // truncated at zero
    const DatasetCollection collection = test::identity_collection(beta_ls, noise);
    EstimateOptions options;
    options.em_init = EmInit::moment;
    options.em.max_iterations = 5000;
    options.em.rel_tolerance = 1e-13;
    options.em.record_iterates = false;
    const EffectsMatrix ind =
        independent_estimate(collection, NoiseModel::from_collection(collection), options);
    for (Index j = 0; j < 3; ++j) {
      const double s =
          std::max(beta_ls.col(j).squaredNorm() / static_cast<double>(d) - noise, 0.0);
      const Vector expected = s / (s + noise) * beta_ls.col(j);
      // em approaches a truncated maximizer only sublinearly, so the boundary
      // column gets a looser budget than the interior ones
      const double tolerance = s > 0.0 ? 1e-6 : 1e-4;
      CHECK((ind.values().col(j) - expected).norm() <= tolerance * (1.0 + expected.norm()));
    }
  }

  SUBCASE("zero responses give exactly zero") {
    const DatasetCollection collection = test::identity_collection(Matrix::Zero(4, 2), 1.0);
    const EffectsMatrix ind =
        independent_estimate(collection, NoiseModel::from_collection(collection));
    CHECK(ind.values().norm() == 0.0);
  }
}

TEST_CASE("pooled least squares") {
  Rng rng(479);

  SUBCASE("duplicated datasets reduce to per-dataset least squares") {
    const Matrix x = rng.normal_matrix(30, 4);
    const Vector y = x * rng.normal_vector(4) + 0.1 * rng.normal_vector(30);
    std::vector<RegressionDataset> ds;
    ds.emplace_back(x, y, std::nullopt);
    ds.emplace_back(x, y, std::nullopt);
    const DatasetCollection collection(std::move(ds));
    const EffectsMatrix pooled = pooled_least_squares(collection);
    const EffectsMatrix ls = least_squares(collection);
    CHECK(test::rel_error(pooled.values(), ls.values()) < 1e-10);
  }

  SUBCASE("opposite effects cancel") {
    const Matrix x = rng.normal_matrix(25, 3);
    const Vector beta = rng.normal_vector(3);
    std::vector<RegressionDataset> ds;
    ds.emplace_back(x, Vector(x * beta), std::nullopt);
    ds.emplace_back(x, Vector(-x * beta), std::nullopt);
    const EffectsMatrix pooled = pooled_least_squares(DatasetCollection(std::move(ds)));
    CHECK(pooled.values().norm() < 1e-10);
    CHECK((pooled.values().col(0) - pooled.values().col(1)).norm() == 0.0);
  }

  SUBCASE("stacked rank deficiency is an error") {
    Matrix x(10, 3);
    x.leftCols(2) = rng.normal_matrix(10, 2);
    x.col(2) = x.col(0);
    std::vector<RegressionDataset> ds;
    ds.emplace_back(x, Vector(rng.normal_vector(10)), std::nullopt);
    ds.emplace_back(x, Vector(rng.normal_vector(10)), std::nullopt);
    CHECK_THROWS_AS(pooled_least_squares(DatasetCollection(std::move(ds))), Error);
  }
}
