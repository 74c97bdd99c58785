#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecov/covariance.hpp"
#include "ecov/edata.hpp"
#include "ecov/evaluate.hpp"
#include "ecov/io.hpp"
#include "ecov/logistic.hpp"
#include "ecov/model.hpp"
#include "ecov/rng.hpp"
#include "ecov/simulate.hpp"
#include "ecov/theory.hpp"

namespace {

using namespace ecov;

constexpr const char* kFitEstimators =
    "ecov-em|ecov-mm|ecov-mm-practical|edata-em|edata-mm|ls|ls-pooled|id";
constexpr const char* kCvEstimators = "ecov-em|ecov-mm-practical|edata-em|ls|ls-pooled|id";
constexpr const char* kSweepEstimators = "ls|id|ecov-em|ecov-mm|edata-em|edata-mm";

struct FitArgs {
  std::string manifest;
  std::string estimator;
  std::string out;
  Index max_iterations = 500;
  double tolerance = 1e-8;
  std::string solver = "auto";
};

struct PredictArgs {
  std::string model;
  std::string data;
  std::string task;
  std::string out;
};

struct SimulateArgs {
  Index tasks = 0;
  std::vector<Index> dims;
  Index replicates = 20;
  std::string effects = "correlated";
  std::vector<std::string> estimators;
  double expected_points = 1000.0;
  double noise_variance = 1.0;
  std::uint64_t seed = 0;
  std::string out;
  bool verbose = false;
};

struct EvaluateArgs {
  std::string manifest;
  Index folds = 5;
  std::vector<std::string> estimators;
  std::uint64_t seed = 0;
  std::string out;
  bool verbose = false;
};

struct RiskStudyArgs {
  std::string check;
  Index dim = 0;
  Index tasks = 0;
  Index replicates = 10000;
  std::uint64_t seed = 0;
  std::string format = "csv";
};

struct GainArgs {
  std::string sigma_file;
  double noise = 1.0;
  std::string format = "csv";
};

SolverMode solver_from_token(const std::string& token) {
  if (token == "dense") return SolverMode::dense;
  if (token == "cg") return SolverMode::cg;
  if (token == "auto") return SolverMode::auto_select;
  fail(ErrorCode::bad_argument, "unknown solver '" + token + "' (dense|cg|auto)");
}

NoiseModel resolve_noise(const DatasetCollection& collection) {
  Vector variances(collection.size());
  for (Index q = 0; q < collection.size(); ++q) {
    const auto& stored = collection.dataset(q).noise_variance();
    variances(q) = stored ? *stored : estimate_noise(collection.dataset(q));
  }
  return NoiseModel(std::move(variances), NoiseSource::estimated);
}

Table matrix_table(const std::vector<std::string>& header, const Matrix& values) {
  Table table;
  table.header = header;
  for (Index r = 0; r < values.rows(); ++r) {
    std::vector<std::string> row;
    row.reserve(static_cast<size_t>(values.cols()));
    for (Index c = 0; c < values.cols(); ++c) row.push_back(format_double(values(r, c)));
    table.rows.push_back(std::move(row));
  }
  return table;
}

int run_fit(const FitArgs& args) {
  const Manifest manifest = read_manifest(args.manifest);
  const LoadedCollection loaded = load_csv_collection(manifest);
  const DatasetCollection& collection = loaded.data.collection;

  EmOptions em;
  em.max_iterations = args.max_iterations;
  em.rel_tolerance = args.tolerance;
  em.record_iterates = false;

  SavedModel model;
  model.estimator = args.estimator;
  model.kind = collection.kind();
  model.response_column = loaded.response_column;
  model.covariates = loaded.covariates;
  model.datasets = loaded.data.names;

  if (collection.kind() == DatasetKind::gaussian) {
    const NoiseModel noise = resolve_noise(collection);
    EstimateOptions options;
    options.em = em;
    options.solver.mode = solver_from_token(args.solver);
    if (args.estimator == "ls") {
      model.beta = least_squares(collection).values();
    } else if (args.estimator == "ls-pooled") {
      model.beta = pooled_least_squares(collection).values();
    } else if (args.estimator == "id") {
      model.beta = independent_estimate(collection, noise, options).values();
    } else if (args.estimator == "ecov-em" || args.estimator == "ecov-mm" ||
               args.estimator == "ecov-mm-practical") {
      const EcovMethod method = args.estimator == "ecov-em"         ? EcovMethod::em
                                : args.estimator == "ecov-mm"       ? EcovMethod::mm
                                                                    : EcovMethod::mm_practical;
      auto [beta, report] = ecov_estimate(collection, noise, method, options);
      model.beta = beta.values();
      model.covariance = report.covariance;
      model.covariance_psd = report.covariance_psd;
      model.trace = report.trace;
    } else if (args.estimator == "edata-em" || args.estimator == "edata-mm") {
      EdataOptions edata;
      edata.em = em;
      edata.solver.mode = solver_from_token(args.solver);
      const EdataMethod method =
          args.estimator == "edata-em" ? EdataMethod::em : EdataMethod::mm;
      auto [beta, report] = edata_estimate(collection, noise, method, edata);
      model.beta = beta.values();
      model.covariance = report.covariance;
      model.covariance_psd = report.covariance_psd;
      model.trace = report.trace;
    } else {
      fail(ErrorCode::bad_argument,
           "unknown estimator '" + args.estimator + "' (" + kFitEstimators + ")");
    }
  } else {
    const Index d = collection.covariate_count();
    const Index t = collection.size();
    NewtonOptions newton;
    newton.solver.mode = solver_from_token(args.solver);
    if (args.estimator == "ecov-em") {
      LogisticEmFit fit =
          em_fit_logistic(collection, TaskCovariance(Matrix::Identity(t, t)), em, newton);
      model.beta = fit.map;
      model.covariance = fit.sigma.matrix();
      model.trace = std::move(fit.trace);
    } else if (args.estimator == "ls") {
      Matrix beta(d, t);
      for (Index q = 0; q < t; ++q) {
        DatasetCollection single(std::vector<RegressionDataset>{collection.dataset(q)});
        beta.col(q) = map_newton(single, TaskCovariance(Matrix::Identity(1, 1)),
                                 Matrix::Zero(d, 1), newton)
                          .mode;
      }
      model.beta = std::move(beta);
    } else if (args.estimator == "ls-pooled") {
      Index total = 0;
      for (Index q = 0; q < t; ++q) total += collection.dataset(q).point_count();
      Matrix x(total, d);
      Vector y(total);
      Index at = 0;
      for (Index q = 0; q < t; ++q) {
        const auto& ds = collection.dataset(q);
        x.middleRows(at, ds.point_count()) = ds.design();
        y.segment(at, ds.point_count()) = ds.responses();
        at += ds.point_count();
      }
      DatasetCollection pooled(std::vector<RegressionDataset>{
          RegressionDataset(std::move(x), std::move(y), std::nullopt, DatasetKind::binary)});
      const Matrix one = map_newton(pooled, TaskCovariance(Matrix::Identity(1, 1)),
                                    Matrix::Zero(d, 1), newton)
                             .mode;
      model.beta = one.replicate(1, t);
    } else if (args.estimator == "id") {
      Matrix beta(d, t);
      for (Index q = 0; q < t; ++q) {
        DatasetCollection single(std::vector<RegressionDataset>{collection.dataset(q)});
        beta.col(q) =
            em_fit_logistic(single, TaskCovariance(Matrix::Identity(1, 1)), em, newton).map;
      }
      model.beta = std::move(beta);
    } else {
      fail(ErrorCode::bad_argument,
           "estimator '" + args.estimator + "' is not defined for classification tasks " +
               "(use ecov-em, ls, ls-pooled, or id)");
    }
  }

  write_text(args.out, render_csv(matrix_table(model.datasets, model.beta)));
  save_model(model, args.out + ".json");
  return 0;
}

int run_predict(const PredictArgs& args) {
  const SavedModel model = load_model(args.model);
  const Csv csv = read_csv(args.data);
  const auto task_it = std::find(model.datasets.begin(), model.datasets.end(), args.task);
  if (task_it == model.datasets.end()) {
    fail(ErrorCode::bad_argument, "unknown task '" + args.task + "'");
  }
  const Index task = static_cast<Index>(task_it - model.datasets.begin());

  Matrix design(csv.values.rows(), static_cast<Index>(model.covariates.size()));
  for (size_t c = 0; c < model.covariates.size(); ++c) {
    const auto it = std::find(csv.header.begin(), csv.header.end(), model.covariates[c]);
    if (it == csv.header.end()) {
      fail(ErrorCode::bad_argument,
           "column '" + model.covariates[c] + "' missing from " + args.data);
    }
    design.col(static_cast<Index>(c)) = csv.values.col(it - csv.header.begin());
  }

  Vector prediction;
  if (model.kind == DatasetKind::gaussian) {
    prediction = design * model.beta.col(task);
  } else {
    prediction = predict_proba(EffectsMatrix(model.beta), design, task);
  }
  write_text(args.out, render_csv(matrix_table({"prediction"}, prediction)));
  return 0;
}

int run_simulate(const SimulateArgs& args) {
  SimulationConfig config;
  config.task_count = args.tasks;
  config.covariate_dims = args.dims;
  config.replicates = args.replicates;
  if (args.effects == "correlated") {
    config.effect_kind = EffectKind::correlated;
  } else if (args.effects == "independent") {
    config.effect_kind = EffectKind::independent;
  } else {
    fail(ErrorCode::bad_argument,
         "unknown effects kind '" + args.effects + "' (correlated|independent)");
  }
  config.expected_points = args.expected_points;
  config.noise_variance = args.noise_variance;
  config.seed = args.seed;

  std::vector<SweepEstimator> kinds;
  if (args.estimators.empty()) {
    kinds = default_sweep_estimators();
  } else {
    for (const auto& token : args.estimators) kinds.push_back(sweep_estimator_from_token(token));
  }
  if (args.verbose) {
    std::fprintf(stderr, "sweeping %zu dimensions x %lld replicates\n", args.dims.size(),
                 static_cast<long long>(args.replicates));
  }
  const auto rows = risk_curve(config, kinds);
  write_text(args.out, render_csv(risk_table(rows)));
  return 0;
}

int run_evaluate(const EvaluateArgs& args) {
  const Manifest manifest = read_manifest(args.manifest);
  const LoadedCollection loaded = load_csv_collection(manifest);

  std::vector<CvEstimator> kinds;
  if (args.estimators.empty()) {
    kinds = {CvEstimator::ecov_em, CvEstimator::ecov_mm_practical, CvEstimator::edata_em,
             CvEstimator::ls,      CvEstimator::ls_pooled,         CvEstimator::id};
  } else {
    for (const auto& token : args.estimators) kinds.push_back(cv_estimator_from_token(token));
  }
  CvOptions options;
  options.folds = args.folds;
  options.seed = args.seed;
  if (args.verbose) {
    std::fprintf(stderr, "cross-validating %zu estimators over %lld folds\n", kinds.size(),
                 static_cast<long long>(args.folds));
  }
  const CvReport report = cross_validate(loaded.data, kinds, options);
  write_text(args.out, render_csv(cv_table(report)));
  write_text(args.out + ".json", cv_aggregates_json(report));
  return 0;
}

void emit(const Table& table, const std::string& format) {
  if (format == "csv") {
    std::fputs(render_csv(table).c_str(), stdout);
    return;
  }
  if (format != "json") {
    fail(ErrorCode::bad_argument, "unknown format '" + format + "' (csv|json)");
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json entry;
    for (size_t c = 0; c < table.header.size(); ++c) entry[table.header[c]] = row[c];
    rows.push_back(std::move(entry));
  }
  std::fputs((rows.dump(2) + "\n").c_str(), stdout);
}

int run_risk_study(const RiskStudyArgs& args) {
  if (args.dim < 1 || args.tasks < 1) {
    fail(ErrorCode::bad_argument, "--d and --q must be >= 1");
  }
  if (args.check == "lemma-risk") {
    const Matrix beta = Rng::substream(args.seed, {0xB}).normal_matrix(args.dim, args.tasks);
    const RiskIdentityReport report =
        risk_identity_check(EffectsMatrix(beta), 1.0, args.replicates, args.seed);
    Table table;
    table.header = {"regime",         "empirical_risk",  "empirical_sem",
                    "identity_value", "identity_sem",    "mean_difference",
                    "difference_sem", "replicates"};
    table.rows.push_back({report.regime, format_double(report.empirical_risk),
                          format_double(report.empirical_sem),
                          format_double(report.identity_value),
                          format_double(report.identity_sem),
                          format_double(report.mean_difference),
                          format_double(report.difference_sem),
                          std::to_string(report.replicates)});
    emit(table, args.format);
    return 0;
  }
  if (args.check != "dominance" && args.check != "positive-part") {
    fail(ErrorCode::bad_argument,
         "unknown check '" + args.check + "' (lemma-risk|dominance|positive-part)");
  }
  const Matrix unit_raw = Rng::substream(args.seed, {0xD, 1}).normal_matrix(args.dim, args.tasks);
  const Matrix wide = Rng::substream(args.seed, {0xD, 2}).normal_matrix(args.dim, args.tasks);
  std::vector<std::pair<std::string, EffectsMatrix>> grid;
  grid.emplace_back("zero", EffectsMatrix(Matrix::Zero(args.dim, args.tasks)));
  grid.emplace_back("unit-norm", EffectsMatrix(unit_raw / unit_raw.norm()));
  grid.emplace_back("scale-100", EffectsMatrix(100.0 * wide));
  const DominanceReport report = dominance_check(grid, 1.0, args.replicates, args.seed);

  const bool positive_part = args.check == "positive-part";
  Table table;
  table.header = {"label", "lhs",        "rhs", "lhs_mean", "rhs_mean",
                  "mean_difference", "sem", "z", "all_zero"};
  for (const auto& entry : report.entries) {
    for (const auto& cmp : entry.comparisons) {
      if (positive_part && !(cmp.lhs == "ecov-mm" && cmp.rhs == "ecov-mle")) continue;
      table.rows.push_back({entry.label, cmp.lhs, cmp.rhs, format_double(cmp.lhs_mean),
                            format_double(cmp.rhs_mean), format_double(cmp.mean_difference),
                            format_double(cmp.sem), format_double(cmp.z),
                            cmp.all_zero ? "true" : "false"});
    }
  }
  if (table.rows.empty()) {
    fail(ErrorCode::regime_violation,
         "positive-part comparison needs more covariates than datasets plus one");
  }
  emit(table, args.format);
  return 0;
}

int run_gain(const GainArgs& args) {
  const Matrix values = read_csv_headerless(args.sigma_file);
  if (values.rows() != values.cols()) {
    fail(ErrorCode::dimension_mismatch, args.sigma_file + ": effect covariance must be square, got " +
                                            std::to_string(values.rows()) + "x" +
                                            std::to_string(values.cols()));
  }
  const GainReport report = gain(TaskCovariance(values), args.noise);
  Table table;
  table.header = {"field", "value"};
  table.rows.push_back({"gain", format_double(report.gain)});
  table.rows.push_back({"lower_bound", format_double(report.lower_bound)});
  table.rows.push_back({"upper_bound", format_double(report.upper_bound)});
  table.rows.push_back({"snr_bound_low_noise", format_double(report.snr_upper_bounds.first)});
  table.rows.push_back({"snr_bound_high_noise", format_double(report.snr_upper_bounds.second)});
  table.rows.push_back({"condition_number", format_double(report.condition_number)});
  for (Index i = 0; i < report.eigenvalues_desc.size(); ++i) {
    table.rows.push_back(
        {"eigenvalue_" + std::to_string(i + 1), format_double(report.eigenvalues_desc(i))});
  }
  for (Index i = 0; i < report.diagonals_desc.size(); ++i) {
    table.rows.push_back(
        {"diagonal_" + std::to_string(i + 1), format_double(report.diagonals_desc(i))});
  }
  emit(table, args.format);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"empirical-Bayes shrinkage across related regression datasets"};
  app.require_subcommand(1);

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "estimate effects for every dataset in a manifest");
  fit_cmd->add_option("--manifest", fit.manifest, "manifest JSON path")->required();
  fit_cmd->add_option("--estimator", fit.estimator, std::string("one of ") + kFitEstimators)
      ->required();
  fit_cmd->add_option("--out", fit.out, "output CSV path (model JSON lands at <out>.json)")
      ->required();
  fit_cmd->add_option("--max-iter", fit.max_iterations, "EM iteration cap (default 500)");
  fit_cmd->add_option("--tol", fit.tolerance, "EM relative tolerance (default 1e-8)");
  fit_cmd->add_option("--solver", fit.solver, "dense|cg|auto (default auto)");

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "apply a saved model to new rows");
  predict_cmd->add_option("--model", predict.model, "model JSON written by fit")->required();
  predict_cmd->add_option("--data", predict.data, "headered CSV of covariates")->required();
  predict_cmd->add_option("--task", predict.task, "dataset name selecting the coefficient column")
      ->required();
  predict_cmd->add_option("--out", predict.out, "output CSV path")->required();

  SimulateArgs simulate;
  auto* simulate_cmd =
      app.add_subcommand("simulate", "sweep estimator risk across covariate dimensions");
  simulate_cmd->add_option("--q", simulate.tasks, "number of datasets")->required();
  simulate_cmd->add_option("--dims", simulate.dims, "covariate dimensions, ascending")
      ->required()
      ->delimiter(',');
  simulate_cmd->add_option("--replicates", simulate.replicates, "replicates per cell (default 20)");
  simulate_cmd->add_option("--effects", simulate.effects,
                           "correlated|independent (default correlated)");
  simulate_cmd
      ->add_option("--estimators", simulate.estimators,
                   std::string("subset of ") + kSweepEstimators + " (default all)")
      ->delimiter(',');
  simulate_cmd->add_option("--expected-points", simulate.expected_points,
                           "Poisson rate for rows per dataset (default 1000)");
  simulate_cmd->add_option("--noise-variance", simulate.noise_variance,
                           "response noise variance (default 1)");
  simulate_cmd->add_option("--seed", simulate.seed, "random seed")->required();
  simulate_cmd->add_option("--out", simulate.out, "output CSV path")->required();
  simulate_cmd->add_flag("-v,--verbose", simulate.verbose, "progress notes on stderr");

  EvaluateArgs evaluate;
  auto* evaluate_cmd =
      app.add_subcommand("evaluate", "cross-validated estimator comparison on manifest data");
  evaluate_cmd->add_option("--manifest", evaluate.manifest, "manifest JSON path")->required();
  evaluate_cmd->add_option("--folds", evaluate.folds, "fold count (default 5)");
  evaluate_cmd
      ->add_option("--estimators", evaluate.estimators,
                   std::string("subset of ") + kCvEstimators + " (default all)")
      ->delimiter(',');
  evaluate_cmd->add_option("--seed", evaluate.seed, "fold-assignment seed (default 0)");
  evaluate_cmd->add_option("--out", evaluate.out, "output CSV path (aggregates at <out>.json)")
      ->required();
  evaluate_cmd->add_flag("-v,--verbose", evaluate.verbose, "progress notes on stderr");

  RiskStudyArgs risk_study;
  auto* risk_cmd =
      app.add_subcommand("risk-study", "Monte-Carlo checks of the closed-form risk results");
  risk_cmd->add_option("--check", risk_study.check, "lemma-risk|dominance|positive-part")
      ->required();
  risk_cmd->add_option("--d", risk_study.dim, "covariate count")->required();
  risk_cmd->add_option("--q", risk_study.tasks, "dataset count")->required();
  risk_cmd->add_option("--replicates", risk_study.replicates, "replicates (default 10000)");
  risk_cmd->add_option("--seed", risk_study.seed, "random seed")->required();
  risk_cmd->add_option("--format", risk_study.format, "csv|json (default csv)");

  GainArgs gain_args;
  auto* gain_cmd =
      app.add_subcommand("gain", "asymptotic improvement report for an effect covariance");
  gain_cmd->add_option("--sigma-file", gain_args.sigma_file, "headerless Q x Q CSV")->required();
  gain_cmd->add_option("--noise", gain_args.noise, "shared noise variance (default 1)");
  gain_cmd->add_option("--format", gain_args.format, "csv|json (default csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (fit_cmd->parsed()) return run_fit(fit);
    if (predict_cmd->parsed()) return run_predict(predict);
    if (simulate_cmd->parsed()) return run_simulate(simulate);
    if (evaluate_cmd->parsed()) return run_evaluate(evaluate);
    if (risk_cmd->parsed()) return run_risk_study(risk_study);
    if (gain_cmd->parsed()) return run_gain(gain_args);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == ErrorKind::validation ? 1 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 2;
  }
  return 0;
}
