#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <json.hpp>

#include "ecov/io.hpp"
#include "ecov/model.hpp"
#include "ecov/rng.hpp"

#include "helpers.hpp"

using namespace ecov;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

const std::string& cli_path() {
  static const std::string path = [] {
#ifdef ECOV_CLI_PATH
    return std::string(ECOV_CLI_PATH);
#else
    const char* env = std::getenv("ECOV_CLI_PATH");
    REQUIRE_MESSAGE(env != nullptr, "ECOV_CLI_PATH must point at the cli binary");
    return std::string(env);
#endif
  }();
  return path;
}

RunResult run_cli(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd =
      "'" + cli_path() + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = read_text(out.string());
  result.err = read_text(err.string());
  return result;
}

// deterministic small regression pair sharing covariates a and b
std::string write_regression_manifest(const fs::path& dir) {
  Rng rng(503);
  for (int file = 0; file < 2; ++file) {
    Table t;
    t.header = {"y", "a", "b"};
    for (int i = 0; i < 15; ++i) {
      const double a = rng.normal();
      const double b = rng.normal();
      const double y = 1.0 + 0.5 * a - 0.3 * b + 0.05 * rng.normal();
      t.rows.push_back({format_double(y), format_double(a), format_double(b)});
    }
    write_text((dir / ("data" + std::to_string(file) + ".csv")).string(), render_csv(t));
  }
  const std::string manifest = (dir / "manifest.json").string();
  write_text(manifest, std::string(R"({
  "response_column": "y",
  "task_kind": "regression",
  "datasets": [
    {"name": "first", "path": "data0.csv", "noise_variance": 1.0},
    {"name": "second", "path": "data1.csv", "noise_variance": 1.0}
  ]
})") + "\n");
  return manifest;
}

}  // namespace

TEST_CASE("fit writes coefficients and a model sidecar deterministically") {
  const fs::path dir = test::fresh_dir("cli-fit");
  const std::string manifest = write_regression_manifest(dir);
  const std::string out = (dir / "beta.csv").string();

  const RunResult r = run_cli(
      dir, "fit --manifest '" + manifest + "' --estimator ecov-em --out '" + out + "'");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);

  const Csv beta = read_csv(out);
  CHECK(beta.header == std::vector<std::string>{"first", "second"});
  CHECK(beta.values.rows() == 2);  // one row per covariate
  CHECK(beta.values.allFinite());

  const SavedModel model = load_model(out + ".json");
  CHECK(model.estimator == "ecov-em");
  CHECK(model.covariates == std::vector<std::string>{"a", "b"});
  CHECK((model.beta - beta.values).norm() == 0.0);
  REQUIRE(model.covariance.has_value());
  CHECK(model.covariance->rows() == 2);
  REQUIRE(model.trace.has_value());

  const std::string first_csv = read_text(out);
  const std::string first_json = read_text(out + ".json");
  const RunResult again = run_cli(
      dir, "fit --manifest '" + manifest + "' --estimator ecov-em --out '" + out + "'");
  REQUIRE(again.exit_code == 0);
  CHECK(read_text(out) == first_csv);
  CHECK(read_text(out + ".json") == first_json);

  SUBCASE("ls matches the library computation bitwise") {
    const std::string ls_out = (dir / "ls.csv").string();
    REQUIRE(run_cli(dir, "fit --manifest '" + manifest + "' --estimator ls --out '" + ls_out +
                             "'")
                .exit_code == 0);
    const LoadedCollection loaded = load_csv_collection(read_manifest(manifest));
    const Matrix expected = least_squares(loaded.data.collection).values();
    CHECK((read_csv(ls_out).values - expected).norm() == 0.0);
  }

  SUBCASE("unknown estimators are a usage error") {
    const RunResult bad = run_cli(
        dir, "fit --manifest '" + manifest + "' --estimator magic --out '" + out + "'");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: bad_argument:", 0) == 0);
  }
}

TEST_CASE("predict applies a saved model by column name") {
  const fs::path dir = test::fresh_dir("cli-predict");
  const std::string manifest = write_regression_manifest(dir);
  const std::string out = (dir / "beta.csv").string();
  REQUIRE(run_cli(dir, "fit --manifest '" + manifest + "' --estimator ls --out '" + out + "'")
              .exit_code == 0);

  // covariates deliberately reordered relative to the training files
  Table fresh;
  fresh.header = {"b", "a"};
  fresh.rows = {{"0.5", "1"}, {"-1", "0.25"}, {"2", "0"}};
  const std::string data = (dir / "fresh.csv").string();
  write_text(data, render_csv(fresh));

  const std::string pred_path = (dir / "pred.csv").string();
  const RunResult r = run_cli(dir, "predict --model '" + out + ".json' --data '" + data +
                                       "' --task second --out '" + pred_path + "'");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);

  const SavedModel model = load_model(out + ".json");
  Matrix design(3, 2);
  design << 1.0, 0.5, 0.25, -1.0, 0.0, 2.0;  // (a, b) order
  const Vector expected = design * model.beta.col(1);
  const Csv pred = read_csv(pred_path);
  CHECK(pred.header == std::vector<std::string>{"prediction"});
  CHECK((pred.values - expected).norm() == 0.0);

  SUBCASE("unknown task names fail validation") {
    const RunResult bad = run_cli(dir, "predict --model '" + out + ".json' --data '" + data +
                                           "' --task nope --out '" + pred_path + "'");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: bad_argument:", 0) == 0);
  }

  SUBCASE("missing covariate columns fail validation") {
    Table narrow;
    narrow.header = {"a"};
    narrow.rows = {{"1"}};
    const std::string narrow_path = (dir / "narrow.csv").string();
    write_text(narrow_path, render_csv(narrow));
    const RunResult bad = run_cli(dir, "predict --model '" + out + ".json' --data '" +
                                           narrow_path + "' --task first --out '" + pred_path +
                                           "'");
    CHECK(bad.exit_code == 1);
  }
}

TEST_CASE("simulate sweeps deterministically") {
  const fs::path dir = test::fresh_dir("cli-simulate");
  const std::string out = (dir / "sweep.csv").string();
  const std::string args = "simulate --q 2 --dims 3 5 --replicates 2 --expected-points 50 "
                           "--estimators ls ecov-em --seed 11 --out '" +
                           out + "'";
  const RunResult r = run_cli(dir, args);
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);

  const std::string text = read_text(out);
  CHECK(text.rfind("dimension,estimator,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);  // header + 2 dims x 2 estimators

  const std::string snapshot = read_text(out);
  REQUIRE(run_cli(dir, args).exit_code == 0);
  CHECK(read_text(out) == snapshot);

  SUBCASE("the seed is mandatory") {
    const RunResult bad = run_cli(
        dir, "simulate --q 2 --dims 3 --replicates 1 --out '" + out + "'");
    CHECK(bad.exit_code == 1);
  }
}

TEST_CASE("evaluate runs cross validation from a manifest") {
  const fs::path dir = test::fresh_dir("cli-evaluate");
  const std::string manifest = write_regression_manifest(dir);
  const std::string out = (dir / "cv.csv").string();
  const RunResult r =
      run_cli(dir, "evaluate --manifest '" + manifest + "' --folds 3 --estimators ls ecov-em "
                   "--seed 4 --out '" + out + "'");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);

  const std::string text = read_text(out);
  CHECK(text.rfind("estimator,dataset,fold,metric,value", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 13);  // header + 2 est x 2 ds x 3 folds

  const auto doc = nlohmann::json::parse(read_text(out + ".json"));
  CHECK(doc.at("metric").get<std::string>() == "mse");
  REQUIRE(doc.at("aggregates").size() == 2);
  for (const auto& agg : doc.at("aggregates")) {
    CHECK(agg.at("folds_used").get<int>() == 3);
  }

  SUBCASE("too few rows per fold is a validation failure") {
    const RunResult bad =
        run_cli(dir, "evaluate --manifest '" + manifest + "' --folds 5 --estimators ls "
                     "--out '" + out + "'");
    // 15 rows < folds*(D+2) = 20
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: insufficient_rows:", 0) == 0);
  }
}

TEST_CASE("risk-study emits the requested check") {
  const fs::path dir = test::fresh_dir("cli-risk");

  SUBCASE("lemma-risk csv") {
    const RunResult r = run_cli(dir, "risk-study --check lemma-risk --d 8 --q 2 "
                                     "--replicates 400 --seed 3");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    CHECK(r.out.rfind("regime,", 0) == 0);
    CHECK(r.out.find("ecov") != std::string::npos);
  }

  SUBCASE("dominance json") {
    const RunResult r = run_cli(dir, "risk-study --check dominance --d 8 --q 2 "
                                     "--replicates 400 --seed 3 --format json");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    const auto doc = nlohmann::json::parse(r.out);
    REQUIRE(doc.is_array());
    CHECK(doc.size() == 6);  // 3 grid labels x 2 active pairs
    CHECK(doc[0].contains("label"));
    CHECK(doc[0].contains("z"));
  }

  SUBCASE("positive-part keeps only the mm-vs-mle comparison") {
    const RunResult r = run_cli(dir, "risk-study --check positive-part --d 8 --q 2 "
                                     "--replicates 400 --seed 3");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    const std::string& text = r.out;
    CHECK(text.find(",ls,") == std::string::npos);  // no least-squares comparison rows
    CHECK(text.find("ecov-mm,ecov-mle") != std::string::npos);
  }

  SUBCASE("positive-part without its regime is rejected") {
    const RunResult bad = run_cli(dir, "risk-study --check positive-part --d 2 --q 3 "
                                       "--replicates 50 --seed 3");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: regime_violation:", 0) == 0);
  }

  SUBCASE("unknown checks are rejected") {
    const RunResult bad = run_cli(dir, "risk-study --check magic --d 4 --q 2 --seed 1");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: bad_argument:", 0) == 0);
  }
}

TEST_CASE("gain reports the closed-form improvement") {
  const fs::path dir = test::fresh_dir("cli-gain");
  const std::string sigma = (dir / "sigma.csv").string();
  write_text(sigma, "1,1\n1,1\n");

  const RunResult r = run_cli(dir, "gain --sigma-file '" + sigma + "'");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  CHECK(r.out.rfind("field,value", 0) == 0);
  const auto at = r.out.find("\ngain,");
  REQUIRE(at != std::string::npos);
  CHECK(std::abs(std::strtod(r.out.c_str() + at + 6, nullptr) - 1.0 / 6.0) < 1e-14);
  CHECK(r.out.find("condition_number,inf") != std::string::npos);

  SUBCASE("json format") {
    const RunResult j = run_cli(dir, "gain --sigma-file '" + sigma + "' --format json");
    REQUIRE(j.exit_code == 0);
    const auto doc = nlohmann::json::parse(j.out);
    REQUIRE(doc.is_array());
    CHECK(doc[0].at("field").get<std::string>() == "gain");
  }

  SUBCASE("non-square input fails validation") {
    const std::string rect = (dir / "rect.csv").string();
    write_text(rect, "1,0,0\n0,1,0\n");
    const RunResult bad = run_cli(dir, "gain --sigma-file '" + rect + "'");
    CHECK(bad.exit_code == 1);
    CHECK(bad.err.rfind("error: dimension_mismatch:", 0) == 0);
  }
}

TEST_CASE("numerical failures exit with a distinct code") {
  // identity designs with zero responses make the moment-composed system exactly singular
  const fs::path dir = test::fresh_dir("cli-numeric");
  for (int file = 0; file < 2; ++file) {
    write_text((dir / ("data" + std::to_string(file) + ".csv")).string(),
               "y,a,b\n0,1,0\n0,0,1\n");
  }
  const std::string manifest = (dir / "manifest.json").string();
  write_text(manifest, std::string(R"({
  "response_column": "y",
  "task_kind": "regression",
  "datasets": [
    {"name": "first", "path": "data0.csv", "noise_variance": 1.0},
    {"name": "second", "path": "data1.csv", "noise_variance": 1.0}
  ]
})") + "\n");
  const std::string out = (dir / "beta.csv").string();
  const RunResult r = run_cli(
      dir, "fit --manifest '" + manifest + "' --estimator ecov-mm --out '" + out + "'");
  CHECK(r.exit_code == 2);
  CHECK(r.err.rfind("error: singular_system:", 0) == 0);
}
