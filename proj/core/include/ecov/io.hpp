#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ecov/covariance.hpp"
#include "ecov/evaluate.hpp"
#include "ecov/model.hpp"
#include "ecov/simulate.hpp"

namespace ecov {

// %.17g — round-trips doubles exactly; nan/inf use the C library spellings
std::string format_double(double value);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string render_csv(const Table& table);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& content);

struct Csv {
  std::vector<std::string> header;
  Matrix values;  // one row per data line, strictly numeric
};

// headered CSV: unique non-empty column names, every cell a number; errors carry
// path:line positions; blank lines and a UTF-8 BOM are tolerated
Csv read_csv(const std::string& path);
Matrix read_csv_headerless(const std::string& path);

struct ManifestEntry {
  std::string name;
  std::string path;  // resolved against the manifest's directory when relative
  std::optional<double> noise_variance;
};

struct Manifest {
  std::string response_column;
  DatasetKind kind = DatasetKind::gaussian;
  std::vector<ManifestEntry> datasets;
};

Manifest read_manifest(const std::string& path);

struct LoadedCollection {
  NamedCollection data;
  std::vector<std::string> covariates;  // shared column order across all datasets
  std::string response_column;
};

// reads every dataset file; all must expose the same covariate columns in the
// same order (the fitted rows of beta are only meaningful under one ordering)
LoadedCollection load_csv_collection(const Manifest& manifest);

struct SavedModel {
  std::string estimator;
  DatasetKind kind = DatasetKind::gaussian;
  std::string response_column;
  std::vector<std::string> covariates;
  std::vector<std::string> datasets;
  Matrix beta;  // D x Q
  std::optional<Matrix> covariance;  // Sigma-hat (Q x Q) or Gamma-hat (D x D)
  bool covariance_psd = true;
  std::optional<EmTrace> trace;  // covariance iterates are not persisted
};

// versioned JSON with sorted keys and row-major matrix payloads
std::string model_json(const SavedModel& model);
void save_model(const SavedModel& model, const std::string& path);
SavedModel load_model(const std::string& path);

Table risk_table(const std::vector<RiskCurveRow>& rows);
Table cv_table(const CvReport& report);
std::string cv_aggregates_json(const CvReport& report);

}  // namespace ecov
