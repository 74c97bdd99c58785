#include "ecov/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ecov {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t comma = line.find(',', start);
    const std::string_view cell =
        comma == std::string_view::npos ? line.substr(start) : line.substr(start, comma - start);
    out.emplace_back(trim(cell));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_cell(const std::string& cell, const std::string& path, size_t line, size_t column) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto result = std::from_chars(begin, end, value);
  if (result.ec != std::errc{} || result.ptr != end || cell.empty()) {
    fail(ErrorCode::parse_failure, path + ":" + std::to_string(line) + ": column " +
                                       std::to_string(column + 1) + ": cannot parse '" + cell +
                                       "' as a number");
  }
  return value;
}

struct CsvLines {
  std::vector<std::pair<size_t, std::string>> lines;  // (1-based line number, content)
};

CsvLines read_lines(const std::string& path) {
  std::string text = read_text(path);
  if (!text.empty() && text.starts_with("\xEF\xBB\xBF")) text.erase(0, 3);
  CsvLines out;
  size_t line_number = 0;
  size_t start = 0;
  while (start <= text.size()) {
    const size_t nl = text.find('\n', start);
    std::string_view raw = nl == std::string::npos
                               ? std::string_view(text).substr(start)
                               : std::string_view(text).substr(start, nl - start);
    ++line_number;
    if (!trim(raw).empty()) out.lines.emplace_back(line_number, std::string(raw));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  if (out.lines.empty()) {
    fail(ErrorCode::parse_failure, path + ": file holds no non-blank lines");
  }
  return out;
}

Matrix parse_rows(const CsvLines& csv, size_t first, size_t width, const std::string& path) {
  const size_t count = csv.lines.size() - first;
  Matrix values(static_cast<Index>(count), static_cast<Index>(width));
  for (size_t r = 0; r < count; ++r) {
    const auto& [line_number, content] = csv.lines[first + r];
    const auto cells = split_fields(content);
    if (cells.size() != width) {
      fail(ErrorCode::parse_failure, path + ":" + std::to_string(line_number) + ": expected " +
                                         std::to_string(width) + " fields, got " +
                                         std::to_string(cells.size()));
    }
    for (size_t c = 0; c < width; ++c) {
      values(static_cast<Index>(r), static_cast<Index>(c)) =
          parse_cell(cells[c], path, line_number, c);
    }
  }
  return values;
}

json matrix_json(const Matrix& m) {
  json values = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) values.push_back(m(r, c));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"values", std::move(values)}};
}

Matrix matrix_from_json(const json& j, const std::string& path) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto& values = j.at("values");
  if (rows < 1 || cols < 1 || static_cast<Index>(values.size()) != rows * cols) {
    fail(ErrorCode::parse_failure, path + ": matrix payload has inconsistent shape");
  }
  Matrix m(rows, cols);
  size_t at = 0;
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = values.at(at++).get<double>();
  }
  return m;
}

const char* kind_token(DatasetKind kind) {
  return kind == DatasetKind::gaussian ? "regression" : "classification";
}

DatasetKind kind_from_token(const std::string& token, const std::string& path) {
  if (token == "regression") return DatasetKind::gaussian;
  if (token == "classification") return DatasetKind::binary;
  fail(ErrorCode::parse_failure,
       path + ": task_kind must be 'regression' or 'classification', got '" + token + "'");
}

std::string strip_code_prefix(const Error& e) {
  const std::string what = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  return what.starts_with(prefix) ? what.substr(prefix.size()) : what;
}

}  // namespace

std::string format_double(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

std::string render_csv(const Table& table) {
  std::string out;
  const auto append_row = [&out](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  append_row(table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      fail(ErrorCode::bad_argument, "table row width differs from its header");
    }
    append_row(row);
  }
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_failure, "cannot open '" + path + "' for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) fail(ErrorCode::io_failure, "read failed on '" + path + "'");
  return std::move(buffer).str();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io_failure, "cannot open '" + path + "' for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) fail(ErrorCode::io_failure, "write failed on '" + path + "'");
}

Csv read_csv(const std::string& path) {
  const CsvLines csv = read_lines(path);
  Csv out;
  out.header = split_fields(csv.lines.front().second);
  std::set<std::string> seen;
  for (const auto& name : out.header) {
    if (name.empty()) {
      fail(ErrorCode::parse_failure,
           path + ":" + std::to_string(csv.lines.front().first) + ": empty column name");
    }
    if (!seen.insert(name).second) {
      fail(ErrorCode::parse_failure, path + ":" + std::to_string(csv.lines.front().first) +
                                         ": duplicate column '" + name + "'");
    }
  }
  out.values = parse_rows(csv, 1, out.header.size(), path);
  return out;
}

Matrix read_csv_headerless(const std::string& path) {
  const CsvLines csv = read_lines(path);
  const size_t width = split_fields(csv.lines.front().second).size();
  return parse_rows(csv, 0, width, path);
}

Manifest read_manifest(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_failure, path + ": " + e.what());
  }
  Manifest manifest;
  try {
    manifest.response_column = doc.at("response_column").get<std::string>();
    manifest.kind = kind_from_token(doc.at("task_kind").get<std::string>(), path);
    const auto& datasets = doc.at("datasets");
    if (!datasets.is_array() || datasets.empty()) {
      fail(ErrorCode::parse_failure, path + ": 'datasets' must be a non-empty array");
    }
    const auto base = std::filesystem::path(path).parent_path();
    std::set<std::string> names;
    for (const auto& entry : datasets) {
      ManifestEntry m;
      m.name = entry.at("name").get<std::string>();
      m.path = entry.at("path").get<std::string>();
      if (m.name.empty() || m.path.empty()) {
        fail(ErrorCode::parse_failure, path + ": dataset name and path must be non-empty");
      }
      if (!names.insert(m.name).second) {
        fail(ErrorCode::parse_failure, path + ": duplicate dataset name '" + m.name + "'");
      }
      if (entry.contains("noise_variance") && !entry.at("noise_variance").is_null()) {
        if (manifest.kind == DatasetKind::binary) {
          fail(ErrorCode::parse_failure,
               path + ": dataset '" + m.name + "': noise_variance is not a classification field");
        }
        m.noise_variance = entry.at("noise_variance").get<double>();
      }
      const std::filesystem::path p(m.path);
      if (p.is_relative()) m.path = (base / p).lexically_normal().generic_string();
      manifest.datasets.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_failure, path + ": " + e.what());
  }
  if (manifest.response_column.empty()) {
    fail(ErrorCode::parse_failure, path + ": response_column must be non-empty");
  }
  return manifest;
}

LoadedCollection load_csv_collection(const Manifest& manifest) {
  std::vector<RegressionDataset> datasets;
  std::vector<std::string> names;
  std::vector<std::string> covariates;
  std::string first_name;
  for (const auto& entry : manifest.datasets) {
    const Csv csv = read_csv(entry.path);
    const auto response_it =
        std::find(csv.header.begin(), csv.header.end(), manifest.response_column);
    if (response_it == csv.header.end()) {
      fail(ErrorCode::bad_argument, "dataset " + entry.name + ": no column named '" +
                                        manifest.response_column + "' in " + entry.path);
    }
    const Index response_col = static_cast<Index>(response_it - csv.header.begin());
    std::vector<std::string> cols;
    for (const auto& name : csv.header) {
      if (name != manifest.response_column) cols.push_back(name);
    }
    if (cols.empty()) {
      fail(ErrorCode::bad_argument, "dataset " + entry.name + ": no covariate columns");
    }
    if (covariates.empty()) {
      covariates = cols;
      first_name = entry.name;
    } else if (cols != covariates) {
      fail(ErrorCode::dimension_mismatch,
           "dataset " + entry.name + ": covariate columns differ from dataset " + first_name +
               " (same names in the same order are required)");
    }
    Matrix design(csv.values.rows(), static_cast<Index>(covariates.size()));
    Index at = 0;
    for (Index c = 0; c < static_cast<Index>(csv.header.size()); ++c) {
      if (c == response_col) continue;
      design.col(at++) = csv.values.col(c);
    }
    try {
      datasets.emplace_back(std::move(design), csv.values.col(response_col),
                            entry.noise_variance,
                            manifest.kind == DatasetKind::binary ? DatasetKind::binary
                                                                 : DatasetKind::gaussian);
    } catch (const Error& e) {
      fail(e.code(), "dataset " + entry.name + ": " + strip_code_prefix(e));
    }
    names.push_back(entry.name);
  }
  LoadedCollection out{NamedCollection{DatasetCollection(std::move(datasets)), std::move(names)},
                       std::move(covariates), manifest.response_column};
  return out;
}

std::string model_json(const SavedModel& model) {
  if (model.beta.size() == 0) fail(ErrorCode::bad_argument, "model has no coefficients");
  if (static_cast<Index>(model.datasets.size()) != model.beta.cols() ||
      static_cast<Index>(model.covariates.size()) != model.beta.rows()) {
    fail(ErrorCode::dimension_mismatch, "model names do not match the coefficient shape");
  }
  json doc{{"format", "ecov-model-v1"},
           {"estimator", model.estimator},
           {"task_kind", kind_token(model.kind)},
           {"response_column", model.response_column},
           {"covariates", model.covariates},
           {"datasets", model.datasets},
           {"beta", matrix_json(model.beta)},
           {"covariance_psd", model.covariance_psd}};
  doc["covariance"] = model.covariance ? matrix_json(*model.covariance) : json(nullptr);
  if (model.trace) {
    doc["trace"] = json{{"converged", model.trace->converged},
                        {"iterations", model.trace->iterations},
                        {"log_marginal_likelihoods", model.trace->log_marginal_likelihoods}};
  } else {
    doc["trace"] = json(nullptr);
  }
  return doc.dump(2) + "\n";
}

void save_model(const SavedModel& model, const std::string& path) {
  write_text(path, model_json(model));
}

SavedModel load_model(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_failure, path + ": " + e.what());
  }
  SavedModel model;
  try {
    const auto format = doc.at("format").get<std::string>();
    if (format != "ecov-model-v1") {
      fail(ErrorCode::parse_failure, path + ": unsupported model format '" + format + "'");
    }
    model.estimator = doc.at("estimator").get<std::string>();
    model.kind = kind_from_token(doc.at("task_kind").get<std::string>(), path);
    model.response_column = doc.at("response_column").get<std::string>();
    model.covariates = doc.at("covariates").get<std::vector<std::string>>();
    model.datasets = doc.at("datasets").get<std::vector<std::string>>();
    model.beta = matrix_from_json(doc.at("beta"), path);
    model.covariance_psd = doc.at("covariance_psd").get<bool>();
    if (!doc.at("covariance").is_null()) {
      model.covariance = matrix_from_json(doc.at("covariance"), path);
    }
    if (doc.contains("trace") && !doc.at("trace").is_null()) {
      EmTrace trace;
      trace.converged = doc.at("trace").at("converged").get<bool>();
      trace.iterations = doc.at("trace").at("iterations").get<Index>();
      trace.log_marginal_likelihoods =
          doc.at("trace").at("log_marginal_likelihoods").get<std::vector<double>>();
      model.trace = std::move(trace);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::parse_failure, path + ": " + e.what());
  }
  if (static_cast<Index>(model.datasets.size()) != model.beta.cols() ||
      static_cast<Index>(model.covariates.size()) != model.beta.rows()) {
    fail(ErrorCode::parse_failure, path + ": model names do not match the coefficient shape");
  }
  return model;
}

Table risk_table(const std::vector<RiskCurveRow>& rows) {
  Table table;
  table.header = {"dimension", "estimator", "mean_error", "sem", "replicates", "failures"};
  for (const auto& row : rows) {
    table.rows.push_back({std::to_string(row.dimension), row.estimator,
                          format_double(row.mean_error), format_double(row.sem),
                          std::to_string(row.replicates), std::to_string(row.failures)});
  }
  return table;
}

Table cv_table(const CvReport& report) {
  Table table;
  table.header = {"estimator", "dataset", "fold", "metric", "value"};
  for (const auto& row : report.rows) {
    table.rows.push_back({row.estimator, row.dataset, std::to_string(row.fold),
                          to_string(report.metric), format_double(row.value)});
  }
  return table;
}

std::string cv_aggregates_json(const CvReport& report) {
  json aggregates = json::array();
  for (const auto& agg : report.aggregates) {
    aggregates.push_back(json{{"estimator", agg.estimator},
                              {"mean", agg.mean},
                              {"sem", agg.sem},
                              {"folds_used", agg.folds_used}});
  }
  json doc{{"metric", to_string(report.metric)}, {"aggregates", std::move(aggregates)}};
  return doc.dump(2) + "\n";
}

}  // namespace ecov
