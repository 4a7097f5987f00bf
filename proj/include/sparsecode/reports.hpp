#pragma once

// CSV and JSON report emission. Columns have a fixed order, floats carry 17
// significant digits so reports round-trip exactly, and every file starts
// with provenance comment lines.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsecode/classifiers.hpp"
#include "sparsecode/sensitivity.hpp"

namespace sparsecode {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> provenance;  // emitted as leading "# " lines
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

namespace detail {

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (const char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

inline void write_csv(const CsvTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  for (const std::string& line : table.provenance) out << "# " << line << '\n';
  for (std::size_t c = 0; c < table.columns.size(); ++c)
    out << (c ? "," : "") << detail::csv_escape(table.columns[c]);
  out << '\n';
  for (const auto& row : table.rows) {
    if (row.size() != table.columns.size())
      throw std::runtime_error("write_csv: row width mismatch");
    for (std::size_t c = 0; c < row.size(); ++c)
      out << (c ? "," : "") << detail::csv_escape(row[c]);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

// ---------------------------------------------------------------------------
// Report builders
// ---------------------------------------------------------------------------

inline const char* kind_name(PerturbationKind kind) {
  switch (kind) {
    case PerturbationKind::noise: return "noise";
    case PerturbationKind::swap: return "swap";
    default: return "distortion";
  }
}

// one row per (sample, kind); raw values so binning never loses information
inline CsvTable histogram_csv(const SensitivityHistogram& hist) {
  CsvTable table;
  table.columns = {"sample", "kind", "value"};
  const auto emit = [&](const std::vector<double>& values, const char* kind) {
    for (std::size_t s = 0; s < values.size(); ++s)
      table.rows.push_back({std::to_string(s), kind, format_double(values[s])});
  };
  emit(hist.noise, "noise");
  emit(hist.swap, "swap");
  emit(hist.distortion, "distortion");
  return table;
}

inline nlohmann::json histogram_summary(const SensitivityHistogram& hist) {
  nlohmann::json j;
  j["representation"] = hist.representation;
  j["requested"] = hist.requested;
  j["non_generic_skipped"] = hist.non_generic_skipped;
  const auto stats = [](const std::vector<double>& v) {
    nlohmann::json s;
    s["count"] = v.size();
    if (!v.empty()) {
      s["median"] = median(v);
      double mean = 0.0;
      for (const double x : v) mean += x;
      s["mean"] = mean / static_cast<double>(v.size());
    }
    return s;
  };
  j["noise"] = stats(hist.noise);
  j["swap"] = stats(hist.swap);
  j["distortion"] = stats(hist.distortion);
  return j;
}

// fixed-width histogram binning for quick plotting; raw CSV remains canonical
inline CsvTable binned_histogram_csv(const SensitivityHistogram& hist, int bins = 100) {
  CsvTable table;
  table.columns = {"kind", "bin_low", "bin_high", "count"};
  const auto emit = [&](const std::vector<double>& values, const char* kind) {
    if (values.empty()) return;
    double max_v = 0.0;
    for (const double v : values) max_v = std::max(max_v, v);
    if (max_v == 0.0) max_v = 1.0;
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    for (const double v : values) {
      auto b = static_cast<std::size_t>(v / max_v * bins);
      if (b >= counts.size()) b = counts.size() - 1;
      ++counts[b];
    }
    for (int b = 0; b < bins; ++b)
      table.rows.push_back({kind, format_double(max_v * b / bins),
                            format_double(max_v * (b + 1) / bins),
                            std::to_string(counts[static_cast<std::size_t>(b)])});
  };
  emit(hist.noise, "noise");
  emit(hist.swap, "swap");
  emit(hist.distortion, "distortion");
  return table;
}

inline CsvTable spectrum_csv(const GainSpectrum& spectrum) {
  CsvTable table;
  table.columns = {"index", "sigma", "gain"};
  for (Eigen::Index i = 0; i < spectrum.sigma.size(); ++i)
    table.rows.push_back({std::to_string(i), format_double(spectrum.sigma[i]),
                          format_double(spectrum.gains[i])});
  return table;
}

inline CsvTable vector_csv(const Eigen::VectorXd& v, const char* value_column) {
  CsvTable table;
  table.columns = {"index", value_column};
  for (Eigen::Index i = 0; i < v.size(); ++i)
    table.rows.push_back({std::to_string(i), format_double(v[i])});
  return table;
}

inline CsvTable pairs_csv(const FilterPairReport& report) {
  CsvTable table;
  table.columns = {"filter_i", "filter_j", "overlap", "mean_i", "mean_j", "mean_diff"};
  for (const FilterPairStat& s : report.pairs)
    table.rows.push_back({std::to_string(s.i), std::to_string(s.j), format_double(s.overlap),
                          format_double(s.mean_i), format_double(s.mean_j),
                          format_double(s.mean_diff)});
  return table;
}

inline CsvTable eval_report_csv(const EvalReport& report) {
  CsvTable table;
  table.columns = {"representation", "classifier", "metric",       "per_class",
                   "seed",           "lambda_w",   "train_accuracy", "test_accuracy"};
  for (const EvalCell& c : report.cells)
    table.rows.push_back({c.representation, c.classifier, c.metric, std::to_string(c.per_class),
                          std::to_string(c.seed), format_double(c.lambda_w),
                          format_double(c.train_accuracy), format_double(c.test_accuracy)});
  return table;
}

inline CsvTable objective_csv(const std::vector<double>& history) {
  CsvTable table;
  table.columns = {"accepted_step", "objective"};
  for (std::size_t i = 0; i < history.size(); ++i)
    table.rows.push_back({std::to_string(i), format_double(history[i])});
  return table;
}

}  // namespace sparsecode
