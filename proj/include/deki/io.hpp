// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "deki/common.hpp"
#include "deki/record.hpp"

namespace deki {

/// RFC 4180 field quoting; numbers are emitted with 17 significant digits
/// and '.' decimal separator.
inline std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

inline std::string csv_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_quote(fields[i]);
    }
    out_ << "\r\n";
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

/// Writes via a temporary file in the same directory, then renames, so a
/// reader never sees a partially written file.
inline void atomic_write(const std::filesystem::path& path, const std::string& payload) {
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw NumericalError("atomic_write: cannot open " + tmp);
    out << payload;
    if (!out.good()) throw NumericalError("atomic_write: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Per-step CSV of a run record: the initial state plus one row per step.
inline std::string run_record_csv(const RunRecord& rec) {
  CsvWriter w;
  w.row({"step", "loss", "e_n", "cov_norm", "diag_min", "diag_max", "rank", "kappa",
         "h_n", "htilde_n", "queries"});
  auto emit = [&w](const StepStats& s) {
    w.row({std::to_string(s.step), csv_number(s.loss), csv_number(s.misfit),
           csv_number(s.cov_norm), csv_number(s.diag_min), csv_number(s.diag_max),
           std::to_string(s.rank), csv_number(s.kappa), csv_number(s.h),
           csv_number(s.htilde), std::to_string(s.queries)});
  };
  emit(rec.initial);
  for (const auto& s : rec.steps) emit(s);
  return w.str();
}

/// Grid-field CSV: a one-field header row with N, then row-major values,
/// one per line.
inline std::string grid_field_csv(const Vector& field, int grid_n) {
  require(field.size() == static_cast<Index>(grid_n) * grid_n,
          "grid_field_csv: size mismatch");
  CsvWriter w;
  w.row({std::to_string(grid_n)});
  for (Index i = 0; i < field.size(); ++i) w.row({csv_number(field[i])});
  return w.str();
}

inline Vector parse_grid_field_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "grid field: empty stream");
  // strip trailing CR of CRLF rows
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  const int n = std::stoi(line);
  require(n >= 1, "grid field: positive N");
  Vector field(static_cast<Index>(n) * n);
  for (Index i = 0; i < field.size(); ++i) {
    require(static_cast<bool>(std::getline(in, line)), "grid field: truncated values");
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    field[i] = std::stod(line);
  }
  return field;
}

}  // namespace deki
