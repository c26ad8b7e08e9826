#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "psnet/common.hpp"

namespace psnet {

/// Header-indexed CSV table. Parsing handles double-quoted fields containing
/// commas; everything the pipeline writes is unquoted.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_column(const std::string& name, const std::string& path) const {
    int c = column(name);
    if (c < 0)
      throw DataError("CSV '" + path + "' is missing column '" + name + "'");
    return c;
  }
};

inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open CSV '" + path + "'");
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty() && f.eof()) break;
    auto fields = parse_csv_line(line);
    if (first) {
      t.header = fields;
      first = false;
    } else {
      t.rows.push_back(fields);
    }
  }
  if (first) throw DataError("CSV '" + path + "' is empty");
  return t;
}

inline void write_csv(const std::string& path,
                      const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path, std::ios::binary);  // binary: stable newlines
  if (!f) throw DataError("cannot write CSV '" + path + "'");
  for (size_t i = 0; i < header.size(); ++i)
    f << (i ? "," : "") << header[i];
  f << "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i)
      f << (i ? "," : "") << row[i];
    f << "\n";
  }
}

}  // namespace psnet
