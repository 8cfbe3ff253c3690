#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "apc/common.hpp"

namespace apc {

// Minimal CSV layer: comma separated, first row is the header, fields may be
// double-quoted (embedded commas and doubled quotes supported). That is all
// the file formats here need.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by header name, -1 if absent.
  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_column(const std::string& name, const std::string& path) const {
    int c = column(name);
    require(c >= 0, errc::bad_input, path + ": missing column '" + name + "'");
    return c;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line,
                                               const std::string& where) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field += c;
    }
  }
  require(!quoted, errc::bad_input, where + ": unterminated quote");
  out.push_back(field);
  return out;
}

}  // namespace detail

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), errc::bad_input, "cannot open " + path);
  CsvTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line[0] == '\xef' && line[1] == '\xbb' &&
        line[2] == '\xbf')
      line.erase(0, 3);
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line, path + ":" + std::to_string(lineno));
    if (lineno == 1) {
      table.header = std::move(fields);
    } else {
      require(fields.size() == table.header.size(), errc::bad_input,
              path + ":" + std::to_string(lineno) + ": expected " +
                  std::to_string(table.header.size()) + " fields, got " +
                  std::to_string(fields.size()));
      table.rows.push_back(std::move(fields));
    }
  }
  require(!table.header.empty(), errc::bad_input, path + ": empty file");
  return table;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  require(out.good(), errc::bad_input, "cannot open " + path + " for writing");
  auto write_row = [&out](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out << ',';
      const std::string& f = fields[i];
      if (f.find_first_of(",\"\n") != std::string::npos) {
        out << '"';
        for (char c : f) {
          if (c == '"') out << '"';
          out << c;
        }
        out << '"';
      } else {
        out << f;
      }
    }
    out << '\n';
  };
  write_row(header);
  for (const auto& r : rows) write_row(r);
  require(out.good(), errc::bad_input, "write failed for " + path);
}

inline double parse_double(const std::string& s, const std::string& where) {
  require(!s.empty(), errc::bad_input, where + ": empty numeric field");
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    fail(errc::bad_input, where + ": cannot parse '" + s + "' as a number");
  }
  require(pos == s.size(), errc::bad_input,
          where + ": trailing characters in numeric field '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& s, const std::string& where) {
  require(!s.empty(), errc::bad_input, where + ": empty integer field");
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    fail(errc::bad_input, where + ": cannot parse '" + s + "' as an integer");
  }
  require(pos == s.size(), errc::bad_input,
          where + ": trailing characters in integer field '" + s + "'");
  return v;
}

}  // namespace apc
