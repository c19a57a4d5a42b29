#pragma once

// Minimal RFC-4180 style CSV: fields containing ',', '"', '\r' or '\n' are
// quoted with doubled inner quotes; records end with '\n'; numbers use '.'
// as decimal separator regardless of locale.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace condatlas::csv {

using Row = std::vector<std::string>;

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Shortest round-trip representation; empty string for NaN (missing value).
inline std::string format_number(double v) {
  if (std::isnan(v)) return {};
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_row(const Row& row) {
  std::string line;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) line += ',';
    line += quote(row[i]);
  }
  line += '\n';
  return line;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : os_(path, std::ios::binary | std::ios::trunc) {
    if (!os_) throw CsvError("cannot open for writing: " + path.string());
  }
  void row(const Row& r) {
    os_ << format_row(r);
    if (!os_) throw CsvError("csv write failed");
  }

 private:
  std::ofstream os_;
};

/// Strict parser: rejects bare quotes inside unquoted fields, text after a
/// closing quote, unterminated quotes and ragged rows.
inline std::vector<Row> parse(std::string_view text) {
  std::vector<Row> rows;
  Row row;
  std::string field;
  std::size_t i = 0;
  const std::size_t n = text.size();
  bool any_in_record = false;
  while (i < n) {
    char c = text[i];
    if (c == '"') {
      if (!field.empty()) throw CsvError("quote inside unquoted field");
      ++i;
      bool closed = false;
      while (i < n) {
        if (text[i] == '"') {
          if (i + 1 < n && text[i + 1] == '"') {
            field += '"';
            i += 2;
          } else {
            ++i;
            closed = true;
            break;
          }
        } else {
          field += text[i++];
        }
      }
      if (!closed) throw CsvError("unterminated quoted field");
      if (i < n && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
        throw CsvError("characters after closing quote");
      }
      any_in_record = true;
      continue;
    }
    if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any_in_record = true;
      ++i;
      continue;
    }
    if (c == '\r' || c == '\n') {
      if (c == '\r') {
        if (i + 1 >= n || text[i + 1] != '\n') throw CsvError("bare carriage return");
        ++i;
      }
      ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any_in_record = false;
      continue;
    }
    field += c;
    any_in_record = true;
    ++i;
  }
  if (any_in_record) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw CsvError("ragged row");
  }
  return rows;
}

inline std::vector<Row> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CsvError("cannot open: " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse(text);
}

/// Header-indexed view over parsed rows.
class Table {
 public:
  explicit Table(std::vector<Row> rows) : rows_(std::move(rows)) {
    if (rows_.empty()) throw CsvError("missing header");
  }
  const Row& header() const { return rows_.front(); }
  std::size_t size() const { return rows_.size() - 1; }
  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header().size(); ++i) {
      if (header()[i] == name) return i;
    }
    throw CsvError("missing column: " + std::string(name));
  }
  const std::string& get(std::size_t row, std::string_view name) const {
    return rows_[row + 1][column(name)];
  }
  double number(std::size_t row, std::string_view name) const {
    const std::string& s = get(row, name);
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw CsvError("not a number in column " + std::string(name) + ": '" + s + "'");
    }
    return v;
  }

 private:
  std::vector<Row> rows_;
};

}  // namespace condatlas::csv
