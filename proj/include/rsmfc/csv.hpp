#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rsmfc {

// Shortest round-trippable decimal form; identical doubles always render to
// identical text, which is what the bit-exact rerun contract needs.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

// RFC-4180-style CSV: comma separated, '.' decimal point, mandatory header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary), n_cols_(header.size()) {
    if (!out_) throw std::runtime_error("cannot open CSV for writing: " + path);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << header[i];
    }
    out_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != n_cols_) throw std::runtime_error("CSV row arity mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  static std::string cell(double v) { return format_double(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(const std::string& v) { return v; }

 private:
  std::ofstream out_;
  std::size_t n_cols_;
};

// Small structured-text summary: one "key = value" per line.
inline void write_summary(const std::string& path,
                          const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open summary for writing: " + path);
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
}

}  // namespace rsmfc
