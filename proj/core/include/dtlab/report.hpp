#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Byte-deterministic CSV and minimal static SVG output. CSV is the
// source of truth; every table carries config_hash and seed columns.

namespace dtlab {

// Shortest round-trip decimal form (std::to_chars); integers print
// without a trailing ".0".
std::string format_number(double v);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);
  void add_row(std::vector<std::string> cells);
  void add_row_numbers(const std::vector<double>& values);
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::string to_string() const;
  void write(const std::string& path) const;
  static CsvTable read(const std::string& path);

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// FNV-1a over a canonical string, hex-encoded.
std::string fnv1a_hex(const std::string& text);

struct SvgSeries {
  std::string label;
  std::string color;
  std::vector<double> ys;
};

// Grouped bar chart (histograms) with fixed geometry and no metadata
// timestamps; bins label the x axis.
void write_svg_bars(const std::string& path, const std::string& title,
                    const std::vector<std::string>& bins, const std::vector<SvgSeries>& series);

// Simple polyline chart over a shared x grid.
void write_svg_lines(const std::string& path, const std::string& title,
                     const std::vector<double>& xs, const std::vector<SvgSeries>& series);

}  // namespace dtlab
