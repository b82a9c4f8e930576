#include "dtlab/report.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtlab {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("format_number: to_chars failed");
  return std::string(buf, ptr);
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size())
    throw std::invalid_argument("CsvTable: row width " + std::to_string(cells.size()) +
                                " vs header " + std::to_string(header_.size()));
  rows_.push_back(std::move(cells));
}

void CsvTable::add_row_numbers(const std::vector<double>& values) {
  std::vector<std::string> cells;
  cells.reserve(values.size());
  for (double v : values) cells.push_back(format_number(v));
  add_row(std::move(cells));
}

namespace {

std::string escape_cell(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
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
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

}  // namespace

std::string CsvTable::to_string() const {
  std::ostringstream os;
  for (size_t i = 0; i < header_.size(); ++i) {
    if (i) os << ',';
    os << escape_cell(header_[i]);
  }
  os << '\n';
  for (const auto& row : rows_) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << escape_cell(row[i]);
    }
    os << '\n';
  }
  return os.str();
}

void CsvTable::write(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("CsvTable: cannot open " + path);
  out << to_string();
  if (!out) throw std::runtime_error("CsvTable: write failed for " + path);
}

CsvTable CsvTable::read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("CsvTable: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("CsvTable: " + path + " is empty");
  CsvTable t(split_csv_line(line));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.add_row(split_csv_line(line));
  }
  return t;
}

std::string fnv1a_hex(const std::string& text) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  static const char* hex = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = hex[h & 0xF];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMarginLeft = 56;
constexpr int kMarginBottom = 48;
constexpr int kMarginTop = 36;
constexpr int kMarginRight = 16;

std::string svg_header(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
     << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
     << title << "</text>\n";
  return os.str();
}

double plot_max(const std::vector<SvgSeries>& series) {
  double mx = 1e-12;
  for (const auto& s : series)
    for (double y : s.ys) mx = std::max(mx, y);
  return mx;
}

}  // namespace

void write_svg_bars(const std::string& path, const std::string& title,
                    const std::vector<std::string>& bins, const std::vector<SvgSeries>& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_svg_bars: cannot open " + path);
  out << svg_header(title);
  const double mx = plot_max(series);
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kHeight - kMarginTop - kMarginBottom;
  const size_t nbins = bins.size();
  const size_t nseries = series.size();
  const double group_w = plot_w / static_cast<double>(std::max<size_t>(1, nbins));
  const double bar_w = group_w / static_cast<double>(nseries + 1);
  for (size_t b = 0; b < nbins; ++b) {
    for (size_t s = 0; s < nseries; ++s) {
      const double y = b < series[s].ys.size() ? series[s].ys[b] : 0.0;
      const double h = y / mx * plot_h;
      const double x = kMarginLeft + group_w * static_cast<double>(b) +
                       bar_w * (static_cast<double>(s) + 0.5);
      out << "<rect x=\"" << format_number(x) << "\" y=\""
          << format_number(kMarginTop + plot_h - h) << "\" width=\"" << format_number(bar_w)
          << "\" height=\"" << format_number(h) << "\" fill=\"" << series[s].color << "\"/>\n";
    }
    out << "<text x=\"" << format_number(kMarginLeft + group_w * (static_cast<double>(b) + 0.5))
        << "\" y=\"" << kHeight - kMarginBottom + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << bins[b]
        << "</text>\n";
  }
  for (size_t s = 0; s < nseries; ++s) {
    out << "<rect x=\"" << kMarginLeft + 8 + static_cast<int>(s) * 150 << "\" y=\""
        << kMarginTop - 14 << "\" width=\"10\" height=\"10\" fill=\"" << series[s].color
        << "\"/>\n";
    out << "<text x=\"" << kMarginLeft + 22 + static_cast<int>(s) * 150 << "\" y=\""
        << kMarginTop - 5 << "\" font-family=\"sans-serif\" font-size=\"11\">" << series[s].label
        << "</text>\n";
  }
  out << "</svg>\n";
}

void write_svg_lines(const std::string& path, const std::string& title,
                     const std::vector<double>& xs, const std::vector<SvgSeries>& series) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_svg_lines: cannot open " + path);
  out << svg_header(title);
  double xmin = xs.empty() ? 0.0 : xs.front();
  double xmax = xs.empty() ? 1.0 : xs.back();
  if (xmax == xmin) xmax = xmin + 1.0;
  double ymin = 0.0, ymax = 1e-12;
  for (const auto& s : series)
    for (double y : s.ys) {
      ymax = std::max(ymax, y);
      ymin = std::min(ymin, y);
    }
  if (ymax == ymin) ymax = ymin + 1.0;
  const double plot_w = kWidth - kMarginLeft - kMarginRight;
  const double plot_h = kHeight - kMarginTop - kMarginBottom;
  auto px = [&](double x) {
    return kMarginLeft + (x - xmin) / (xmax - xmin) * plot_w;
  };
  auto py = [&](double y) {
    return kMarginTop + plot_h - (y - ymin) / (ymax - ymin) * plot_h;
  };
  out << "<line x1=\"" << kMarginLeft << "\" y1=\"" << kMarginTop + plot_h << "\" x2=\""
      << kMarginLeft + plot_w << "\" y2=\"" << kMarginTop + plot_h
      << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (size_t s = 0; s < series.size(); ++s) {
    out << "<polyline fill=\"none\" stroke=\"" << series[s].color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < series[s].ys.size() && i < xs.size(); ++i) {
      if (i) out << ' ';
      out << format_number(px(xs[i])) << ',' << format_number(py(series[s].ys[i]));
    }
    out << "\"/>\n";
    out << "<text x=\"" << kMarginLeft + 8 + static_cast<int>(s) * 150 << "\" y=\""
        << kMarginTop - 5 << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
        << series[s].color << "\">" << series[s].label << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace dtlab
