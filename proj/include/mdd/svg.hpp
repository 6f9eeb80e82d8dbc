// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "mdd/detector.hpp"
#include "mdd/io.hpp"

namespace mdd {

// Small self-contained SVG plotting helpers for the CLI's figure outputs.

struct SvgSeries {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

struct SvgCanvas {
  static constexpr int W = 640, H = 420;
  static constexpr int L = 70, R = 20, T = 40, B = 50;
  double x0, x1, y0, y1;
  std::ostringstream out;

  SvgCanvas(double x0_, double x1_, double y0_, double y1_, const std::string& title,
            const std::string& xlabel, const std::string& ylabel)
      : x0(x0_), x1(x1_), y0(y0_), y1(y1_) {
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
        << "\" height=\"" << H << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" "
           "font-size=\"15\" font-family=\"sans-serif\">" << title << "</text>\n"
        << "<text x=\"" << W / 2 << "\" y=\"" << H - 10
        << "\" text-anchor=\"middle\" font-size=\"12\" "
           "font-family=\"sans-serif\">" << xlabel << "</text>\n"
        << "<text x=\"16\" y=\"" << H / 2
        << "\" text-anchor=\"middle\" font-size=\"12\" "
           "font-family=\"sans-serif\" transform=\"rotate(-90 16 " << H / 2
        << ")\">" << ylabel << "</text>\n"
        << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R
        << "\" height=\"" << H - T - B
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      double fx = x0 + (x1 - x0) * i / 4.0;
      double fy = y0 + (y1 - y0) * i / 4.0;
      out << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 16
          << "\" text-anchor=\"middle\" font-size=\"10\" "
             "font-family=\"sans-serif\">" << format_double(fx) << "</text>\n";
      out << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 3
          << "\" text-anchor=\"end\" font-size=\"10\" "
             "font-family=\"sans-serif\">" << format_double(fy) << "</text>\n";
    }
  }

  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const {
    return H - B - (y - y0) / (y1 - y0) * (H - T - B);
  }

  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color) {
    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) out << px(x) << "," << py(y) << " ";
    out << "\"/>\n";
  }

  void bar(double xlo, double xhi, double height, const std::string& color,
           double opacity) {
    out << "<rect x=\"" << px(xlo) << "\" y=\"" << py(height) << "\" width=\""
        << px(xhi) - px(xlo) << "\" height=\"" << py(0) - py(height)
        << "\" fill=\"" << color << "\" fill-opacity=\"" << opacity
        << "\"/>\n";
  }

  void legend(const std::vector<std::pair<std::string, std::string>>& entries) {
    int y = T + 14;
    for (const auto& [label, color] : entries) {
      out << "<rect x=\"" << W - R - 150 << "\" y=\"" << y - 9
          << "\" width=\"12\" height=\"9\" fill=\"" << color << "\"/>\n"
          << "<text x=\"" << W - R - 134 << "\" y=\"" << y
          << "\" font-size=\"11\" font-family=\"sans-serif\">" << label
          << "</text>\n";
      y += 16;
    }
  }

  std::string finish() {
    out << "</svg>\n";
    return out.str();
  }
};

}  // namespace detail

// Overlaid histograms on a shared range (the score-difference distribution
// figure).
inline void svg_histograms(const std::string& path,
                           const std::vector<std::pair<std::string,
                                                       std::vector<double>>>&
                               series,
                           int n_bins, const std::string& title) {
  if (series.empty()) throw ValueError("no histogram series");
  double lo = series[0].second.at(0), hi = lo;
  for (const auto& [label, vals] : series)
    for (double v : vals) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (hi == lo) hi = lo + 1.0;
  double width = (hi - lo) / n_bins;

  std::vector<std::vector<size_t>> counts;
  size_t peak = 1;
  for (const auto& [label, vals] : series) {
    std::vector<size_t> c(n_bins, 0);
    for (double v : vals) {
      int b = std::clamp(static_cast<int>((v - lo) / width), 0, n_bins - 1);
      ++c[b];
    }
    for (size_t k : c) peak = std::max(peak, k);
    counts.push_back(std::move(c));
  }

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  detail::SvgCanvas canvas(lo, hi, 0, static_cast<double>(peak), title,
                           "score difference d", "count");
  std::vector<std::pair<std::string, std::string>> legend;
  for (size_t s = 0; s < series.size(); ++s) {
    const std::string color = palette[s % 4];
    for (int b = 0; b < n_bins; ++b)
      if (counts[s][b] > 0)
        canvas.bar(lo + b * width, lo + (b + 1) * width,
                   static_cast<double>(counts[s][b]), color, 0.45);
    legend.emplace_back(series[s].first, color);
  }
  canvas.legend(legend);
  write_text_file(path, canvas.finish());
}

inline void svg_det_curves(const std::string& path,
                           const std::vector<SvgSeries>& series,
                           const std::string& title) {
  detail::SvgCanvas canvas(0, 1, 0, 1, title, "false acceptance rate",
                           "false rejection rate");
  std::vector<std::pair<std::string, std::string>> legend;
  for (const auto& s : series) {
    canvas.polyline(s.points, s.color);
    legend.emplace_back(s.label, s.color);
  }
  canvas.legend(legend);
  write_text_file(path, canvas.finish());
}

inline void svg_line(const std::string& path,
                     const std::vector<std::pair<double, double>>& points,
                     const std::string& title, const std::string& xlabel,
                     const std::string& ylabel) {
  if (points.empty()) throw ValueError("no points to plot");
  double x0 = points[0].first, x1 = x0, y0 = points[0].second, y1 = y0;
  for (const auto& [x, y] : points) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  detail::SvgCanvas canvas(x0, x1, y0, y1, title, xlabel, ylabel);
  canvas.polyline(points, "#1f77b4");
  write_text_file(path, canvas.finish());
}

}  // namespace mdd
