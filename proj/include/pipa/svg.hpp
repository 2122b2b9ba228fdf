#pragma once

// Standalone SVG line plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace pipa {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v, const char* format = "%.2f") {
  char buf[48];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

}  // namespace detail

/// Line plot with axes, ticks and a legend. Non-finite points are skipped;
/// with no finite points the axes span [0, 1].
inline std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                                 const std::vector<Series>& series) {
  constexpr double width = 640.0;
  constexpr double height = 400.0;
  constexpr double left = 70.0;
  constexpr double right = 160.0;
  constexpr double top = 40.0;
  constexpr double bottom = 50.0;
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  double x_lo = std::numeric_limits<double>::infinity();
  double x_hi = -x_lo;
  double y_lo = x_lo;
  double y_hi = -x_lo;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (!std::isfinite(x_lo)) {
    x_lo = y_lo = 0.0;
    x_hi = y_hi = 1.0;
  }
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  if (y_hi == y_lo) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * plot_w; };
  auto py = [&](double y) { return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h; };

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::num(width, "%.0f") + "\" height=\"" +
         detail::num(height, "%.0f") + "\" viewBox=\"0 0 " + detail::num(width, "%.0f") + " " +
         detail::num(height, "%.0f") + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + detail::num(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" +
         detail::xml_escape(title) + "</text>\n";
  out += "<g stroke=\"black\" stroke-width=\"1\">\n";
  out += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top + plot_h) + "\" x2=\"" +
         detail::num(left + plot_w) + "\" y2=\"" + detail::num(top + plot_h) + "\"/>\n";
  out += "<line x1=\"" + detail::num(left) + "\" y1=\"" + detail::num(top) + "\" x2=\"" + detail::num(left) +
         "\" y2=\"" + detail::num(top + plot_h) + "\"/>\n";
  out += "</g>\n<g font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x_lo + (x_hi - x_lo) * i / 4.0;
    const double fy = y_lo + (y_hi - y_lo) * i / 4.0;
    out += "<text x=\"" + detail::num(px(fx)) + "\" y=\"" + detail::num(top + plot_h + 16) +
           "\" text-anchor=\"middle\">" + detail::num(fx, "%.4g") + "</text>\n";
    out += "<text x=\"" + detail::num(left - 6) + "\" y=\"" + detail::num(py(fy) + 4) + "\" text-anchor=\"end\">" +
           detail::num(fy, "%.4g") + "</text>\n";
  }
  out += "</g>\n";
  out += "<text x=\"" + detail::num(left + plot_w / 2) + "\" y=\"" + detail::num(height - 10) +
         "\" text-anchor=\"middle\" font-size=\"12\">" + detail::xml_escape(x_label) + "</text>\n";
  out += "<text x=\"16\" y=\"" + detail::num(top + plot_h / 2) + "\" text-anchor=\"middle\" font-size=\"12\" "
         "transform=\"rotate(-90 16 " + detail::num(top + plot_h / 2) + ")\">" + detail::xml_escape(y_label) +
         "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::string color = palette[i % std::size(palette)];
    std::string path;
    for (const auto& [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      path += (path.empty() ? "" : " ") + detail::num(px(x)) + "," + detail::num(py(y));
    }
    if (!path.empty()) {
      out += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + path + "\"/>\n";
    }
    const double ly = top + 14.0 + 18.0 * static_cast<double>(i);
    out += "<line x1=\"" + detail::num(left + plot_w + 12) + "\" y1=\"" + detail::num(ly - 4) + "\" x2=\"" +
           detail::num(left + plot_w + 32) + "\" y2=\"" + detail::num(ly - 4) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + detail::num(left + plot_w + 36) + "\" y=\"" + detail::num(ly) + "\" font-size=\"11\">" +
           detail::xml_escape(series[i].name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace pipa
