#pragma once

// Static figures: SVG line charts for weight-change curves and a PNG grid
// that places a sample next to its identifier attention maps.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "textloc/image.hpp"

namespace textloc {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

inline std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                                  const std::string& y_label) {
  static const char* kColours[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double w = 640, h = 400, left = 70, right = 150, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 0;
  bool any = false;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!any) {
        x0 = x1 = s.x[i];
        y1 = s.y[i];
        any = true;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double v) { return h - bottom - (v - y0) / (y1 - y0) * (h - top - bottom); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double yv = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << px(xv) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  o << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  o << "<text x=\"16\" y=\"" << (top + h - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (top + h - bottom) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    const char* colour = kColours[k % 6];
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) o << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    o << "\"/>\n";
    const double ly = top + 20 + 20.0 * static_cast<double>(k);
    o << "<line x1=\"" << w - right + 12 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 32 << "\" y2=\"" << ly
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << w - right + 38 << "\" y=\"" << ly + 4 << "\">" << s.label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// Sample followed by one panel per map. Maps are stretched to their own
// maximum for visibility; the probe PNGs keep the raw values.
inline Image attention_grid(const Image& sample, const std::vector<Matrix>& maps, int panel = 128) {
  std::vector<Image> panels;
  const Image s = to_rgb(sample);
  panels.push_back(resize_image(s, panel, panel));
  for (const Matrix& m : maps) {
    const double peak = m.maxCoeff();
    const Matrix scaled = peak > 0.0 ? Matrix(m / peak) : m;
    panels.push_back(to_rgb(resize_image(map_to_gray(scaled), panel, panel)));
  }
  return hstack(panels, 4);
}

}  // namespace textloc
