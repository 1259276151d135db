#pragma once

#include <string>
#include <vector>

namespace klflow {

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional half-width of a shaded band around y
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  double width = 640;
  double height = 420;
  std::vector<ChartSeries> series;
};

/// Self-contained SVG line chart. Points with non-finite coordinates (or
/// non-positive ones on a log axis) break the polyline instead of being drawn.
std::string render_svg(const ChartSpec& spec);

}  // namespace klflow
