#pragma once

#include <string>
#include <utility>
#include <vector>

namespace incseg {

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Static SVG line chart with axes, ticks and a legend. The y range is fixed by the caller.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series, double y_min, double y_max);

}  // namespace incseg
