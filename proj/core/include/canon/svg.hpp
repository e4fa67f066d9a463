#pragma once

#include <string>
#include <vector>

namespace canon {

struct SvgSeries {
    std::string name;
    std::vector<double> y;
};

/// Minimal line chart: axes, tick labels, one polyline per series with a
/// small legend. No styling knobs; only what the metric plots need.
void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<double>& x, const std::vector<SvgSeries>& series,
                      const std::string& x_label = "", const std::string& y_label = "");

}  // namespace canon
