#include "canon/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace canon {

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<double>& x, const std::vector<SvgSeries>& series,
                      const std::string& x_label, const std::string& y_label) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    const double width = 640, height = 400;
    const double ml = 60, mr = 130, mt = 40, mb = 50;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!x.empty()) {
        xmin = *std::min_element(x.begin(), x.end());
        xmax = *std::max_element(x.begin(), x.end());
    }
    bool first = true;
    for (const auto& s : series)
        for (double v : s.y) {
            if (!std::isfinite(v)) continue;
            if (first) {
                ymin = ymax = v;
                first = false;
            } else {
                ymin = std::min(ymin, v);
                ymax = std::max(ymax, v);
            }
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    auto px = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double v) { return mt + ph - (v - ymin) / (ymax - ymin) * ph; };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b"};

    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
       << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << width / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
       << "</text>\n";
    // axes
    os << "<line x1='" << ml << "' y1='" << mt + ph << "' x2='" << ml + pw << "' y2='" << mt + ph
       << "' stroke='black'/>\n";
    os << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << mt + ph
       << "' stroke='black'/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = xmin + (xmax - xmin) * t / 4.0;
        const double yv = ymin + (ymax - ymin) * t / 4.0;
        os << "<text x='" << px(xv) << "' y='" << mt + ph + 18
           << "' text-anchor='middle' font-size='11'>" << xv << "</text>\n";
        os << "<text x='" << ml - 8 << "' y='" << py(yv) + 4
           << "' text-anchor='end' font-size='11'>" << yv << "</text>\n";
    }
    if (!x_label.empty())
        os << "<text x='" << ml + pw / 2 << "' y='" << height - 10
           << "' text-anchor='middle' font-size='12'>" << x_label << "</text>\n";
    if (!y_label.empty())
        os << "<text x='16' y='" << mt + ph / 2 << "' font-size='12' transform='rotate(-90 16 "
           << mt + ph / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = colors[si % 6];
        os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        const std::size_t n = std::min(x.size(), s.y.size());
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(s.y[i])) continue;
            os << px(x[i]) << "," << py(s.y[i]) << " ";
        }
        os << "'/>\n";
        os << "<text x='" << ml + pw + 10 << "' y='" << mt + 16 + 16 * static_cast<double>(si)
           << "' font-size='11' fill='" << color << "'>" << s.name << "</text>\n";
    }
    os << "</svg>\n";
}

}  // namespace canon
