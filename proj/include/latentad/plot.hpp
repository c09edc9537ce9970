#pragma once

#include <string>
#include <vector>

namespace latentad {

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    float gray = 0.0f; // line intensity in [0,1]
};

// Minimal grayscale line plot (axes, ticks, series) written as 8-bit PNG.
void write_line_plot(const std::string& path, const std::vector<PlotSeries>& series,
                     const std::string& x_label, const std::string& y_label, int width = 640,
                     int height = 480);

} // namespace latentad
