#pragma once

#include <string>
#include <vector>

#include "cldl/nn.hpp"

namespace cldl {

// 8-bit grayscale PNG.
void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                    int height);

// Tiles [n, side*side] images in [-1,1] into a PNG grid.
void write_sample_grid(const std::string& path, const MatX<float>& images, int side,
                       int grid_cols);

struct PlotSeries {
    std::string label;
    std::vector<double> x, y;
};

// Minimal line plot (log-y optional) with legend and axis ticks.
void write_svg_plot(const std::string& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<PlotSeries>& series, bool log_y = false);

}  // namespace cldl
