#pragma once

#include <string>
#include <vector>

#include "diffret/image.hpp"

namespace diffret {

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Minimal labeled line plot rendered to an RGB image (axes, ticks, legend).
ImageU8 render_line_plot(const std::string& title, const std::string& xlabel,
                         const std::string& ylabel, const std::vector<PlotSeries>& series,
                         int width = 900, int height = 600);

void write_line_plot(const std::string& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<PlotSeries>& series);

// Text rasterization helper shared with other image annotation needs.
void draw_text(ImageU8& img, int x, int y, const std::string& text, uint8_t r, uint8_t g,
               uint8_t b, int scale = 1);

}  // namespace diffret
