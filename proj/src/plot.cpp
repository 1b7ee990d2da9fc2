#include "diffret/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace diffret {

namespace {

// 5x7 bitmap font, ASCII 32..126, column-major bits (bit 0 = top row).
const uint8_t kFont5x7[95][5] = {
    {0x00, 0x00, 0x00, 0x00, 0x00}, {0x00, 0x00, 0x5f, 0x00, 0x00}, {0x00, 0x07, 0x00, 0x07, 0x00},
    {0x14, 0x7f, 0x14, 0x7f, 0x14}, {0x24, 0x2a, 0x7f, 0x2a, 0x12}, {0x23, 0x13, 0x08, 0x64, 0x62},
    {0x36, 0x49, 0x55, 0x22, 0x50}, {0x00, 0x05, 0x03, 0x00, 0x00}, {0x00, 0x1c, 0x22, 0x41, 0x00},
    {0x00, 0x41, 0x22, 0x1c, 0x00}, {0x14, 0x08, 0x3e, 0x08, 0x14}, {0x08, 0x08, 0x3e, 0x08, 0x08},
    {0x00, 0x50, 0x30, 0x00, 0x00}, {0x08, 0x08, 0x08, 0x08, 0x08}, {0x00, 0x60, 0x60, 0x00, 0x00},
    {0x20, 0x10, 0x08, 0x04, 0x02}, {0x3e, 0x51, 0x49, 0x45, 0x3e}, {0x00, 0x42, 0x7f, 0x40, 0x00},
    {0x42, 0x61, 0x51, 0x49, 0x46}, {0x21, 0x41, 0x45, 0x4b, 0x31}, {0x18, 0x14, 0x12, 0x7f, 0x10},
    {0x27, 0x45, 0x45, 0x45, 0x39}, {0x3c, 0x4a, 0x49, 0x49, 0x30}, {0x01, 0x71, 0x09, 0x05, 0x03},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x06, 0x49, 0x49, 0x29, 0x1e}, {0x00, 0x36, 0x36, 0x00, 0x00},
    {0x00, 0x56, 0x36, 0x00, 0x00}, {0x08, 0x14, 0x22, 0x41, 0x00}, {0x14, 0x14, 0x14, 0x14, 0x14},
    {0x00, 0x41, 0x22, 0x14, 0x08}, {0x02, 0x01, 0x51, 0x09, 0x06}, {0x32, 0x49, 0x79, 0x41, 0x3e},
    {0x7e, 0x11, 0x11, 0x11, 0x7e}, {0x7f, 0x49, 0x49, 0x49, 0x36}, {0x3e, 0x41, 0x41, 0x41, 0x22},
    {0x7f, 0x41, 0x41, 0x22, 0x1c}, {0x7f, 0x49, 0x49, 0x49, 0x41}, {0x7f, 0x09, 0x09, 0x09, 0x01},
    {0x3e, 0x41, 0x49, 0x49, 0x7a}, {0x7f, 0x08, 0x08, 0x08, 0x7f}, {0x00, 0x41, 0x7f, 0x41, 0x00},
    {0x20, 0x40, 0x41, 0x3f, 0x01}, {0x7f, 0x08, 0x14, 0x22, 0x41}, {0x7f, 0x40, 0x40, 0x40, 0x40},
    {0x7f, 0x02, 0x0c, 0x02, 0x7f}, {0x7f, 0x04, 0x08, 0x10, 0x7f}, {0x3e, 0x41, 0x41, 0x41, 0x3e},
    {0x7f, 0x09, 0x09, 0x09, 0x06}, {0x3e, 0x41, 0x51, 0x21, 0x5e}, {0x7f, 0x09, 0x19, 0x29, 0x46},
    {0x46, 0x49, 0x49, 0x49, 0x31}, {0x01, 0x01, 0x7f, 0x01, 0x01}, {0x3f, 0x40, 0x40, 0x40, 0x3f},
    {0x1f, 0x20, 0x40, 0x20, 0x1f}, {0x3f, 0x40, 0x38, 0x40, 0x3f}, {0x63, 0x14, 0x08, 0x14, 0x63},
    {0x07, 0x08, 0x70, 0x08, 0x07}, {0x61, 0x51, 0x49, 0x45, 0x43}, {0x00, 0x7f, 0x41, 0x41, 0x00},
    {0x02, 0x04, 0x08, 0x10, 0x20}, {0x00, 0x41, 0x41, 0x7f, 0x00}, {0x04, 0x02, 0x01, 0x02, 0x04},
    {0x40, 0x40, 0x40, 0x40, 0x40}, {0x00, 0x01, 0x02, 0x04, 0x00}, {0x20, 0x54, 0x54, 0x54, 0x78},
    {0x7f, 0x48, 0x44, 0x44, 0x38}, {0x38, 0x44, 0x44, 0x44, 0x20}, {0x38, 0x44, 0x44, 0x48, 0x7f},
    {0x38, 0x54, 0x54, 0x54, 0x18}, {0x08, 0x7e, 0x09, 0x01, 0x02}, {0x0c, 0x52, 0x52, 0x52, 0x3e},
    {0x7f, 0x08, 0x04, 0x04, 0x78}, {0x00, 0x44, 0x7d, 0x40, 0x00}, {0x20, 0x40, 0x44, 0x3d, 0x00},
    {0x7f, 0x10, 0x28, 0x44, 0x00}, {0x00, 0x41, 0x7f, 0x40, 0x00}, {0x7c, 0x04, 0x18, 0x04, 0x78},
    {0x7c, 0x08, 0x04, 0x04, 0x78}, {0x38, 0x44, 0x44, 0x44, 0x38}, {0x7c, 0x14, 0x14, 0x14, 0x08},
    {0x08, 0x14, 0x14, 0x18, 0x7c}, {0x7c, 0x08, 0x04, 0x04, 0x08}, {0x48, 0x54, 0x54, 0x54, 0x20},
    {0x04, 0x3f, 0x44, 0x40, 0x20}, {0x3c, 0x40, 0x40, 0x20, 0x7c}, {0x1c, 0x20, 0x40, 0x20, 0x1c},
    {0x3c, 0x40, 0x30, 0x40, 0x3c}, {0x44, 0x28, 0x10, 0x28, 0x44}, {0x0c, 0x50, 0x50, 0x50, 0x3c},
    {0x44, 0x64, 0x54, 0x4c, 0x44}, {0x00, 0x08, 0x36, 0x41, 0x00}, {0x00, 0x00, 0x7f, 0x00, 0x00},
    {0x00, 0x41, 0x36, 0x08, 0x00}, {0x08, 0x08, 0x2a, 0x1c, 0x08}};

void put_px(ImageU8& img, int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    uint8_t* p = img.px(y, x);
    p[0] = r;
    p[1] = g;
    p[2] = b;
}

void draw_line(ImageU8& img, int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
        put_px(img, x0, y0, r, g, b);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

std::string format_tick(double v) {
    char buf[32];
    double a = std::fabs(v);
    if (v == 0.0)
        std::snprintf(buf, sizeof(buf), "0");
    else if (a >= 1000.0 || a < 0.001)
        std::snprintf(buf, sizeof(buf), "%.1e", v);
    else if (a >= 10.0)
        std::snprintf(buf, sizeof(buf), "%.1f", v);
    else
        std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

const uint8_t kPalette[6][3] = {{31, 119, 180}, {214, 39, 40},  {44, 160, 44},
                                {255, 127, 14}, {148, 103, 189}, {23, 190, 207}};

}  // namespace

void draw_text(ImageU8& img, int x, int y, const std::string& text, uint8_t r, uint8_t g,
               uint8_t b, int scale) {
    int cx = x;
    for (char ch : text) {
        if (ch < 32 || ch > 126) ch = '?';
        const uint8_t* glyph = kFont5x7[ch - 32];
        for (int col = 0; col < 5; ++col)
            for (int row = 0; row < 7; ++row)
                if (glyph[col] & (1u << row))
                    for (int sy = 0; sy < scale; ++sy)
                        for (int sx = 0; sx < scale; ++sx)
                            put_px(img, cx + col * scale + sx, y + row * scale + sy, r, g, b);
        cx += 6 * scale;
    }
}

ImageU8 render_line_plot(const std::string& title, const std::string& xlabel,
                         const std::string& ylabel, const std::vector<PlotSeries>& series,
                         int width, int height) {
    ImageU8 img(height, width);
    std::fill(img.rgb.begin(), img.rgb.end(), 255);

    const int ml = 80, mr = 30, mt = 40, mb = 60;
    const int x0 = ml, x1 = width - mr, y0 = mt, y1 = height - mb;

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!std::isfinite(xmin)) {
        xmin = 0;
        xmax = 1;
        ymin = 0;
        ymax = 1;
    }
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }

    auto px = [&](double vx) {
        return x0 + static_cast<int>(std::lround((vx - xmin) / (xmax - xmin) * (x1 - x0)));
    };
    auto py = [&](double vy) {
        return y1 - static_cast<int>(std::lround((vy - ymin) / (ymax - ymin) * (y1 - y0)));
    };

    // frame + ticks
    draw_line(img, x0, y0, x0, y1, 0, 0, 0);
    draw_line(img, x0, y1, x1, y1, 0, 0, 0);
    const int nticks = 5;
    for (int i = 0; i <= nticks; ++i) {
        double tx = xmin + (xmax - xmin) * i / nticks;
        double ty = ymin + (ymax - ymin) * i / nticks;
        int gx = px(tx), gy = py(ty);
        draw_line(img, gx, y1, gx, y1 + 4, 0, 0, 0);
        draw_line(img, x0 - 4, gy, x0, gy, 0, 0, 0);
        std::string xs = format_tick(tx), ys = format_tick(ty);
        draw_text(img, gx - static_cast<int>(xs.size()) * 3, y1 + 8, xs, 0, 0, 0);
        draw_text(img, x0 - 8 - static_cast<int>(ys.size()) * 6, gy - 3, ys, 0, 0, 0);
    }

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const uint8_t* col = kPalette[si % 6];
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), col[0], col[1],
                      col[2]);
        for (size_t i = 0; i < s.x.size(); ++i) {
            int cx = px(s.x[i]), cy = py(s.y[i]);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) put_px(img, cx + dx, cy + dy, col[0], col[1], col[2]);
        }
        // legend entry
        int ly = y0 + 4 + static_cast<int>(si) * 12;
        draw_line(img, x1 - 110, ly + 3, x1 - 90, ly + 3, col[0], col[1], col[2]);
        draw_text(img, x1 - 85, ly, s.name, 0, 0, 0);
    }

    draw_text(img, (x0 + x1) / 2 - static_cast<int>(title.size()) * 6, 12, title, 0, 0, 0, 2);
    draw_text(img, (x0 + x1) / 2 - static_cast<int>(xlabel.size()) * 3, height - 24, xlabel, 0, 0, 0);
    // y label drawn horizontally in the top-left margin
    draw_text(img, 6, y0 - 16, ylabel, 0, 0, 0);
    return img;
}

void write_line_plot(const std::string& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<PlotSeries>& series) {
    write_png(path, render_line_plot(title, xlabel, ylabel, series));
}

}  // namespace diffret
