#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diffret {

// 8-bit RGB image, row-major, channel-interleaved.
struct ImageU8 {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> rgb;  // h*w*3

    ImageU8() = default;
    ImageU8(int hh, int ww) : h(hh), w(ww), rgb(static_cast<size_t>(hh) * ww * 3, 0) {}
    uint8_t* px(int y, int x) { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const uint8_t* px(int y, int x) const { return rgb.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

// Floating-point RGB image; value range is contextual ([0,1] raw, [-1,1] preprocessed).
struct ImageF {
    int h = 0;
    int w = 0;
    std::vector<double> v;  // h*w*3

    ImageF() = default;
    ImageF(int hh, int ww, double fill = 0.0)
        : h(hh), w(ww), v(static_cast<size_t>(hh) * ww * 3, fill) {}
    double* px(int y, int x) { return v.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const double* px(int y, int x) const { return v.data() + (static_cast<size_t>(y) * w + x) * 3; }
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

ImageF to_float(const ImageU8& img);        // u8 -> [0,1]
ImageU8 to_u8(const ImageF& img);           // clamps [0,1] -> u8
ImageF resize_bilinear(const ImageF& img, int out_h, int out_w);

}  // namespace diffret
