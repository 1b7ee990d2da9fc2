#include "diffret/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "diffret/errors.hpp"

namespace diffret {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("undecodable PNG: " + path);
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    ImageU8 img(static_cast<int>(h), static_cast<int>(w));
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.rgb.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const ImageU8& img) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot write image: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("PNG write failed: " + path);
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_const_bytep> rows(static_cast<size_t>(img.h));
    for (int y = 0; y < img.h; ++y) rows[static_cast<size_t>(y)] = img.px(y, 0);
    png_write_rows(png, const_cast<png_bytepp>(rows.data()), static_cast<png_uint_32>(img.h));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageF to_float(const ImageU8& img) {
    ImageF out(img.h, img.w);
    for (size_t i = 0; i < img.rgb.size(); ++i) out.v[i] = img.rgb[i] / 255.0;
    return out;
}

ImageU8 to_u8(const ImageF& img) {
    ImageU8 out(img.h, img.w);
    for (size_t i = 0; i < img.v.size(); ++i) {
        double x = std::clamp(img.v[i], 0.0, 1.0);
        out.rgb[i] = static_cast<uint8_t>(std::lround(x * 255.0));
    }
    return out;
}

ImageF resize_bilinear(const ImageF& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw ShapeError("resize: non-positive target size");
    if (out_h == img.h && out_w == img.w) return img;  // exact identity at same size
    ImageF out(out_h, out_w);
    double sy = static_cast<double>(img.h) / out_h;
    double sx = static_cast<double>(img.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y0c = std::clamp(y0, 0, img.h - 1);
        int y1c = std::clamp(y0 + 1, 0, img.h - 1);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x0c = std::clamp(x0, 0, img.w - 1);
            int x1c = std::clamp(x0 + 1, 0, img.w - 1);
            const double* p00 = img.px(y0c, x0c);
            const double* p01 = img.px(y0c, x1c);
            const double* p10 = img.px(y1c, x0c);
            const double* p11 = img.px(y1c, x1c);
            double* o = out.px(y, x);
            for (int c = 0; c < 3; ++c)
                o[c] = (1 - wy) * ((1 - wx) * p00[c] + wx * p01[c]) +
                       wy * ((1 - wx) * p10[c] + wx * p11[c]);
        }
    }
    return out;
}

}  // namespace diffret
