#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mixview/common.hpp"

namespace mixview {

/// Planar C x H x W pixel grid, values in [0,1]. Stored as f32; all image
/// math runs in f64 and rounds once on store.
struct Image {
    int c = 0, h = 0, w = 0;
    std::vector<float> px;

    Image() = default;
    Image(int c_, int h_, int w_) : c(c_), h(h_), w(w_), px(static_cast<size_t>(c_) * h_ * w_, 0.f) {}

    float& at(int ch, int y, int x) { return px[(static_cast<size_t>(ch) * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return px[(static_cast<size_t>(ch) * h + y) * w + x]; }
    size_t size() const { return px.size(); }
};

inline float clamp01(double v) {
    return static_cast<float>(std::min(1.0, std::max(0.0, v)));
}

/// Bilinear sample at fractional position (y, x) in pixel coordinates.
inline double bilinear_at(const Image& img, int ch, double y, double x) {
    const int y0 = std::max(0, std::min(img.h - 1, static_cast<int>(std::floor(y))));
    const int x0 = std::max(0, std::min(img.w - 1, static_cast<int>(std::floor(x))));
    const int y1 = std::min(img.h - 1, y0 + 1);
    const int x1 = std::min(img.w - 1, x0 + 1);
    const double fy = std::min(1.0, std::max(0.0, y - y0));
    const double fx = std::min(1.0, std::max(0.0, x - x0));
    const double a = img.at(ch, y0, x0), b = img.at(ch, y0, x1);
    const double c = img.at(ch, y1, x0), d = img.at(ch, y1, x1);
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
}

/// Bilinear resize of a source sub-rectangle [top, top+height) x [left, left+width)
/// to out_h x out_w. The rectangle may be fractional.
inline Image resize_region(const Image& src, double top, double left, double height,
                           double width, int out_h, int out_w) {
    Image out(src.c, out_h, out_w);
    // precomputed sample coordinates per output column/row
    std::vector<int> x0(static_cast<size_t>(out_w)), x1(static_cast<size_t>(out_w));
    std::vector<double> fx(static_cast<size_t>(out_w));
    for (int x = 0; x < out_w; ++x) {
        const double sx = left + (x + 0.5) * width / out_w - 0.5;
        const int xi = std::max(0, std::min(src.w - 1, static_cast<int>(std::floor(sx))));
        x0[static_cast<size_t>(x)] = xi;
        x1[static_cast<size_t>(x)] = std::min(src.w - 1, xi + 1);
        fx[static_cast<size_t>(x)] = std::min(1.0, std::max(0.0, sx - xi));
    }
    for (int y = 0; y < out_h; ++y) {
        const double sy = top + (y + 0.5) * height / out_h - 0.5;
        const int y0 = std::max(0, std::min(src.h - 1, static_cast<int>(std::floor(sy))));
        const int y1 = std::min(src.h - 1, y0 + 1);
        const double fy = std::min(1.0, std::max(0.0, sy - y0));
        for (int ch = 0; ch < src.c; ++ch) {
            const float* r0 = src.px.data() + (static_cast<size_t>(ch) * src.h + y0) * src.w;
            const float* r1 = src.px.data() + (static_cast<size_t>(ch) * src.h + y1) * src.w;
            float* o = out.px.data() + (static_cast<size_t>(ch) * out_h + y) * out_w;
            for (int x = 0; x < out_w; ++x) {
                const double a = r0[x0[static_cast<size_t>(x)]], b = r0[x1[static_cast<size_t>(x)]];
                const double c = r1[x0[static_cast<size_t>(x)]], d = r1[x1[static_cast<size_t>(x)]];
                const double f = fx[static_cast<size_t>(x)];
                o[x] = clamp01((a * (1 - f) + b * f) * (1 - fy) + (c * (1 - f) + d * f) * fy);
            }
        }
    }
    return out;
}

inline Image resize(const Image& src, int out_h, int out_w) {
    return resize_region(src, 0.0, 0.0, src.h, src.w, out_h, out_w);
}

namespace img_detail {
template <typename Store>
Image separable_blur(const Image& src, double sigma, Store store) {
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += kernel[i + radius];
    }
    for (auto& kv : kernel) kv /= ksum;

    Image tmp(src.c, src.h, src.w), out(src.c, src.h, src.w);
    for (int ch = 0; ch < src.c; ++ch) {
        for (int y = 0; y < src.h; ++y)
            for (int x = 0; x < src.w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::min(src.w - 1, std::max(0, x + i));
                    s += kernel[i + radius] * src.at(ch, y, xx);
                }
                tmp.at(ch, y, x) = static_cast<float>(s);
            }
        for (int y = 0; y < src.h; ++y)
            for (int x = 0; x < src.w; ++x) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::min(src.h - 1, std::max(0, y + i));
                    s += kernel[i + radius] * tmp.at(ch, yy, x);
                }
                out.at(ch, y, x) = store(s);
            }
    }
    return out;
}
}  // namespace img_detail

/// Separable Gaussian blur, kernel radius ceil(2.5 sigma), output in [0,1].
inline Image gaussian_blur(const Image& src, double sigma) {
    return img_detail::separable_blur(src, sigma, [](double s) { return clamp01(s); });
}

/// Blur without the [0,1] clamp, for zero-mean fields.
inline Image gaussian_blur_unclamped(const Image& src, double sigma) {
    return img_detail::separable_blur(src, sigma,
                                      [](double s) { return static_cast<float>(s); });
}

inline double luminance(const Image& img, int y, int x) {
    if (img.c == 1) return img.at(0, y, x);
    return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
}

/// Sobel gradient magnitude of the luminance channel, same size as input.
inline std::vector<double> sobel_magnitude(const Image& img) {
    std::vector<double> mag(static_cast<size_t>(img.h) * img.w, 0.0);
    auto lum = [&](int y, int x) {
        y = std::min(img.h - 1, std::max(0, y));
        x = std::min(img.w - 1, std::max(0, x));
        return luminance(img, y, x);
    };
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double gx = lum(y - 1, x + 1) + 2 * lum(y, x + 1) + lum(y + 1, x + 1) -
                              lum(y - 1, x - 1) - 2 * lum(y, x - 1) - lum(y + 1, x - 1);
            const double gy = lum(y + 1, x - 1) + 2 * lum(y + 1, x) + lum(y + 1, x + 1) -
                              lum(y - 1, x - 1) - 2 * lum(y - 1, x) - lum(y - 1, x + 1);
            mag[static_cast<size_t>(y) * img.w + x] = std::sqrt(gx * gx + gy * gy);
        }
    return mag;
}

inline double mse(const Image& a, const Image& b) {
    if (a.size() != b.size()) throw DimensionError("mse: image size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.px[i]) - b.px[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// P6 (binary) PPM export, 8-bit. Expects a 3-channel image.
inline void write_ppm(const Image& img, const std::string& path) {
    if (img.c != 3) throw ParameterError("write_ppm: expected 3-channel image");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_ppm: cannot open " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                row[static_cast<size_t>(x) * 3 + ch] = static_cast<unsigned char>(
                    std::lround(255.0 * std::min(1.f, std::max(0.f, img.at(ch, y, x)))));
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size()));
    }
}

}  // namespace mixview
