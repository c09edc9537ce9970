#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "latentad/errors.hpp"

namespace latentad {

// H x W grayscale image, row-major, intensities in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), pixels(static_cast<size_t>(h) * w, fill) {}

    float& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
    float at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }

    size_t size() const { return pixels.size(); }

    void clip01() {
        for (auto& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
    }

    bool finite() const {
        for (float v : pixels)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double mean() const {
        double s = 0.0;
        for (float v : pixels) s += v;
        return pixels.empty() ? 0.0 : s / static_cast<double>(pixels.size());
    }
};

// Binary mask with the same layout as Image.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> flags;

    Mask() = default;
    Mask(int h, int w, uint8_t fill = 0)
        : height(h), width(w), flags(static_cast<size_t>(h) * w, fill) {}

    uint8_t& at(int r, int c) { return flags[static_cast<size_t>(r) * width + c]; }
    uint8_t at(int r, int c) const { return flags[static_cast<size_t>(r) * width + c]; }

    size_t count() const {
        size_t n = 0;
        for (uint8_t f : flags) n += (f != 0);
        return n;
    }
    bool empty_mask() const { return count() == 0; }
};

// Bilinear sample with zero padding outside the image. Exact at integer
// coordinates, so an identity warp reproduces the input bit-for-bit.
inline float bilinear_sample(const Image& img, double r, double c) {
    const int r0 = static_cast<int>(std::floor(r));
    const int c0 = static_cast<int>(std::floor(c));
    const double fr = r - r0;
    const double fc = c - c0;
    auto px = [&](int rr, int cc) -> double {
        if (rr < 0 || rr >= img.height || cc < 0 || cc >= img.width) return 0.0;
        return img.at(rr, cc);
    };
    const double top = px(r0, c0) * (1.0 - fc) + px(r0, c0 + 1) * fc;
    const double bot = px(r0 + 1, c0) * (1.0 - fc) + px(r0 + 1, c0 + 1) * fc;
    return static_cast<float>(top * (1.0 - fr) + bot * fr);
}

inline double l2_distance(const Image& a, const Image& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double mean_squared_error(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw InputError("mean_squared_error: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

} // namespace latentad
