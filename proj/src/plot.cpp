#include "latentad/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "latentad/errors.hpp"
#include "latentad/image.hpp"
#include "latentad/png_io.hpp"

namespace latentad {

namespace {

// 5x7 bitmap digits/letters for axis labels; enough for numbers and short
// words.
constexpr int kGlyphW = 5, kGlyphH = 7;

const char* glyph(char c) {
    switch (c) {
        case '0': return "01110100011001110101110011000101110";
        case '1': return "00100011000010000100001000010001110";
        case '2': return "01110100010000100110010001000011111";
        case '3': return "11110000100010000010000011000101110";
        case '4': return "00010001100101010010111110001000010";
        case '5': return "11111100001111000001000011000101110";
        case '6': return "00110010001000011110100011000101110";
        case '7': return "11111000010001000100010001000010000";
        case '8': return "01110100011000101110100011000101110";
        case '9': return "01110100011000101111000010001001100";
        case '.': return "0000000000000000000000000011000110";
        case '-': return "00000000000000011111000000000000000";
        default: return nullptr;
    }
}

void draw_text(Image& img, int r0, int c0, const std::string& text, float v) {
    int c = c0;
    for (char ch : text) {
        const char* g = glyph(ch);
        if (g) {
            for (int rr = 0; rr < kGlyphH; ++rr)
                for (int cc = 0; cc < kGlyphW; ++cc)
                    if (g[rr * kGlyphW + cc] == '1') {
                        const int r = r0 + rr, col = c + cc;
                        if (r >= 0 && r < img.height && col >= 0 && col < img.width)
                            img.at(r, col) = v;
                    }
        }
        c += kGlyphW + 1;
    }
}

void draw_line(Image& img, double r0, double c0, double r1, double c1, float v) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(r1 - r0), std::abs(c1 - c0)))) + 1;
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        const int r = static_cast<int>(std::lround(r0 + (r1 - r0) * t));
        const int c = static_cast<int>(std::lround(c0 + (c1 - c0) * t));
        if (r >= 0 && r < img.height && c >= 0 && c < img.width) img.at(r, c) = v;
    }
}

std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

} // namespace

void write_line_plot(const std::string& path, const std::vector<PlotSeries>& series,
                     const std::string& /*x_label*/, const std::string& /*y_label*/, int width,
                     int height) {
    if (series.empty()) throw InputError("write_line_plot: no series");
    Image img(height, width, 1.0f);

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (double x : s.x) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
        }
        for (double y : s.y) {
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    if (!(ymax > ymin)) ymax = ymin + 1.0;
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    const int left = 56, right = 16, top = 16, bottom = 36;
    const int plot_w = width - left - right;
    const int plot_h = height - top - bottom;
    auto to_col = [&](double x) { return left + (x - xmin) / (xmax - xmin) * plot_w; };
    auto to_row = [&](double y) { return top + (ymax - y) / (ymax - ymin) * plot_h; };

    draw_line(img, top, left, top + plot_h, left, 0.0f);
    draw_line(img, top + plot_h, left, top + plot_h, left + plot_w, 0.0f);

    for (int i = 0; i <= 5; ++i) {
        const double x = xmin + (xmax - xmin) * i / 5.0;
        const double y = ymin + (ymax - ymin) * i / 5.0;
        const double col = to_col(x);
        const double row = to_row(y);
        draw_line(img, top + plot_h, col, top + plot_h + 4, col, 0.0f);
        draw_line(img, row, left - 4, row, left, 0.0f);
        draw_text(img, top + plot_h + 8, static_cast<int>(col) - 12, format_tick(x), 0.0f);
        draw_text(img, static_cast<int>(row) - 3, 4, format_tick(y), 0.0f);
    }

    for (const auto& s : series) {
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            draw_line(img, to_row(s.y[i]), to_col(s.x[i]), to_row(s.y[i + 1]), to_col(s.x[i + 1]),
                      s.gray);
        for (size_t i = 0; i < s.x.size(); ++i) {
            const int r = static_cast<int>(std::lround(to_row(s.y[i])));
            const int c = static_cast<int>(std::lround(to_col(s.x[i])));
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc)
                    if (r + dr >= 0 && r + dr < img.height && c + dc >= 0 && c + dc < img.width)
                        img.at(r + dr, c + dc) = s.gray;
        }
    }

    save_png_gray8(path, img);
}

} // namespace latentad
