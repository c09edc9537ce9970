#include "latentad/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "latentad/errors.hpp"

namespace latentad {

namespace {

struct PngReader {
    FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;

    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (file) std::fclose(file);
    }
};

struct PngWriter {
    FILE* file = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::string tmp_path;
    std::string final_path;

    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (file) std::fclose(file);
    }
};

void open_writer(PngWriter& w, const std::string& path) {
    w.final_path = path;
    w.tmp_path = path + ".tmp";
    w.file = std::fopen(w.tmp_path.c_str(), "wb");
    if (!w.file) throw InputError("cannot open for writing: " + w.tmp_path);
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    w.info = png_create_info_struct(w.png);
    if (!w.png || !w.info) throw NumericError("libpng writer init failed");
}

void finish_writer(PngWriter& w) {
    png_write_end(w.png, w.info);
    std::fclose(w.file);
    w.file = nullptr;
    std::filesystem::rename(w.tmp_path, w.final_path);
}

} // namespace

Image load_png_gray(const std::string& path) {
    PngReader r;
    r.file = std::fopen(path.c_str(), "rb");
    if (!r.file) throw InputError("cannot open PNG: " + path);

    unsigned char sig[8];
    if (std::fread(sig, 1, 8, r.file) != 8 || png_sig_cmp(sig, 0, 8))
        throw InputError("not a PNG file: " + path);

    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    r.info = png_create_info_struct(r.png);
    if (!r.png || !r.info) throw NumericError("libpng reader init failed");
    if (setjmp(png_jmpbuf(r.png))) throw InputError("corrupt PNG: " + path);

    png_init_io(r.png, r.file);
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);

    const png_uint_32 width = png_get_image_width(r.png, r.info);
    const png_uint_32 height = png_get_image_height(r.png, r.info);
    const int color = png_get_color_type(r.png, r.info);
    const int depth = png_get_bit_depth(r.png, r.info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
    if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(r.png, 1, -1.0, -1.0);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
    png_read_update_info(r.png, r.info);

    const int out_depth = png_get_bit_depth(r.png, r.info);
    const size_t rowbytes = png_get_rowbytes(r.png, r.info);
    std::vector<unsigned char> raw(rowbytes * height);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(r.png, rows.data());

    Image img(static_cast<int>(height), static_cast<int>(width));
    if (out_depth == 16) {
        for (png_uint_32 y = 0; y < height; ++y) {
            const unsigned char* row = rows[y];
            for (png_uint_32 x = 0; x < width; ++x) {
                const unsigned v = (static_cast<unsigned>(row[2 * x]) << 8) | row[2 * x + 1];
                img.at(static_cast<int>(y), static_cast<int>(x)) =
                    static_cast<float>(v) / 65535.0f;
            }
        }
    } else {
        for (png_uint_32 y = 0; y < height; ++y) {
            const unsigned char* row = rows[y];
            for (png_uint_32 x = 0; x < width; ++x)
                img.at(static_cast<int>(y), static_cast<int>(x)) =
                    static_cast<float>(row[x]) / 255.0f;
        }
    }
    return img;
}

void save_png_gray8(const std::string& path, const Image& img) {
    PngWriter w;
    open_writer(w, path);
    if (setjmp(png_jmpbuf(w.png))) throw NumericError("PNG write failed: " + path);

    png_init_io(w.png, w.file);
    png_set_IHDR(w.png, w.info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);

    std::vector<unsigned char> row(static_cast<size_t>(img.width));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const float v = std::clamp(img.at(y, x), 0.0f, 1.0f);
            row[static_cast<size_t>(x)] =
                static_cast<unsigned char>(std::lround(v * 255.0));
        }
        png_write_row(w.png, row.data());
    }
    finish_writer(w);
}

void save_png_gray16(const std::string& path, const std::vector<float>& values, int height,
                     int width, double scale) {
    if (values.size() != static_cast<size_t>(height) * width)
        throw InputError("save_png_gray16: value count does not match dims");
    PngWriter w;
    open_writer(w, path);
    if (setjmp(png_jmpbuf(w.png))) throw NumericError("PNG write failed: " + path);

    png_init_io(w.png, w.file);
    png_set_IHDR(w.png, w.info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);

    std::vector<unsigned char> row(static_cast<size_t>(width) * 2);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double v = static_cast<double>(values[static_cast<size_t>(y) * width + x]) * scale;
            v = std::clamp(v, 0.0, 65535.0);
            const auto q = static_cast<unsigned>(std::lround(v));
            row[2 * static_cast<size_t>(x)] = static_cast<unsigned char>(q >> 8);
            row[2 * static_cast<size_t>(x) + 1] = static_cast<unsigned char>(q & 0xff);
        }
        png_write_row(w.png, row.data());
    }
    finish_writer(w);
}

void save_png_mask(const std::string& path, const Mask& mask) {
    Image img(mask.height, mask.width);
    for (size_t i = 0; i < mask.flags.size(); ++i) img.pixels[i] = mask.flags[i] ? 1.0f : 0.0f;
    save_png_gray8(path, img);
}

Mask load_png_mask(const std::string& path) {
    const Image img = load_png_gray(path);
    Mask mask(img.height, img.width);
    for (size_t i = 0; i < img.pixels.size(); ++i) mask.flags[i] = img.pixels[i] > 0.5f ? 1 : 0;
    return mask;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        FILE* f = std::fopen(tmp.c_str(), "wb");
        if (!f) throw InputError("cannot open for writing: " + tmp);
        if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
            std::fclose(f);
            throw InputError("short write: " + tmp);
        }
        std::fclose(f);
    }
    std::filesystem::rename(tmp, path);
}

} // namespace latentad
