#pragma once

#include <string>
#include <vector>

#include "latentad/image.hpp"

namespace latentad {

// 8-bit grayscale PNG corpus files. Loading converts any PNG (RGB/RGBA/16-bit)
// to grayscale floats in [0,1].
Image load_png_gray(const std::string& path);
void save_png_gray8(const std::string& path, const Image& img);

// 16-bit grayscale PNG for residual maps; caller supplies the scale that maps
// float values onto the integer range and records it in a sidecar.
void save_png_gray16(const std::string& path, const std::vector<float>& values, int height,
                     int width, double scale);

void save_png_mask(const std::string& path, const Mask& mask);
Mask load_png_mask(const std::string& path);

// Write bytes via temp file + rename so partially written outputs never appear.
void atomic_write_file(const std::string& path, const std::string& bytes);

} // namespace latentad
