#pragma once

#include <string>
#include <vector>

namespace entmap {

// 8-bit binary PGM (P5); values are min-max normalized per map before
// quantization. A constant map writes all zeros.
void write_pgm(const std::string& path, const std::vector<double>& map, int width, int height);

// 8-bit binary PPM (P6) of an image with channel values in [-1, 1].
void write_ppm(const std::string& path, const std::vector<double>& image, int width, int height);

// Heatmap blended onto the image at fixed 0.5 alpha; the normalized heat goes
// into the red channel.
void write_ppm_overlay(const std::string& path, const std::vector<double>& map,
                       const std::vector<double>& image, int width, int height);

}  // namespace entmap
