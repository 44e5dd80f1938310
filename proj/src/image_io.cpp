#include "entmap/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace entmap {

namespace {

std::vector<uint8_t> normalize_to_bytes(const std::vector<double>& map) {
    double mn = map[0], mx = map[0];
    for (double v : map) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    std::vector<uint8_t> out(map.size(), 0);
    if (mx > mn) {
        double scale = 255.0 / (mx - mn);
        for (size_t i = 0; i < map.size(); i++)
            out[i] = (uint8_t)std::lround((map[i] - mn) * scale);
    }
    return out;
}

uint8_t to_byte_signed(double v) {
    double x = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    return (uint8_t)std::lround(x);
}

std::ofstream open_binary(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("image_io: cannot open for write: " + path);
    return f;
}

}  // namespace

void write_pgm(const std::string& path, const std::vector<double>& map, int width, int height) {
    if ((int)map.size() != width * height) throw std::invalid_argument("write_pgm: size mismatch");
    auto bytes = normalize_to_bytes(map);
    auto f = open_binary(path);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!f) throw std::runtime_error("image_io: write failed: " + path);
}

void write_ppm(const std::string& path, const std::vector<double>& image, int width, int height) {
    if ((int)image.size() != width * height * 3)
        throw std::invalid_argument("write_ppm: size mismatch");
    auto f = open_binary(path);
    f << "P6\n" << width << " " << height << "\n255\n";
    std::vector<uint8_t> bytes(image.size());
    for (size_t i = 0; i < image.size(); i++) bytes[i] = to_byte_signed(image[i]);
    f.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!f) throw std::runtime_error("image_io: write failed: " + path);
}

void write_ppm_overlay(const std::string& path, const std::vector<double>& map,
                       const std::vector<double>& image, int width, int height) {
    if ((int)map.size() != width * height || (int)image.size() != width * height * 3)
        throw std::invalid_argument("write_ppm_overlay: size mismatch");
    auto heat = normalize_to_bytes(map);
    auto f = open_binary(path);
    f << "P6\n" << width << " " << height << "\n255\n";
    std::vector<uint8_t> bytes(image.size());
    for (int p = 0; p < width * height; p++) {
        double r = 0.5 * (to_byte_signed(image[p * 3 + 0])) + 0.5 * heat[p];
        double g = 0.5 * (to_byte_signed(image[p * 3 + 1]));
        double b = 0.5 * (to_byte_signed(image[p * 3 + 2]));
        bytes[p * 3 + 0] = (uint8_t)std::lround(r);
        bytes[p * 3 + 1] = (uint8_t)std::lround(g);
        bytes[p * 3 + 2] = (uint8_t)std::lround(b);
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
    if (!f) throw std::runtime_error("image_io: write failed: " + path);
}

}  // namespace entmap
