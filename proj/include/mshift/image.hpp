#ifndef MSHIFT_IMAGE_HPP
#define MSHIFT_IMAGE_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace mshift {

/// 8-bit RGB patch, row-major, interleaved channels.
struct RgbPatch {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // 3 * width * height

    RgbPatch() = default;
    RgbPatch(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(3) * w * h, 255) {}

    std::uint8_t at(int row, int col, int ch) const {
        return pixels[3 * (static_cast<std::size_t>(row) * width + col) + ch];
    }
    std::uint8_t& at(int row, int col, int ch) {
        return pixels[3 * (static_cast<std::size_t>(row) * width + col) + ch];
    }
    bool square() const { return width == height && width > 0; }
    long n_pixels() const { return static_cast<long>(width) * height; }
};

// PNG round trip. read_png converts gray/palette/alpha inputs to 8-bit RGB;
// write_png emits deterministic bytes for identical pixel content.
RgbPatch read_png(const std::string& path);
void write_png(const std::string& path, const RgbPatch& img);

}  // namespace mshift

#endif
