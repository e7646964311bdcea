#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sigstyle/tensor.hpp"

namespace sigstyle {

// Planar image with values in [0, 1]; pixels is [channels, height, width].
struct Image {
    Tensor pixels;

    Image() = default;
    Image(int channels, int height, int width, double fill = 0.0)
        : pixels(Shape{channels, height, width}, fill) {}
    explicit Image(Tensor chw);

    int channels() const { return pixels.empty() ? 0 : static_cast<int>(pixels.dim(0)); }
    int height() const { return pixels.empty() ? 0 : static_cast<int>(pixels.dim(1)); }
    int width() const { return pixels.empty() ? 0 : static_cast<int>(pixels.dim(2)); }
    double& at(int c, int y, int x) { return pixels[(static_cast<std::int64_t>(c) * height() + y) * width() + x]; }
    double at(int c, int y, int x) const {
        return pixels[(static_cast<std::int64_t>(c) * height() + y) * width() + x];
    }
};

// 8-bit PNG I/O. Reading always yields RGB (3 channels) unless `gray` is set,
// in which case colour input is converted to luma.
Image read_png(const std::filesystem::path& path, bool gray = false);
Image decode_png(std::span<const std::uint8_t> bytes, bool gray = false);
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

// Round-trips through the 8-bit representation written to disk.
Image quantize8(const Image& image);

Image resize_bilinear(const Image& image, int width, int height);
Image crop(const Image& image, int x, int y, int width, int height);
Image flip_horizontal(const Image& image);
Image to_gray(const Image& image);

double mse(const Image& a, const Image& b);
// Peak signal-to-noise ratio for unit-range images, in dB (infinity when equal).
double psnr(const Image& a, const Image& b);

// SHA-256 of the 8-bit RGB pixel buffer, lower-case hex.
std::string pixel_digest(const Image& image);

}  // namespace sigstyle
