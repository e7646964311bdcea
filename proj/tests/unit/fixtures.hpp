#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "sigstyle/backbone/toy.hpp"
#include "sigstyle/image.hpp"

namespace sigstyle::testing {

// Vertical red stripes over a green vertical ramp.
inline Image stripes_image(int size, int period = 8) {
    Image img(3, size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            img.at(0, y, x) = (x / period) % 2 ? 0.9 : 0.1;
            img.at(1, y, x) = static_cast<double>(y % (2 * period)) / (2 * period);
            img.at(2, y, x) = 0.5;
        }
    }
    return img;
}

// Smooth radial blob, a stand-in for a photo.
inline Image blob_image(int size) {
    Image img(3, size, size);
    const double c = (size - 1) / 2.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double r = std::hypot(x - c, y - c) / size;
            img.at(0, y, x) = 0.8 - r;
            img.at(1, y, x) = 0.3 + 0.4 * static_cast<double>(x) / size;
            img.at(2, y, x) = 0.2 + r;
        }
    }
    return img;
}

inline Backbone small_toy(std::int64_t latent = 8, bool zero_output = false) {
    ToyConfig cfg;
    cfg.latent_size = latent;
    cfg.zero_output = zero_output;
    return make_toy_backbone(cfg);
}

// Unique scratch directory under the system temp dir, removed on destruction.
struct ScratchDir {
    std::filesystem::path path;
    explicit ScratchDir(const std::string& tag)
        : path(std::filesystem::temp_directory_path() / ("sigstyle_" + tag + "_" + std::to_string(::getpid()))) {
        std::filesystem::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

}  // namespace sigstyle::testing
