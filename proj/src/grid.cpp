#include <algorithm>
#include <array>
#include <cstdint>

#include "sigstyle/cli.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/log.hpp"

namespace sigstyle {

namespace {

// Printable ASCII 0x20..0x7e, five columns per glyph, bit 0 = top row.
constexpr std::array<std::array<std::uint8_t, 5>, 95> kFont{{
    {0x00, 0x00, 0x00, 0x00, 0x00}, {0x00, 0x00, 0x5f, 0x00, 0x00}, {0x00, 0x07, 0x00, 0x07, 0x00},
    {0x14, 0x7f, 0x14, 0x7f, 0x14}, {0x24, 0x2a, 0x7f, 0x2a, 0x12}, {0x23, 0x13, 0x08, 0x64, 0x62},
    {0x36, 0x49, 0x55, 0x22, 0x50}, {0x00, 0x05, 0x03, 0x00, 0x00}, {0x00, 0x1c, 0x22, 0x41, 0x00},
    {0x00, 0x41, 0x22, 0x1c, 0x00}, {0x08, 0x2a, 0x1c, 0x2a, 0x08}, {0x08, 0x08, 0x3e, 0x08, 0x08},
    {0x00, 0x50, 0x30, 0x00, 0x00}, {0x08, 0x08, 0x08, 0x08, 0x08}, {0x00, 0x60, 0x60, 0x00, 0x00},
    {0x20, 0x10, 0x08, 0x04, 0x02}, {0x3e, 0x51, 0x49, 0x45, 0x3e}, {0x00, 0x42, 0x7f, 0x40, 0x00},
    {0x42, 0x61, 0x51, 0x49, 0x46}, {0x21, 0x41, 0x45, 0x4b, 0x31}, {0x18, 0x14, 0x12, 0x7f, 0x10},
    {0x27, 0x45, 0x45, 0x45, 0x39}, {0x3c, 0x4a, 0x49, 0x49, 0x30}, {0x01, 0x71, 0x09, 0x05, 0x03},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x06, 0x49, 0x49, 0x29, 0x1e}, {0x00, 0x36, 0x36, 0x00, 0x00},
    {0x00, 0x56, 0x36, 0x00, 0x00}, {0x00, 0x08, 0x14, 0x22, 0x41}, {0x14, 0x14, 0x14, 0x14, 0x14},
    {0x41, 0x22, 0x14, 0x08, 0x00}, {0x02, 0x01, 0x51, 0x09, 0x06}, {0x32, 0x49, 0x79, 0x41, 0x3e},
    {0x7e, 0x11, 0x11, 0x11, 0x7e}, {0x7f, 0x49, 0x49, 0x49, 0x36}, {0x3e, 0x41, 0x41, 0x41, 0x22},
    {0x7f, 0x41, 0x41, 0x22, 0x1c}, {0x7f, 0x49, 0x49, 0x49, 0x41}, {0x7f, 0x09, 0x09, 0x01, 0x01},
    {0x3e, 0x41, 0x41, 0x51, 0x32}, {0x7f, 0x08, 0x08, 0x08, 0x7f}, {0x00, 0x41, 0x7f, 0x41, 0x00},
    {0x20, 0x40, 0x41, 0x3f, 0x01}, {0x7f, 0x08, 0x14, 0x22, 0x41}, {0x7f, 0x40, 0x40, 0x40, 0x40},
    {0x7f, 0x02, 0x04, 0x02, 0x7f}, {0x7f, 0x04, 0x08, 0x10, 0x7f}, {0x3e, 0x41, 0x41, 0x41, 0x3e},
    {0x7f, 0x09, 0x09, 0x09, 0x06}, {0x3e, 0x41, 0x51, 0x21, 0x5e}, {0x7f, 0x09, 0x19, 0x29, 0x46},
    {0x46, 0x49, 0x49, 0x49, 0x31}, {0x01, 0x01, 0x7f, 0x01, 0x01}, {0x3f, 0x40, 0x40, 0x40, 0x3f},
    {0x1f, 0x20, 0x40, 0x20, 0x1f}, {0x7f, 0x20, 0x18, 0x20, 0x7f}, {0x63, 0x14, 0x08, 0x14, 0x63},
    {0x03, 0x04, 0x78, 0x04, 0x03}, {0x61, 0x51, 0x49, 0x45, 0x43}, {0x00, 0x00, 0x7f, 0x41, 0x41},
    {0x02, 0x04, 0x08, 0x10, 0x20}, {0x41, 0x41, 0x7f, 0x00, 0x00}, {0x04, 0x02, 0x01, 0x02, 0x04},
    {0x40, 0x40, 0x40, 0x40, 0x40}, {0x00, 0x01, 0x02, 0x04, 0x00}, {0x20, 0x54, 0x54, 0x54, 0x78},
    {0x7f, 0x48, 0x44, 0x44, 0x38}, {0x38, 0x44, 0x44, 0x44, 0x20}, {0x38, 0x44, 0x44, 0x48, 0x7f},
    {0x38, 0x54, 0x54, 0x54, 0x18}, {0x08, 0x7e, 0x09, 0x01, 0x02}, {0x08, 0x14, 0x54, 0x54, 0x3c},
    {0x7f, 0x08, 0x04, 0x04, 0x78}, {0x00, 0x44, 0x7d, 0x40, 0x00}, {0x20, 0x40, 0x44, 0x3d, 0x00},
    {0x00, 0x7f, 0x10, 0x28, 0x44}, {0x00, 0x41, 0x7f, 0x40, 0x00}, {0x7c, 0x04, 0x18, 0x04, 0x78},
    {0x7c, 0x08, 0x04, 0x04, 0x78}, {0x38, 0x44, 0x44, 0x44, 0x38}, {0x7c, 0x14, 0x14, 0x14, 0x08},
    {0x08, 0x14, 0x14, 0x18, 0x7c}, {0x7c, 0x08, 0x04, 0x04, 0x08}, {0x48, 0x54, 0x54, 0x54, 0x20},
    {0x04, 0x3f, 0x44, 0x40, 0x20}, {0x3c, 0x40, 0x40, 0x20, 0x7c}, {0x1c, 0x20, 0x40, 0x20, 0x1c},
    {0x3c, 0x40, 0x30, 0x40, 0x3c}, {0x44, 0x28, 0x10, 0x28, 0x44}, {0x0c, 0x50, 0x50, 0x50, 0x3c},
    {0x44, 0x64, 0x54, 0x4c, 0x44}, {0x00, 0x08, 0x36, 0x41, 0x00}, {0x00, 0x00, 0x7f, 0x00, 0x00},
    {0x00, 0x41, 0x36, 0x08, 0x00}, {0x08, 0x08, 0x2a, 0x1c, 0x08},
}};

constexpr int kAdvance = 6;

Image as_rgb(const Image& img) {
    if (img.channels() == 3) return img;
    if (img.channels() != 1) throw DimensionError("grid tiles must have 1 or 3 channels");
    Image out(3, img.height(), img.width());
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) out.at(c, y, x) = img.at(0, y, x);
        }
    }
    return out;
}

}  // namespace

int draw_text(Image& image, int x, int y, const std::string& text) {
    int drawn = 0;
    for (char ch : text) {
        if (x + 5 > image.width()) break;
        const auto u = static_cast<unsigned char>(ch);
        const auto& glyph = kFont[(u >= 0x20 && u < 0x7f) ? u - 0x20 : '?' - 0x20];
        for (int col = 0; col < 5; ++col) {
            for (int row = 0; row < 7; ++row) {
                if (!((glyph[col] >> row) & 1) || y + row < 0 || y + row >= image.height()) continue;
                for (int c = 0; c < image.channels(); ++c) image.at(c, y + row, x + col) = 0.0;
            }
        }
        x += kAdvance;
        ++drawn;
    }
    return drawn;
}

Image compose_grid(const std::vector<Image>& images, const std::vector<std::string>& labels, int columns) {
    if (images.empty()) throw ConfigError("grid needs at least one image");
    if (columns < 0) throw ConfigError("grid columns must be >= 0");
    const int n = static_cast<int>(images.size());
    const int cols = columns == 0 ? n : std::min(columns, n);
    const int rows = (n + cols - 1) / cols;
    const int tw = images[0].width(), th = images[0].height();
    if (tw <= 0 || th <= 0) throw DimensionError("grid tiles must be non-empty");
    const int cell_h = th + kCaptionStrip;

    Image grid(3, rows * cell_h, cols * tw, 1.0);
    for (int i = 0; i < n; ++i) {
        Image tile = as_rgb(images[static_cast<std::size_t>(i)]);
        if (tile.width() != tw || tile.height() != th) {
            log().warn("grid tile {} is {}x{}, resizing to {}x{}", i, tile.width(), tile.height(), tw, th);
            tile = resize_bilinear(tile, tw, th);
        }
        const int ox = (i % cols) * tw, oy = (i / cols) * cell_h;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < th; ++y) {
                for (int x = 0; x < tw; ++x) grid.at(c, oy + y, ox + x) = tile.at(c, y, x);
            }
        }
        if (static_cast<std::size_t>(i) < labels.size() && !labels[static_cast<std::size_t>(i)].empty()) {
            Image strip(3, kCaptionStrip, tw, 1.0);
            const std::string& label = labels[static_cast<std::size_t>(i)];
            if (draw_text(strip, 2, (kCaptionStrip - 7) / 2, label) < static_cast<int>(label.size())) {
                log().debug("grid label '{}' truncated to the tile width", label);
            }
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < kCaptionStrip; ++y) {
                    for (int x = 0; x < tw; ++x) grid.at(c, oy + th + y, ox + x) = strip.at(c, y, x);
                }
            }
        }
    }
    return grid;
}

void emit_grid(const std::vector<Image>& images, const std::vector<std::string>& labels,
               const std::filesystem::path& path, int columns) {
    write_png(path, compose_grid(images, labels, columns));
}

}  // namespace sigstyle
