#include "sigstyle/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "sigstyle/digest.hpp"
#include "sigstyle/errors.hpp"

namespace sigstyle {

namespace {

std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

struct ReadCursor {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

void read_callback(png_structp png, png_bytep out, png_size_t len) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + len > cur->bytes.size()) png_error(png, "truncated PNG stream");
    std::memcpy(out, cur->bytes.data() + cur->pos, len);
    cur->pos += len;
}

void write_callback(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + len);
}

void flush_callback(png_structp) {}

struct PngErrorSink {
    std::string message;
};

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    if (auto* sink = static_cast<PngErrorSink*>(png_get_error_ptr(png))) sink->message = msg;
    png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

Image::Image(Tensor chw) : pixels(std::move(chw)) {
    if (pixels.rank() != 3) throw DimensionError("image tensor must be [C, H, W], got " + shape_str(pixels.shape()));
}

Image decode_png(std::span<const std::uint8_t> bytes, bool gray) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("not a PNG stream");
    PngErrorSink sink;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &sink, png_fail, png_warn);
    if (!png) throw IoError("png: cannot allocate reader");
    png_infop info = png_create_info_struct(png);
    ReadCursor cursor{bytes, 0};
    std::vector<std::uint8_t> buf;
    std::vector<png_bytep> rows;
    int w = 0, h = 0, ch = 0;
    std::size_t rowbytes = 0;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png: " + sink.message);
    }
    png_set_read_fn(png, &cursor, read_callback);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    const auto color = png_get_color_type(png, info);
    if (gray) {
        if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    } else if (!(color & PNG_COLOR_MASK_COLOR)) {
        png_set_gray_to_rgb(png);
    }
    png_read_update_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    ch = png_get_channels(png, info);
    rowbytes = png_get_rowbytes(png, info);
    buf.resize(rowbytes * static_cast<std::size_t>(h));
    rows.resize(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + rowbytes * static_cast<std::size_t>(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(ch, h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                img.at(c, y, x) = buf[rowbytes * static_cast<std::size_t>(y) + static_cast<std::size_t>(x * ch + c)] / 255.0;
            }
        }
    }
    return img;
}

Image read_png(const std::filesystem::path& path, bool gray) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_png(bytes, gray);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    const int ch = image.channels();
    if (ch != 1 && ch != 3) throw DimensionError("PNG output needs 1 or 3 channels");
    const int w = image.width(), h = image.height();
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h * ch));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * static_cast<std::size_t>(ch) + static_cast<std::size_t>(c)] = to_byte(image.at(c, y, x));
            }
        }
    }
    std::vector<std::uint8_t> out;
    PngErrorSink sink;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, png_fail, png_warn);
    if (!png) throw IoError("png: cannot allocate writer");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png: " + sink.message);
    }
    png_set_write_fn(png, &out, write_callback, flush_callback);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) {
        png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(w * ch));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    const auto bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

Image quantize8(const Image& image) {
    Image out = image;
    for (auto& v : out.pixels.values()) v = to_byte(v) / 255.0;
    return out;
}

Image resize_bilinear(const Image& image, int width, int height) {
    if (width <= 0 || height <= 0) throw DimensionError("resize to non-positive size");
    const int ch = image.channels(), sh = image.height(), sw = image.width();
    if (sw == width && sh == height) return image;
    Image out(ch, height, width);
    const double sy = static_cast<double>(sh) / height, sx = static_cast<double>(sw) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            for (int c = 0; c < ch; ++c) {
                const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
                const double bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image crop(const Image& image, int x, int y, int width, int height) {
    if (x < 0 || y < 0 || width <= 0 || height <= 0 || x + width > image.width() || y + height > image.height()) {
        throw DimensionError("crop window outside image");
    }
    Image out(image.channels(), height, width);
    for (int c = 0; c < image.channels(); ++c) {
        for (int yy = 0; yy < height; ++yy) {
            for (int xx = 0; xx < width; ++xx) out.at(c, yy, xx) = image.at(c, y + yy, x + xx);
        }
    }
    return out;
}

Image flip_horizontal(const Image& image) {
    Image out = image;
    const int w = image.width();
    for (int c = 0; c < image.channels(); ++c) {
        for (int y = 0; y < image.height(); ++y) {
            for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, w - 1 - x);
        }
    }
    return out;
}

Image to_gray(const Image& image) {
    if (image.channels() == 1) return image;
    Image out(1, image.height(), image.width());
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            out.at(0, y, x) = 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
        }
    }
    return out;
}

double mse(const Image& a, const Image& b) {
    if (a.pixels.shape() != b.pixels.shape()) {
        throw DimensionError("image size mismatch " + shape_str(a.pixels.shape()) + " vs " +
                             shape_str(b.pixels.shape()));
    }
    double s = 0.0;
    for (std::int64_t i = 0; i < a.pixels.numel(); ++i) {
        const double d = a.pixels[i] - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.numel());
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

std::string pixel_digest(const Image& image) {
    std::vector<std::uint8_t> buf;
    buf.reserve(static_cast<std::size_t>(image.pixels.numel()));
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            for (int c = 0; c < image.channels(); ++c) buf.push_back(to_byte(image.at(c, y, x)));
        }
    }
    return sha256_hex(buf);
}

}  // namespace sigstyle
