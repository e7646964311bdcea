#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sigstyle/image.hpp"

namespace sigstyle {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Caption strip height under each tile, in pixels.
inline constexpr int kCaptionStrip = 12;

// Tiles row-major, `columns` per row (0 = one row), each tile followed by a
// caption strip with its label in a 5x7 bitmap font. Tiles of a different
// size are resized to the first image with a warning; gray images are
// expanded to RGB. Missing labels leave the strip blank.
Image compose_grid(const std::vector<Image>& images, const std::vector<std::string>& labels, int columns = 0);
void emit_grid(const std::vector<Image>& images, const std::vector<std::string>& labels,
               const std::filesystem::path& path, int columns = 0);

// Draws ASCII text in black at (x, y) with the 5x7 font, 6 px per glyph,
// clipped to the image. Returns the number of glyphs drawn.
int draw_text(Image& image, int x, int y, const std::string& text);

// Command-line entry point: sigstyle <tune|transfer|local|texture|generate|eval|grid> ...
// Returns kExitOk, kExitUsage on bad flags or configuration, kExitRuntime on
// other failures. Help and usage text go to `out` / `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace sigstyle
