#pragma once

// Fixed 5x7 bitmap font (A-Z, 0-9), a renderer for it and a template-matching
// recognizer that reads rendered strings back.

#include "regiontok/geometry.hpp"
#include "regiontok/tensor.hpp"

#include <array>
#include <string>
#include <string_view>

namespace regiontok::glyphs {

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
inline constexpr int kPitch = 6; // glyph width plus one blank column
inline constexpr char kUnknown = '?';

using Bitmap = std::array<std::uint8_t, kGlyphWidth * kGlyphHeight>; // row-major, 1 = ink

std::string_view alphabet();
bool has_glyph(char c);
// Throws ValueError for characters outside the alphabet.
const Bitmap& glyph(char c);

// Tight ink extent of an n-character string drawn at (x, y) with integer scale s:
// width (6n - 1) s, height 7 s.
geometry::BoundingBox text_extent(int x, int y, int length, int scale);

// Paints the glyph ink of `text` into image [1, 3, H, W]. Throws ValueError on
// unsupported characters or when the string does not fit.
void draw_text(Tensor& image, std::string_view text, int x, int y, int scale, const std::array<double, 3>& color);

struct Reading {
    std::string text;
    std::vector<double> scores; // best correlation per character cell
};

// Reads the string inside an integer-aligned box of image [1, 3, H, W]. The
// layout (scale, length) is inferred from the box size. Each cell is averaged
// down to 5x7, compared with every template by Pearson correlation and
// assigned the best glyph; cells whose best score is below `threshold`
// become '?'.
Reading recognize(const Tensor& image, const geometry::BoundingBox& box, double threshold);

} // namespace regiontok::glyphs
