#pragma once

#include "regiontok/tensor.hpp"

#include <string>

namespace regiontok {

// 8-bit RGB PNG <-> [1, 3, H, W] tensor with values k / 255.
Tensor read_png(const std::string& path);
// Values are clamped to [0, 1] and rounded to the nearest 1/255.
void write_png(const std::string& path, const Tensor& image);

// Rounds every value to the nearest multiple of 1/255 (what a PNG round trip stores).
void quantize_to_8bit(Tensor& image);

} // namespace regiontok
