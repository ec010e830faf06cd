#include "regiontok/image_io.hpp"

#include "regiontok/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace regiontok {

namespace {
unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }
} // namespace

Tensor read_png(const std::string& path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw IoError("cannot read PNG '" + path + "': " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode PNG '" + path + "': " + img.message);
    }
    const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
    Tensor t({1, 3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                t.at(0, c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return t;
}

void write_png(const std::string& path, const Tensor& image) {
    if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
        throw ShapeError("write_png expects [1, 3, H, W], got " + shape_string(image.shape));
    const int h = image.dim(2), w = image.dim(3);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.at(0, c, y, x));
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write PNG '" + path + "': " + img.message);
}

void quantize_to_8bit(Tensor& image) {
    for (double& v : image.data) v = to_byte(v) / 255.0;
}

} // namespace regiontok
