#include "regiontok/glyphs.hpp"

#include "regiontok/errors.hpp"

#include <cmath>

namespace regiontok::glyphs {

namespace {

constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

constexpr std::array<std::array<std::string_view, 7>, 36> kFont = {{
    {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}, // A
    {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."}, // B
    {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."}, // C
    {"###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."}, // D
    {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}, // E
    {"#####", "#....", "#....", "####.", "#....", "#....", "#...."}, // F
    {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"}, // G
    {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}, // H
    {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}, // I
    {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."}, // J
    {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"}, // K
    {"#....", "#....", "#....", "#....", "#....", "#....", "#####"}, // L
    {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"}, // M
    {"#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"}, // N
    {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}, // O
    {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."}, // P
    {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"}, // Q
    {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"}, // R
    {".####", "#....", "#....", ".###.", "....#", "....#", "####."}, // S
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."}, // T
    {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}, // U
    {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."}, // V
    {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."}, // W
    {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}, // X
    {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."}, // Y
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"}, // Z
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}, // 0
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}, // 1
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}, // 2
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."}, // 3
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}, // 4
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}, // 5
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}, // 6
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}, // 7
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}, // 8
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}, // 9
}};

const std::array<Bitmap, 36>& bitmaps() {
    static const std::array<Bitmap, 36> maps = [] {
        std::array<Bitmap, 36> m{};
        for (std::size_t g = 0; g < kFont.size(); ++g)
            for (int r = 0; r < kGlyphHeight; ++r)
                for (int c = 0; c < kGlyphWidth; ++c) m[g][r * kGlyphWidth + c] = kFont[g][r][c] == '#' ? 1 : 0;
        return m;
    }();
    return maps;
}

double pearson(const std::array<double, 35>& a, const Bitmap& b) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < 35; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= 35.0;
    mb /= 35.0;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < 35; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 1e-18 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

} // namespace

std::string_view alphabet() { return kAlphabet; }

bool has_glyph(char c) { return kAlphabet.find(c) != std::string_view::npos; }

const Bitmap& glyph(char c) {
    const auto i = kAlphabet.find(c);
    if (i == std::string_view::npos) throw ValueError(std::string("no glyph for character '") + c + "'");
    return bitmaps()[i];
}

geometry::BoundingBox text_extent(int x, int y, int length, int scale) {
    return {static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + (kPitch * length - 1) * scale),
            static_cast<double>(y + kGlyphHeight * scale)};
}

void draw_text(Tensor& image, std::string_view text, int x, int y, int scale, const std::array<double, 3>& color) {
    if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
        throw ShapeError("draw_text expects [1, 3, H, W], got " + shape_string(image.shape));
    if (text.empty() || scale < 1) throw ValueError("draw_text needs a non-empty string and scale >= 1");
    const auto box = text_extent(x, y, static_cast<int>(text.size()), scale);
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > image.dim(3) || box.y1 > image.dim(2))
        throw ValueError("text '" + std::string(text) + "' at scale " + std::to_string(scale) + " does not fit the " +
                         std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) + " image");
    for (std::size_t i = 0; i < text.size(); ++i) {
        const Bitmap& g = glyph(text[i]);
        const int gx = x + static_cast<int>(i) * kPitch * scale;
        for (int r = 0; r < kGlyphHeight; ++r)
            for (int c = 0; c < kGlyphWidth; ++c) {
                if (!g[r * kGlyphWidth + c]) continue;
                for (int dy = 0; dy < scale; ++dy)
                    for (int dx = 0; dx < scale; ++dx)
                        for (int ch = 0; ch < 3; ++ch)
                            image.at(0, ch, y + r * scale + dy, gx + c * scale + dx) = color[ch];
            }
    }
}

Reading recognize(const Tensor& image, const geometry::BoundingBox& box, double threshold) {
    if (image.rank() != 4 || image.dim(1) != 3) throw ShapeError("recognize expects [1, 3, H, W]");
    const int x0 = static_cast<int>(std::lround(box.x0)), y0 = static_cast<int>(std::lround(box.y0));
    const int w = static_cast<int>(std::lround(box.x1)) - x0, h = static_cast<int>(std::lround(box.y1)) - y0;
    Reading out;
    const int scale = static_cast<int>(std::lround(h / static_cast<double>(kGlyphHeight)));
    if (scale < 1) return out;
    const int length = static_cast<int>(std::lround((w / static_cast<double>(scale) + 1.0) / kPitch));
    if (length < 1) return out;
    const int ih = image.dim(2), iw = image.dim(3);
    const auto gray = [&](int yy, int xx) {
        if (yy < 0 || xx < 0 || yy >= ih || xx >= iw) return 0.0;
        return (image.at(0, 0, yy, xx) + image.at(0, 1, yy, xx) + image.at(0, 2, yy, xx)) / 3.0;
    };
    const auto& maps = bitmaps();
    for (int i = 0; i < length; ++i) {
        std::array<double, 35> cell{};
        const int gx = x0 + i * kPitch * scale;
        for (int r = 0; r < kGlyphHeight; ++r)
            for (int c = 0; c < kGlyphWidth; ++c) {
                double acc = 0.0;
                for (int dy = 0; dy < scale; ++dy)
                    for (int dx = 0; dx < scale; ++dx) acc += gray(y0 + r * scale + dy, gx + c * scale + dx);
                cell[r * kGlyphWidth + c] = acc / (scale * scale);
            }
        double best = -2.0;
        std::size_t best_g = 0;
        for (std::size_t g = 0; g < maps.size(); ++g) {
            // Ink may be darker or lighter than the plate, so the sign is dropped.
            const double score = std::abs(pearson(cell, maps[g]));
            if (score > best) {
                best = score;
                best_g = g;
            }
        }
        // Clean renders reach 1 up to rounding.
        out.text.push_back(best >= threshold - 1e-9 ? kAlphabet[best_g] : kUnknown);
        out.scores.push_back(best);
    }
    return out;
}

} // namespace regiontok::glyphs
