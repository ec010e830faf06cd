#pragma once

// Boxes, landmarks, similarity transforms and differentiable region
// extraction.
//
// Coordinate convention (used everywhere in the project): continuous (x, y)
// with the origin at the top-left image corner. Pixel (row r, column c)
// covers [c, c+1) x [r, r+1) and its center sits at (c + 0.5, r + 0.5).
// Box edges and landmark positions are both expressed in this frame, so a
// box [0, W] x [0, H] is the whole image and has area H*W.

#include "regiontok/autograd.hpp"

#include <array>
#include <optional>
#include <vector>

namespace regiontok::geometry {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

struct BoundingBox {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    bool valid() const { return x0 < x1 && y0 < y1; }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Left eye, right eye, nose, left mouth corner, right mouth corner.
using LandmarkSet = std::array<Point2, 5>;

// T(u) = s * R * u + t. R is row-major [[r00, r01], [r10, r11]].
struct SimilarityTransform {
    double scale = 1.0;
    std::array<double, 4> rotation{1.0, 0.0, 0.0, 1.0};
    Point2 translation{};

    static SimilarityTransform identity() { return {}; }
    static SimilarityTransform from_angle(double scale, double radians, Point2 translation);
    double angle() const;
};

// Five-point template on the 112x112 face canvas (the widely used ArcFace
// alignment reference).
LandmarkSet default_face_template();
inline constexpr int kFaceCanvas = 112;

// Least-squares similarity transform mapping src onto dst (closed form,
// reflections excluded). Throws DegenerateError when the source points
// coincide or the fitted scale is zero.
SimilarityTransform estimate_similarity(const LandmarkSet& src, const LandmarkSet& dst);

// Sum of squared alignment residuals of T on (src, dst).
double alignment_residual(const SimilarityTransform& t, const LandmarkSet& src, const LandmarkSet& dst);

Point2 apply_transform(const SimilarityTransform& t, Point2 u);
SimilarityTransform invert_transform(const SimilarityTransform& t);
// compose(a, b)(u) = a(b(u))
SimilarityTransform compose(const SimilarityTransform& a, const SimilarityTransform& b);

// Samples image [1, C, H, W] at T^-1(c) for every canvas pixel center c.
// Zero padding outside the image. Differentiable with respect to the image.
ad::Var warp_to_canvas(const ad::Var& image, const SimilarityTransform& t, int canvas_h, int canvas_w);

// Clips the box to the image, then bilinearly resamples its contents to
// target_h x target_w. Throws DegenerateError when the box misses the image.
ad::Var crop_resize(const ad::Var& image, const BoundingBox& box, int target_h, int target_w);

// Intersection with [0, W] x [0, H]; nullopt when the intersection is empty.
std::optional<BoundingBox> clip_box(const BoundingBox& box, int height, int width);

// Clipped box area over image area, in [0, 1].
double area_weight(const BoundingBox& box, int height, int width);

} // namespace regiontok::geometry
