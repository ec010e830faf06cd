#include "regiontok/geometry.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/ops.hpp"

#include <algorithm>
#include <cmath>

namespace regiontok::geometry {

SimilarityTransform SimilarityTransform::from_angle(double scale, double radians, Point2 translation) {
    const double c = std::cos(radians), s = std::sin(radians);
    return SimilarityTransform{scale, {c, -s, s, c}, translation};
}

double SimilarityTransform::angle() const { return std::atan2(rotation[2], rotation[0]); }

LandmarkSet default_face_template() {
    return {Point2{38.2946, 51.6963}, Point2{73.5318, 51.5014}, Point2{56.0252, 71.7366},
            Point2{41.5493, 92.3655}, Point2{70.7299, 92.2041}};
}

SimilarityTransform estimate_similarity(const LandmarkSet& src, const LandmarkSet& dst) {
    constexpr double n = 5.0;
    Point2 ms{}, md{};
    for (std::size_t k = 0; k < 5; ++k) {
        if (!std::isfinite(src[k].x) || !std::isfinite(src[k].y) || !std::isfinite(dst[k].x) || !std::isfinite(dst[k].y))
            throw ValueError("estimate_similarity: non-finite landmark");
        ms.x += src[k].x / n;
        ms.y += src[k].y / n;
        md.x += dst[k].x / n;
        md.y += dst[k].y / n;
    }
    // With centered p, q the optimal s*cos and s*sin are a/|p|^2 and b/|p|^2.
    double a = 0.0, b = 0.0, var = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        const double px = src[k].x - ms.x, py = src[k].y - ms.y;
        const double qx = dst[k].x - md.x, qy = dst[k].y - md.y;
        a += px * qx + py * qy;
        b += px * qy - py * qx;
        var += px * px + py * py;
    }
    if (var <= 1e-24) throw DegenerateError("estimate_similarity: source landmarks coincide, scale is undefined");
    const double sc = a / var, ss = b / var;
    const double scale = std::hypot(sc, ss);
    if (scale <= 1e-300) throw DegenerateError("estimate_similarity: fitted scale is zero");
    // Normalizing the (cos, sin) pair keeps R exactly orthonormal.
    const double c = sc / scale, s = ss / scale;
    SimilarityTransform t{scale, {c, -s, s, c}, {}};
    t.translation = Point2{md.x - scale * (c * ms.x - s * ms.y), md.y - scale * (s * ms.x + c * ms.y)};
    return t;
}

double alignment_residual(const SimilarityTransform& t, const LandmarkSet& src, const LandmarkSet& dst) {
    double r = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        const Point2 p = apply_transform(t, src[k]);
        r += (p.x - dst[k].x) * (p.x - dst[k].x) + (p.y - dst[k].y) * (p.y - dst[k].y);
    }
    return r;
}

Point2 apply_transform(const SimilarityTransform& t, Point2 u) {
    const auto& r = t.rotation;
    return {t.scale * (r[0] * u.x + r[1] * u.y) + t.translation.x,
            t.scale * (r[2] * u.x + r[3] * u.y) + t.translation.y};
}

SimilarityTransform invert_transform(const SimilarityTransform& t) {
    // u = R^T (v - t) / s
    const auto& r = t.rotation;
    SimilarityTransform inv;
    inv.scale = 1.0 / t.scale;
    inv.rotation = {r[0], r[2], r[1], r[3]};
    const double tx = t.translation.x, ty = t.translation.y;
    inv.translation = Point2{-(r[0] * tx + r[2] * ty) / t.scale, -(r[1] * tx + r[3] * ty) / t.scale};
    return inv;
}

SimilarityTransform compose(const SimilarityTransform& a, const SimilarityTransform& b) {
    const auto& ra = a.rotation;
    const auto& rb = b.rotation;
    SimilarityTransform out;
    out.scale = a.scale * b.scale;
    out.rotation = {ra[0] * rb[0] + ra[1] * rb[2], ra[0] * rb[1] + ra[1] * rb[3],
                    ra[2] * rb[0] + ra[3] * rb[2], ra[2] * rb[1] + ra[3] * rb[3]};
    out.translation = apply_transform(a, b.translation);
    return out;
}

ad::Var warp_to_canvas(const ad::Var& image, const SimilarityTransform& t, int canvas_h, int canvas_w) {
    if (canvas_h < 1 || canvas_w < 1) throw ShapeError("warp_to_canvas: canvas must be at least 1x1");
    const SimilarityTransform inv = invert_transform(t);
    std::vector<double> pts(static_cast<std::size_t>(canvas_h) * canvas_w * 2);
    std::size_t k = 0;
    for (int i = 0; i < canvas_h; ++i)
        for (int j = 0; j < canvas_w; ++j) {
            const Point2 p = apply_transform(inv, Point2{j + 0.5, i + 0.5});
            pts[k++] = p.x;
            pts[k++] = p.y;
        }
    return ops::bilinear_sample(image, pts, canvas_h, canvas_w, ops::Padding::Zero);
}

std::optional<BoundingBox> clip_box(const BoundingBox& box, int height, int width) {
    BoundingBox c{std::max(box.x0, 0.0), std::max(box.y0, 0.0), std::min(box.x1, static_cast<double>(width)),
                  std::min(box.y1, static_cast<double>(height))};
    if (!c.valid()) return std::nullopt;
    return c;
}

ad::Var crop_resize(const ad::Var& image, const BoundingBox& box, int target_h, int target_w) {
    if (image.value().rank() != 4) throw ShapeError("crop_resize expects [1, C, H, W]");
    if (target_h < 1 || target_w < 1) throw ShapeError("crop_resize: target must be at least 1x1");
    const int h = image.shape()[2], w = image.shape()[3];
    const auto clipped = clip_box(box, h, w);
    if (!clipped) throw DegenerateError("crop_resize: box lies entirely outside the image");
    const BoundingBox& b = *clipped;
    const double sx = b.width() / target_w, sy = b.height() / target_h;
    std::vector<double> pts(static_cast<std::size_t>(target_h) * target_w * 2);
    std::size_t k = 0;
    for (int i = 0; i < target_h; ++i)
        for (int j = 0; j < target_w; ++j) {
            pts[k++] = b.x0 + (j + 0.5) * sx;
            pts[k++] = b.y0 + (i + 0.5) * sy;
        }
    return ops::bilinear_sample(image, pts, target_h, target_w, ops::Padding::Clamp);
}

double area_weight(const BoundingBox& box, int height, int width) {
    if (height < 1 || width < 1) throw ShapeError("area_weight: image dims must be positive");
    const auto clipped = clip_box(box, height, width);
    if (!clipped) return 0.0;
    return clipped->area() / (static_cast<double>(height) * width);
}

} // namespace regiontok::geometry
