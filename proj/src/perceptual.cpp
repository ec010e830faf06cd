#include "regiontok/perceptual.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/ops.hpp"
#include "regiontok/rng.hpp"
#include "regiontok/serialize.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace regiontok {

const char* to_string(RegionKind kind) { return kind == RegionKind::Text ? "text" : "face"; }

RegionKind region_kind_from_string(const std::string& s) {
    if (s == "text") return RegionKind::Text;
    if (s == "face") return RegionKind::Face;
    throw ValueError("unknown region kind '" + s + "'");
}

void validate(const RegionAnnotation& region) {
    if (!region.box.valid()) throw ValueError("region box must satisfy x0 < x1 and y0 < y1");
    if (region.kind == RegionKind::Face && !region.landmarks) throw ValueError("face region requires 5 landmarks");
    if (region.kind == RegionKind::Text && region.landmarks) throw ValueError("text region must not carry landmarks");
    if (region.transcript && region.transcript->empty()) throw ValueError("text transcript must be non-empty");
    if (region.transcript && region.kind != RegionKind::Text) throw ValueError("only text regions carry transcripts");
    if (region.landmarks)
        for (const auto& p : *region.landmarks)
            if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw ValueError("landmark coordinates must be finite");
}

} // namespace regiontok

namespace regiontok::perceptual {

FeatureExtractor::FeatureExtractor(ExtractorKind kind, int input_h, int input_w, std::vector<Layer> layers)
    : kind_(kind), input_h_(input_h), input_w_(input_w), layers_(std::move(layers)) {
    if (input_h < 1 || input_w < 1) throw ShapeError("extractor input size must be positive");
    if (kind != ExtractorKind::Identity && layers_.empty()) throw ValueError("conv extractor needs at least one layer");
    int in = 3;
    for (const auto& l : layers_) {
        if (l.weight.rank() != 4 || l.weight.dim(1) != in || l.weight.dim(2) != 3 || l.weight.dim(3) != 3 ||
            l.bias.numel() != static_cast<std::size_t>(l.weight.dim(0)))
            throw ShapeError("extractor layer has inconsistent shape " + shape_string(l.weight.shape));
        in = l.weight.dim(0);
    }
}

int FeatureExtractor::layer_count() const {
    return kind_ == ExtractorKind::Identity ? 1 : static_cast<int>(layers_.size());
}

std::vector<int> FeatureExtractor::channel_counts() const {
    if (kind_ == ExtractorKind::Identity) return {3};
    std::vector<int> c;
    for (const auto& l : layers_) c.push_back(l.weight.dim(0));
    return c;
}

std::vector<ad::Var> FeatureExtractor::features(const ad::Var& patch) const {
    const auto& s = patch.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != input_h_ || s[3] != input_w_)
        throw ShapeError("extractor expects [N, 3, " + std::to_string(input_h_) + ", " + std::to_string(input_w_) +
                         "], got " + shape_string(s));
    if (kind_ == ExtractorKind::Identity) return {patch};
    std::vector<ad::Var> out;
    ad::Var h = ops::add_scalar(ops::scale(patch, 2.0), -1.0);
    for (const auto& l : layers_) {
        h = ops::leaky_relu(ops::conv2d(h, ad::constant(l.weight), ad::constant(l.bias), 2, 1), kLeakySlope);
        out.push_back(h);
    }
    return out;
}

FeatureExtractor make_toy_extractor(ExtractorKind kind, std::uint64_t seed, int layers, int input_h, int input_w) {
    if (layers < 1) throw ValueError("extractor needs L >= 1");
    if (kind == ExtractorKind::Identity) return FeatureExtractor(kind, input_h, input_w, {});
    if (kind != ExtractorKind::SeededRandomConv) throw ValueError("make_toy_extractor: unsupported kind");
    static constexpr int widths[] = {8, 16, 16, 32, 32};
    Rng rng(derive_seed(seed, 0xFEA7));
    std::vector<FeatureExtractor::Layer> ls;
    int in = 3;
    for (int l = 0; l < layers; ++l) {
        const int out = l < 5 ? widths[l] : 32;
        FeatureExtractor::Layer layer;
        layer.weight = Tensor({out, in, 3, 3});
        const double std_dev = std::sqrt(2.0 / (in * 9.0));
        for (double& v : layer.weight.data) v = std_dev * normal(rng);
        layer.bias = Tensor({out}, 0.0);
        ls.push_back(std::move(layer));
        in = out;
    }
    return FeatureExtractor(kind, input_h, input_w, std::move(ls));
}

FeatureExtractor load_extractor(const std::string& path) {
    const TensorArchive archive = TensorArchive::load(path);
    const Tensor& size = archive.get("input_size");
    if (size.numel() != 2) throw ShapeError("extractor archive: input_size must hold 2 values");
    std::vector<FeatureExtractor::Layer> layers;
    for (int l = 0; archive.contains("layer" + std::to_string(l) + ".weight"); ++l)
        layers.push_back({archive.get("layer" + std::to_string(l) + ".weight"),
                          archive.get("layer" + std::to_string(l) + ".bias")});
    return FeatureExtractor(ExtractorKind::External, static_cast<int>(size[0]), static_cast<int>(size[1]),
                            std::move(layers));
}

void save_extractor(const FeatureExtractor& extractor, const std::string& path) {
    TensorArchive archive;
    archive.put("input_size", Tensor({2}, {static_cast<double>(extractor.input_height()),
                                           static_cast<double>(extractor.input_width())}));
    for (std::size_t l = 0; l < extractor.layers().size(); ++l) {
        archive.put("layer" + std::to_string(l) + ".weight", extractor.layers()[l].weight);
        archive.put("layer" + std::to_string(l) + ".bias", extractor.layers()[l].bias);
    }
    archive.save(path);
}

ChannelWeights unit_channel_weights(const FeatureExtractor& extractor) {
    ChannelWeights w;
    for (int c : extractor.channel_counts()) w.emplace_back(static_cast<std::size_t>(c), 1.0);
    return w;
}

namespace {

// sum over layers of coeff_l * ||w_l * (F_l(a) - F_l(b))||^2 / (H_l W_l); a is constant.
ad::Var layered_distance(const Tensor& a, const ad::Var& b, const FeatureExtractor& extractor,
                         const ChannelWeights* weights, double layer_scale) {
    require_same_shape(a, b.value(), "perceptual distance");
    const auto fa = extractor.features(ad::constant(a));
    const auto fb = extractor.features(b);
    std::vector<ad::Var> terms;
    std::vector<double> coeffs;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        ad::Var diff = ops::sub(fb[l], ops::stop_gradient(fa[l]));
        if (weights) diff = ops::channel_scale(diff, (*weights)[l]);
        const auto& s = diff.shape();
        terms.push_back(ops::sum(ops::square(diff)));
        // Batch average folded into the coefficient.
        coeffs.push_back(layer_scale / (static_cast<double>(s[2]) * s[3] * s[0]));
    }
    return ops::weighted_sum(terms, coeffs);
}

void require_patch(const Tensor& r, const FeatureExtractor& extractor, const char* what) {
    if (r.rank() != 4 || r.dim(2) != extractor.input_height() || r.dim(3) != extractor.input_width())
        throw ShapeError(std::string(what) + ": patch " + shape_string(r.shape) + " does not match extractor input " +
                         std::to_string(extractor.input_height()) + "x" + std::to_string(extractor.input_width()));
}

ad::Var zero_loss() { return ad::constant(Tensor({1}, 0.0)); }

} // namespace

ad::Var image_perceptual_loss(const Tensor& x, const ad::Var& x_hat, const FeatureExtractor& extractor,
                              const ChannelWeights& weights) {
    require_patch(x, extractor, "image_perceptual_loss");
    if (weights.size() != static_cast<std::size_t>(extractor.layer_count()))
        throw ShapeError("image_perceptual_loss: channel weights do not match extractor layers");
    const auto counts = extractor.channel_counts();
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (weights[l].size() != static_cast<std::size_t>(counts[l]))
            throw ShapeError("image_perceptual_loss: channel weight count mismatch at layer " + std::to_string(l));
        for (double w : weights[l])
            if (w < 0.0) throw ValueError("channel weights must be nonnegative");
    }
    return layered_distance(x, x_hat, extractor, &weights, 1.0);
}

ad::Var text_region_loss(const Tensor& r, const ad::Var& r_hat, const FeatureExtractor& extractor) {
    require_patch(r, extractor, "text_region_loss");
    return layered_distance(r, r_hat, extractor, nullptr, 1.0 / extractor.layer_count());
}

ad::Var face_region_loss(const Tensor& r, const ad::Var& r_hat, const FeatureExtractor& extractor) {
    require_patch(r, extractor, "face_region_loss");
    return layered_distance(r, r_hat, extractor, nullptr, 1.0 / extractor.layer_count());
}

std::vector<double> region_weights(std::span<const RegionAnnotation> regions, RegionKind kind, int height, int width,
                                   const RegionLossOptions& options) {
    std::vector<double> w;
    for (const auto& r : regions) {
        if (r.kind != kind) {
            w.push_back(0.0);
            continue;
        }
        const auto clipped = geometry::clip_box(r.box, height, width);
        if (!clipped) {
            spdlog::warn("dropping {} region [{}, {}, {}, {}] that lies outside the {}x{} image", to_string(kind),
                         r.box.x0, r.box.y0, r.box.x1, r.box.y1, width, height);
            w.push_back(0.0);
            continue;
        }
        if (clipped->width() < options.min_region_size || clipped->height() < options.min_region_size) {
            w.push_back(0.0);
            continue;
        }
        w.push_back(options.area_weighting ? geometry::area_weight(r.box, height, width) : 1.0);
    }
    return w;
}

ad::Var text_loss(const Tensor& x, const ad::Var& x_hat, std::span<const RegionAnnotation> regions,
                  const FeatureExtractor& extractor, const RegionLossOptions& options) {
    require_same_shape(x, x_hat.value(), "text_loss");
    const int h = x.dim(2), w = x.dim(3);
    const auto weights = region_weights(regions, RegionKind::Text, h, w, options);
    std::vector<ad::Var> terms;
    std::vector<double> coeffs;
    const ad::Var x_const = ad::constant(x);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        const int th = extractor.input_height(), tw = extractor.input_width();
        const Tensor r = geometry::crop_resize(x_const, regions[i].box, th, tw).value();
        const ad::Var r_hat = geometry::crop_resize(x_hat, regions[i].box, th, tw);
        terms.push_back(text_region_loss(r, r_hat, extractor));
        coeffs.push_back(weights[i]);
    }
    if (terms.empty()) return zero_loss();
    return ops::weighted_sum(terms, coeffs);
}

ad::Var face_region_extract(const ad::Var& image, const RegionAnnotation& face, const geometry::LandmarkSet& face_template,
                            int canvas_h, int canvas_w) {
    if (face.kind != RegionKind::Face || !face.landmarks)
        throw ValueError("face_region_extract requires a face annotation with landmarks");
    const auto t = geometry::estimate_similarity(*face.landmarks, face_template);
    return geometry::warp_to_canvas(image, t, canvas_h, canvas_w);
}

ad::Var face_loss(const Tensor& x, const ad::Var& x_hat, std::span<const RegionAnnotation> regions,
                  const FeatureExtractor& extractor, const geometry::LandmarkSet& face_template,
                  const RegionLossOptions& options) {
    require_same_shape(x, x_hat.value(), "face_loss");
    const int h = x.dim(2), w = x.dim(3);
    const auto weights = region_weights(regions, RegionKind::Face, h, w, options);
    std::vector<ad::Var> terms;
    std::vector<double> coeffs;
    const ad::Var x_const = ad::constant(x);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        const auto t = geometry::estimate_similarity(*regions[i].landmarks, face_template);
        const int ch = extractor.input_height(), cw = extractor.input_width();
        const Tensor r = geometry::warp_to_canvas(x_const, t, ch, cw).value();
        const ad::Var r_hat = geometry::warp_to_canvas(x_hat, t, ch, cw);
        terms.push_back(face_region_loss(r, r_hat, extractor));
        coeffs.push_back(weights[i]);
    }
    if (terms.empty()) return zero_loss();
    return ops::weighted_sum(terms, coeffs);
}

} // namespace regiontok::perceptual
