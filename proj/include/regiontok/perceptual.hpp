#pragma once

// Frozen feature extractors and the perceptual losses built on them: the
// image-level loss, the localized text loss over banner crops and the
// localized face loss over aligned canvases. Region losses are aggregated
// with area weights Area(box) / Area(image).

#include "regiontok/autograd.hpp"
#include "regiontok/region.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace regiontok::perceptual {

enum class ExtractorKind { Identity, SeededRandomConv, External };

// A frozen map from a fixed-size patch to L feature maps. The seeded
// random-conv variant stacks L stride-2 3x3 convolutions, each followed by a
// leaky ReLU; layer l is tapped after its activation.
class FeatureExtractor {
public:
    struct Layer {
        Tensor weight; // [out, in, 3, 3]
        Tensor bias;   // [out]
    };

    FeatureExtractor() = default;
    FeatureExtractor(ExtractorKind kind, int input_h, int input_w, std::vector<Layer> layers);

    ExtractorKind kind() const { return kind_; }
    int input_height() const { return input_h_; }
    int input_width() const { return input_w_; }
    int layer_count() const;
    std::vector<int> channel_counts() const;
    static constexpr bool frozen() { return true; }
    const std::vector<Layer>& layers() const { return layers_; }

    // patch is [N, 3, input_h, input_w]. Throws ShapeError on other sizes.
    std::vector<ad::Var> features(const ad::Var& patch) const;

private:
    ExtractorKind kind_ = ExtractorKind::Identity;
    int input_h_ = 0;
    int input_w_ = 0;
    std::vector<Layer> layers_;
};

inline constexpr int kBannerHeight = 32;
inline constexpr int kBannerWidth = 128;
inline constexpr double kLeakySlope = 0.2;

// identity: one layer, the patch itself. seeded_random_conv: `layers` frozen
// convolutions with widths {8, 16, 16, 32, 32, ...} drawn once from `seed`.
FeatureExtractor make_toy_extractor(ExtractorKind kind, std::uint64_t seed, int layers, int input_h, int input_w);

// Loads conv layers from a tensor archive holding "layer{i}.weight" and
// "layer{i}.bias" entries plus a 2-element "input_size" tensor.
FeatureExtractor load_extractor(const std::string& path);
void save_extractor(const FeatureExtractor& extractor, const std::string& path);

// Per-layer, per-channel nonnegative weights.
using ChannelWeights = std::vector<std::vector<double>>;
ChannelWeights unit_channel_weights(const FeatureExtractor& extractor);

// sum_l 1/(H_l W_l) || w_l * (F_l(x_hat) - F_l(x)) ||^2, averaged over the
// batch. x is treated as a constant.
ad::Var image_perceptual_loss(const Tensor& x, const ad::Var& x_hat, const FeatureExtractor& extractor,
                              const ChannelWeights& weights);

// (1/L) sum_l 1/(H_l W_l) || F_l(r) - F_l(r_hat) ||^2 on banner-sized patches.
ad::Var text_region_loss(const Tensor& r, const ad::Var& r_hat, const FeatureExtractor& extractor);

// Same layer-averaged distance on face canvases.
ad::Var face_region_loss(const Tensor& r, const ad::Var& r_hat, const FeatureExtractor& extractor);

struct RegionLossOptions {
    bool area_weighting = true; // false: every region weighs 1
    int min_region_size = 2;    // regions smaller than this (after clipping) are skipped
};

// Returns the area weights actually used for each region (0 for skipped ones).
std::vector<double> region_weights(std::span<const RegionAnnotation> regions, RegionKind kind, int height, int width,
                                   const RegionLossOptions& options);

// sum_n w_n * text_region_loss(crop(x, b_n), crop(x_hat, b_n)) over the text
// regions of a single image. x is [1, 3, H, W].
ad::Var text_loss(const Tensor& x, const ad::Var& x_hat, std::span<const RegionAnnotation> regions,
                  const FeatureExtractor& extractor, const RegionLossOptions& options = {});

// Aligns the face to the template (transform estimated from the annotation
// landmarks) and warps onto a canvas.
ad::Var face_region_extract(const ad::Var& image, const RegionAnnotation& face, const geometry::LandmarkSet& face_template,
                            int canvas_h = geometry::kFaceCanvas, int canvas_w = geometry::kFaceCanvas);

// sum_m w_m * face_region_loss over the face regions of a single image. Both
// patches use the transform estimated from the original landmarks.
ad::Var face_loss(const Tensor& x, const ad::Var& x_hat, std::span<const RegionAnnotation> regions,
                  const FeatureExtractor& extractor, const geometry::LandmarkSet& face_template,
                  const RegionLossOptions& options = {});

} // namespace regiontok::perceptual
