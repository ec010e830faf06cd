#pragma once

// Text, face and image fidelity metrics and the size-stratified report.

#include "regiontok/autoencoder.hpp"
#include "regiontok/data.hpp"
#include "regiontok/perceptual.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace regiontok::metrics {

// Unit-cost insert/delete/substitute distance.
int levenshtein(std::string_view a, std::string_view b);
// 1 - D(s, s_hat) / max(len). Throws ValueError when both strings are empty.
double ned(std::string_view s, std::string_view s_hat);
// Lower-cases and strips surrounding whitespace.
std::string normalize_text(std::string_view s);
// 1 iff the normalized strings match.
int t_acc(std::string_view s, std::string_view s_hat);
// Cosine similarity; throws ValueError on a zero vector or a length mismatch.
double f_sim(std::span<const double> a, std::span<const double> b);

inline constexpr double kPsnrCap = 100.0;
// 10 log10(1 / MSE) for images in [0, 1]; identical images give kPsnrCap.
double psnr(const Tensor& x, const Tensor& x_hat);
// PSNR over the pixels where mask (per pixel, [H * W]) is true; nullopt when the mask is empty.
std::optional<double> masked_psnr(const Tensor& x, const Tensor& x_hat, const std::vector<bool>& mask);
// tokens * log2(K) / (H * W).
double bpp(long long tokens, long long codebook_size, int height, int width);
// Display rounding to 4 decimals.
double round4(double v);

enum class SizeGroup { Small, Medium, Large };
const char* to_string(SizeGroup g);

struct SizeThresholds {
    double small = 0.01; // region area / image area below this is small
    double large = 0.05; // above this is large
};
SizeGroup size_group(double area_fraction, const SizeThresholds& thresholds);

// Maps an aligned face canvas to an identity embedding: the flattened,
// per-channel mean-centered feature map of one extractor layer.
class FaceEmbedder {
public:
    FaceEmbedder(perceptual::FeatureExtractor extractor, int layer = -1,
                 geometry::LandmarkSet face_template = geometry::default_face_template());

    std::vector<double> embed(const Tensor& image, const RegionAnnotation& face) const;
    const perceptual::FeatureExtractor& extractor() const { return extractor_; }

private:
    perceptual::FeatureExtractor extractor_;
    int layer_;
    geometry::LandmarkSet template_;
};

FaceEmbedder default_face_embedder(std::uint64_t seed = 7);

struct InstanceRecord {
    std::size_t image = 0;
    std::size_t region = 0;
    RegionKind kind = RegionKind::Text;
    SizeGroup group = SizeGroup::Medium;
    double area_fraction = 0.0;
    std::string reference;  // text only
    std::string recognized; // text only
    double value = 0.0;     // T-ACC (0/1) for text, F-Sim for faces
    double ned = 0.0;       // text only
};

struct MetricReport {
    std::vector<InstanceRecord> records;
    std::optional<double> t_acc_s, t_acc_m, t_ned_s, t_ned_m, f_sim_s, f_sim_m;
    double psnr = 0.0;
    std::optional<double> background_psnr; // pixels outside every region box
    double bpp = 0.0;
    double utilization = 0.0;
    std::size_t images = 0;

    std::string to_json() const;
    std::string to_csv() const;
    // Fixed-width summary table.
    std::string table() const;
};

struct EvalOptions {
    SizeThresholds thresholds;
    double recognition_threshold = 0.5;
};

// Scores precomputed reconstructions (one [1, 3, H, W] tensor per sample).
// bpp and utilization are left at 0.
MetricReport evaluate_images(const data::Corpus& corpus, const std::vector<Tensor>& reconstructions,
                             const FaceEmbedder& embedder, const EvalOptions& options = {});

// Reconstructs every sample through the tokenizer and fills bpp and utilization.
MetricReport evaluate_reconstruction(const autoencoder::Tokenizer& tokenizer, const data::Corpus& corpus,
                                     const FaceEmbedder& embedder, const EvalOptions& options = {});

// Recomputes the aggregates from the records (used by the report self-check).
void aggregate(MetricReport& report);

} // namespace regiontok::metrics
