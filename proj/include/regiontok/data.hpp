#pragma once

// Synthetic annotated corpora (text banners, procedural faces), JSON-lines
// manifests and a deterministic batch iterator.

#include "regiontok/region.hpp"
#include "regiontok/rng.hpp"
#include "regiontok/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace regiontok::data {

struct Sample {
    std::string image_path; // relative to the manifest directory; empty for in-memory samples
    Tensor image;           // [1, 3, H, W]
    std::vector<RegionAnnotation> regions;
    std::string split = "train";
    std::uint64_t seed = 0;
    // Template-to-image transform of every face, in the order faces appear in `regions`.
    std::vector<geometry::SimilarityTransform> face_transforms;
};

struct Corpus {
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
    int height() const;
    int width() const;
};

struct TextCorpusConfig {
    int height = 32;
    int width = 32;
    int min_strings = 1;
    int max_strings = 4;
    int min_length = 2;
    int max_length = 3;
    std::vector<int> scales{1, 2};

    // Throws ValueError when the smallest glyph layout cannot fit the image.
    void validate() const;
};

struct FaceCorpusConfig {
    int height = 32;
    int width = 32;
    int min_faces = 1;
    int max_faces = 3;
    double min_size = 14.0; // rendered canvas side in pixels
    double max_size = 22.0;
    double max_rotation = 0.35; // radians
    bool jitter = true;         // false: axis-aligned faces

    void validate() const;
};

// Per-face identity and appearance parameters, expressed on the 112x112
// template canvas. Feature centers sit exactly on the template landmarks.
struct SyntheticFaceSpec {
    double canvas = 112.0;
    geometry::Point2 ellipse_center{56.0, 66.0};
    double ellipse_rx = 46.0;
    double ellipse_ry = 56.0;
    double eye_radius = 8.0;
    double pupil_radius = 3.5;
    double nose_radius = 6.0;
    double mouth_thickness = 5.0;
    double brow_offset = 14.0;
    std::array<double, 3> skin{0.85, 0.7, 0.55};
    std::array<double, 3> eye{0.95, 0.95, 0.95};
    std::array<double, 3> pupil{0.1, 0.15, 0.3};
    std::array<double, 3> feature{0.45, 0.2, 0.15};
    geometry::SimilarityTransform placement; // template canvas -> image

    static SyntheticFaceSpec random(Rng& rng);
    // Color at template coordinate u, or nullopt outside the face.
    std::optional<std::array<double, 3>> shade(geometry::Point2 u) const;
};

// Renders the face into image [1, 3, H, W] with 2x2 supersampling and
// returns its annotation (landmarks = placement(template), box = bounding
// box of the transformed canvas square).
RegionAnnotation render_face(Tensor& image, const SyntheticFaceSpec& spec);

// Smooth gradient plus sinusoidal texture and pixel noise.
Tensor textured_background(int height, int width, Rng& rng);

Corpus generate_text_corpus(int n_images, const TextCorpusConfig& config, std::uint64_t seed);
Corpus generate_face_corpus(int n_images, const FaceCorpusConfig& config, std::uint64_t seed);

struct MixedCorpusConfig {
    TextCorpusConfig text;
    FaceCorpusConfig face;
    double text_only = 0.3;  // share of images with text only
    double face_only = 0.3;  // share with faces only
    double plain = 0.1;      // share without any region; the rest carry both
};
Corpus generate_mixed_corpus(int n_images, const MixedCorpusConfig& config, std::uint64_t seed);

// Same images with every annotation removed.
Corpus strip_annotations(Corpus corpus);

inline constexpr int kManifestVersion = 1;

// Writes images/<index>.png under `root` and root/manifest.jsonl. Samples get
// their image_path set.
void save_corpus(Corpus& corpus, const std::string& root);
// One JSON object per line; throws ParseError naming the line on bad records.
void save_manifest(const Corpus& corpus, const std::string& path);
// Records only (images are left empty).
Corpus load_manifest(const std::string& path);
// Manifest plus PNG images; IoError names the missing image and its line.
Corpus load_corpus(const std::string& manifest_path);

struct Batch {
    Tensor images; // [B, 3, H, W]
    std::vector<std::vector<RegionAnnotation>> regions;
    std::vector<std::size_t> indices;
    int annotated = 0; // samples drawn from the annotated pool
};

// Deterministic shuffling per epoch. With annotated_fraction < 0 every
// sample is drawn from one pool and the epoch remainder is dropped; otherwise
// each batch slot picks the annotated pool with that probability and each
// pool cycles through its own shuffled epochs.
class BatchIterator {
public:
    BatchIterator(const Corpus& corpus, int batch_size, std::uint64_t seed, double annotated_fraction = -1.0);

    Batch next();
    std::string state() const;
    void restore(const std::string& state);

    int batch_size() const { return batch_size_; }
    std::size_t batches_per_epoch() const;

private:
    struct Pool {
        std::vector<std::size_t> members;
        std::vector<std::size_t> order;
        std::uint64_t epoch = 0;
        std::size_t cursor = 0;
    };
    std::size_t draw(Pool& pool, std::size_t pool_id);
    void reshuffle(Pool& pool, std::size_t pool_id);

    const Corpus* corpus_;
    int batch_size_;
    std::uint64_t seed_;
    double annotated_fraction_;
    std::vector<Pool> pools_;
    Rng mix_rng_;
};

} // namespace regiontok::data
