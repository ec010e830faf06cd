#include "regiontok/data.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/glyphs.hpp"
#include "regiontok/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace regiontok::data {

namespace fs = std::filesystem;
using geometry::BoundingBox;
using geometry::Point2;
using nlohmann::json;

int Corpus::height() const {
    if (samples.empty()) throw ValueError("corpus is empty");
    return samples.front().image.dim(2);
}

int Corpus::width() const {
    if (samples.empty()) throw ValueError("corpus is empty");
    return samples.front().image.dim(3);
}

void TextCorpusConfig::validate() const {
    if (scales.empty()) throw ValueError("text corpus needs at least one glyph scale");
    const int s = *std::min_element(scales.begin(), scales.end());
    if (s < 1) throw ValueError("glyph scales must be >= 1");
    if (glyphs::kGlyphHeight * s + 2 > height || glyphs::kGlyphWidth * s + 2 > width)
        throw ValueError("glyph size " + std::to_string(glyphs::kGlyphWidth * s) + "x" +
                         std::to_string(glyphs::kGlyphHeight * s) + " exceeds the " + std::to_string(height) + "x" +
                         std::to_string(width) + " image");
    if (min_strings < 1 || max_strings < min_strings) throw ValueError("need 1 <= min_strings <= max_strings");
    if (min_length < 1 || max_length < min_length) throw ValueError("need 1 <= min_length <= max_length");
}

void FaceCorpusConfig::validate() const {
    if (min_faces < 1 || max_faces < min_faces) throw ValueError("need 1 <= min_faces <= max_faces");
    if (!(min_size > 0.0) || max_size < min_size) throw ValueError("need 0 < min_size <= max_size");
    if (max_rotation < 0.0) throw ValueError("max_rotation must be >= 0");
    // Side of the axis-aligned box around the largest square at the worst angle.
    const double theta = jitter ? std::min(max_rotation, std::numbers::pi / 4.0) : 0.0;
    if (max_size * (std::cos(theta) + std::sin(theta)) > std::min(height, width))
        throw ValueError("face size " + std::to_string(max_size) + " does not fit the image under rotation");
}

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1))); }

double gray(const std::array<double, 3>& c) { return (c[0] + c[1] + c[2]) / 3.0; }

std::array<double, 3> random_color(Rng& rng) { return {uniform01(rng), uniform01(rng), uniform01(rng)}; }

bool overlaps(const BoundingBox& a, const std::vector<BoundingBox>& taken) {
    for (const auto& b : taken)
        if (a.x0 < b.x1 + 1 && b.x0 < a.x1 + 1 && a.y0 < b.y1 + 1 && b.y0 < a.y1 + 1) return true;
    return false;
}

double segment_distance(Point2 p, Point2 a, Point2 b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    return std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy);
}

void fill_rect(Tensor& image, const BoundingBox& r, const std::array<double, 3>& color) {
    for (int y = static_cast<int>(r.y0); y < static_cast<int>(r.y1); ++y)
        for (int x = static_cast<int>(r.x0); x < static_cast<int>(r.x1); ++x)
            for (int c = 0; c < 3; ++c) image.at(0, c, y, x) = color[c];
}

BoundingBox canvas_box(const geometry::SimilarityTransform& g, double canvas) {
    BoundingBox b{1e300, 1e300, -1e300, -1e300};
    for (const Point2 corner : {Point2{0, 0}, Point2{canvas, 0}, Point2{0, canvas}, Point2{canvas, canvas}}) {
        const Point2 p = geometry::apply_transform(g, corner);
        b.x0 = std::min(b.x0, p.x);
        b.y0 = std::min(b.y0, p.y);
        b.x1 = std::max(b.x1, p.x);
        b.y1 = std::max(b.y1, p.y);
    }
    return b;
}

// Places one text string; returns false when no free spot was found.
bool place_text(Tensor& image, const TextCorpusConfig& cfg, Rng& rng, std::vector<BoundingBox>& taken, Sample& sample) {
    const int h = image.dim(2), w = image.dim(3);
    std::vector<int> scales;
    for (int s : cfg.scales)
        if (glyphs::kGlyphHeight * s + 2 <= h && glyphs::kGlyphWidth * s + 2 <= w) scales.push_back(s);
    const int scale = scales[uniform_index(rng, scales.size())];
    const int fit = (w - 2 + scale) / (glyphs::kPitch * scale);
    const int length = std::min(uniform_int(rng, cfg.min_length, cfg.max_length), std::max(fit, 1));
    const int tw = (glyphs::kPitch * length - 1) * scale, th = glyphs::kGlyphHeight * scale;
    std::string text;
    for (int i = 0; i < length; ++i) text.push_back(glyphs::alphabet()[uniform_index(rng, glyphs::alphabet().size())]);
    std::array<double, 3> plate = random_color(rng), ink = random_color(rng);
    while (std::abs(gray(plate) - gray(ink)) < 0.45) {
        plate = random_color(rng);
        ink = random_color(rng);
    }
    for (auto* c : {&plate, &ink})
        for (double& v : *c) v = std::round(v * 255.0) / 255.0;
    for (int attempt = 0; attempt < 50; ++attempt) {
        const int x = uniform_int(rng, 1, w - 1 - tw), y = uniform_int(rng, 1, h - 1 - th);
        const BoundingBox plate_box{x - 1.0, y - 1.0, x + tw + 1.0, y + th + 1.0};
        if (overlaps(plate_box, taken)) continue;
        fill_rect(image, plate_box, plate);
        glyphs::draw_text(image, text, x, y, scale, ink);
        taken.push_back(plate_box);
        RegionAnnotation r;
        r.kind = RegionKind::Text;
        r.box = glyphs::text_extent(x, y, length, scale);
        r.transcript = text;
        sample.regions.push_back(std::move(r));
        return true;
    }
    return false;
}

bool place_face(Tensor& image, const FaceCorpusConfig& cfg, Rng& rng, std::vector<BoundingBox>& taken, Sample& sample) {
    const int h = image.dim(2), w = image.dim(3);
    SyntheticFaceSpec spec = SyntheticFaceSpec::random(rng);
    const double size = uniform(rng, cfg.min_size, cfg.max_size);
    const double angle = cfg.jitter ? uniform(rng, -cfg.max_rotation, cfg.max_rotation) : 0.0;
    for (int attempt = 0; attempt < 50; ++attempt) {
        auto g = geometry::SimilarityTransform::from_angle(size / spec.canvas, angle, {0.0, 0.0});
        const BoundingBox b0 = canvas_box(g, spec.canvas);
        const double lo_x = -b0.x0, hi_x = w - b0.x1, lo_y = -b0.y0, hi_y = h - b0.y1;
        if (hi_x < lo_x || hi_y < lo_y) return false;
        g.translation = {uniform(rng, lo_x, hi_x), uniform(rng, lo_y, hi_y)};
        if (!cfg.jitter) g.translation = {std::floor(g.translation.x), std::floor(g.translation.y)};
        const BoundingBox b = canvas_box(g, spec.canvas);
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > w || b.y1 > h || overlaps(b, taken)) continue;
        spec.placement = g;
        sample.regions.push_back(render_face(image, spec));
        sample.face_transforms.push_back(g);
        taken.push_back(b);
        return true;
    }
    return false;
}

Sample text_sample(const TextCorpusConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Sample s;
    s.seed = seed;
    s.image = textured_background(cfg.height, cfg.width, rng);
    std::vector<BoundingBox> taken;
    const int n = uniform_int(rng, cfg.min_strings, cfg.max_strings);
    for (int i = 0; i < n; ++i)
        if (!place_text(s.image, cfg, rng, taken, s)) break;
    return s;
}

Sample face_sample(const FaceCorpusConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Sample s;
    s.seed = seed;
    s.image = textured_background(cfg.height, cfg.width, rng);
    std::vector<BoundingBox> taken;
    const int n = uniform_int(rng, cfg.min_faces, cfg.max_faces);
    for (int i = 0; i < n; ++i)
        if (!place_face(s.image, cfg, rng, taken, s)) break;
    return s;
}

} // namespace

SyntheticFaceSpec SyntheticFaceSpec::random(Rng& rng) {
    SyntheticFaceSpec s;
    s.ellipse_center.y = uniform(rng, 62.0, 68.0);
    s.ellipse_rx = uniform(rng, 40.0, 50.0);
    s.ellipse_ry = uniform(rng, 50.0, 58.0);
    s.eye_radius = uniform(rng, 6.0, 10.0);
    s.pupil_radius = uniform(rng, 2.5, 4.5);
    s.nose_radius = uniform(rng, 4.0, 8.0);
    s.mouth_thickness = uniform(rng, 3.0, 8.0);
    s.brow_offset = uniform(rng, 11.0, 16.0);
    const double tone = uniform(rng, 0.35, 0.95);
    s.skin = {tone, tone * uniform(rng, 0.7, 0.85), tone * uniform(rng, 0.5, 0.7)};
    s.pupil = {uniform(rng, 0.0, 0.3), uniform(rng, 0.0, 0.4), uniform(rng, 0.0, 0.5)};
    s.feature = {uniform(rng, 0.2, 0.6), uniform(rng, 0.05, 0.3), uniform(rng, 0.05, 0.25)};
    return s;
}

std::optional<std::array<double, 3>> SyntheticFaceSpec::shade(Point2 u) const {
    const double ex = (u.x - ellipse_center.x) / ellipse_rx, ey = (u.y - ellipse_center.y) / ellipse_ry;
    if (ex * ex + ey * ey > 1.0) return std::nullopt;
    const auto t = geometry::default_face_template();
    for (int e = 0; e < 2; ++e) {
        const double d = std::hypot(u.x - t[e].x, u.y - t[e].y);
        if (d < pupil_radius) return pupil;
        if (d < eye_radius) return eye;
        const Point2 a{t[e].x - 9.0, t[e].y - brow_offset}, b{t[e].x + 9.0, t[e].y - brow_offset - (e ? -2.0 : 2.0)};
        if (segment_distance(u, a, b) < 1.8) return feature;
    }
    if (segment_distance(u, t[3], t[4]) < mouth_thickness / 2.0) return feature;
    if (std::hypot(u.x - t[2].x, u.y - t[2].y) < nose_radius)
        return std::array<double, 3>{skin[0] * 0.7, skin[1] * 0.7, skin[2] * 0.7};
    return skin;
}

RegionAnnotation render_face(Tensor& image, const SyntheticFaceSpec& spec) {
    const int h = image.dim(2), w = image.dim(3);
    const BoundingBox box = canvas_box(spec.placement, spec.canvas);
    const auto inv = geometry::invert_transform(spec.placement);
    const int x0 = std::max(0, static_cast<int>(std::floor(box.x0))), x1 = std::min(w, static_cast<int>(std::ceil(box.x1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.y0))), y1 = std::min(h, static_cast<int>(std::ceil(box.y1)));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            std::array<double, 3> acc{};
            int hits = 0;
            for (double oy : {0.25, 0.75})
                for (double ox : {0.25, 0.75}) {
                    const auto c = spec.shade(geometry::apply_transform(inv, {x + ox, y + oy}));
                    if (!c) continue;
                    ++hits;
                    for (int k = 0; k < 3; ++k) acc[k] += (*c)[k];
                }
            if (hits == 0) continue;
            const double cover = hits / 4.0;
            for (int k = 0; k < 3; ++k)
                image.at(0, k, y, x) = (1.0 - cover) * image.at(0, k, y, x) + acc[k] / 4.0;
        }
    quantize_to_8bit(image);
    RegionAnnotation r;
    r.kind = RegionKind::Face;
    r.box = box;
    geometry::LandmarkSet lm = geometry::default_face_template();
    for (auto& p : lm) p = geometry::apply_transform(spec.placement, p);
    r.landmarks = lm;
    return r;
}

Tensor textured_background(int height, int width, Rng& rng) {
    Tensor img({1, 3, height, width});
    std::array<double, 3> base = random_color(rng);
    for (double& b : base) b = 0.2 + 0.6 * b;
    const double gx = uniform(rng, -0.2, 0.2), gy = uniform(rng, -0.2, 0.2);
    struct Wave {
        double fx, fy, phase;
        std::array<double, 3> amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 3; ++i) {
        const double f = uniform(rng, 0.2, 0.9), theta = uniform(rng, 0.0, std::numbers::pi);
        Wave wv{f * std::cos(theta), f * std::sin(theta), uniform(rng, 0.0, 2.0 * std::numbers::pi), {}};
        for (double& a : wv.amp) a = uniform(rng, 0.05, 0.12);
        waves.push_back(wv);
    }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = base[c] + gx * (x / static_cast<double>(width) - 0.5) + gy * (y / static_cast<double>(height) - 0.5);
                for (const auto& wv : waves) v += wv.amp[c] * std::sin(wv.fx * x + wv.fy * y + wv.phase);
                v += uniform(rng, -0.04, 0.04);
                img.at(0, c, y, x) = std::clamp(v, 0.0, 1.0);
            }
    quantize_to_8bit(img);
    return img;
}

Corpus generate_text_corpus(int n_images, const TextCorpusConfig& config, std::uint64_t seed) {
    if (n_images < 1) throw ValueError("corpus needs n >= 1 images");
    config.validate();
    Corpus c;
    for (int i = 0; i < n_images; ++i) c.samples.push_back(text_sample(config, derive_seed(seed, static_cast<std::uint64_t>(i))));
    return c;
}

Corpus generate_face_corpus(int n_images, const FaceCorpusConfig& config, std::uint64_t seed) {
    if (n_images < 1) throw ValueError("corpus needs n >= 1 images");
    config.validate();
    Corpus c;
    for (int i = 0; i < n_images; ++i) c.samples.push_back(face_sample(config, derive_seed(seed, static_cast<std::uint64_t>(i))));
    return c;
}

Corpus generate_mixed_corpus(int n_images, const MixedCorpusConfig& config, std::uint64_t seed) {
    if (n_images < 1) throw ValueError("corpus needs n >= 1 images");
    config.text.validate();
    config.face.validate();
    if (config.text.height != config.face.height || config.text.width != config.face.width)
        throw ValueError("text and face corpus configs must share the image size");
    if (config.text_only < 0 || config.face_only < 0 || config.plain < 0 ||
        config.text_only + config.face_only + config.plain > 1.0)
        throw ValueError("mixed corpus shares must be nonnegative and sum to at most 1");
    Corpus c;
    for (int i = 0; i < n_images; ++i) {
        const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
        Rng rng(s);
        Sample sample;
        sample.seed = s;
        sample.image = textured_background(config.text.height, config.text.width, rng);
        const double u = uniform01(rng);
        std::vector<BoundingBox> taken;
        if (u < config.text_only) {
            const int n = uniform_int(rng, config.text.min_strings, config.text.max_strings);
            for (int k = 0; k < n; ++k)
                if (!place_text(sample.image, config.text, rng, taken, sample)) break;
        } else if (u < config.text_only + config.face_only) {
            const int n = uniform_int(rng, config.face.min_faces, config.face.max_faces);
            for (int k = 0; k < n; ++k)
                if (!place_face(sample.image, config.face, rng, taken, sample)) break;
        } else if (u >= config.text_only + config.face_only + config.plain) {
            place_face(sample.image, config.face, rng, taken, sample);
            place_text(sample.image, config.text, rng, taken, sample);
        }
        c.samples.push_back(std::move(sample));
    }
    return c;
}

Corpus strip_annotations(Corpus corpus) {
    for (auto& s : corpus.samples) {
        s.regions.clear();
        s.face_transforms.clear();
    }
    return corpus;
}

namespace {

json region_to_json(const RegionAnnotation& r) {
    json j;
    j["kind"] = to_string(r.kind);
    j["box"] = {r.box.x0, r.box.y0, r.box.x1, r.box.y1};
    if (r.landmarks) {
        json lm = json::array();
        for (const auto& p : *r.landmarks) lm.push_back({p.x, p.y});
        j["landmarks"] = lm;
    }
    if (r.transcript) j["transcript"] = *r.transcript;
    return j;
}

double number(const json& j, const char* what, std::size_t line) {
    if (!j.is_number()) throw ParseError(std::string(what) + " must be a number", line);
    return j.get<double>();
}

RegionAnnotation region_from_json(const json& j, std::size_t line) {
    if (!j.is_object()) throw ParseError("region must be an object", line);
    RegionAnnotation r;
    if (!j.contains("kind") || !j["kind"].is_string()) throw ParseError("region is missing its kind", line);
    try {
        r.kind = region_kind_from_string(j["kind"].get<std::string>());
    } catch (const ValueError& e) {
        throw ParseError(e.what(), line);
    }
    if (!j.contains("box") || !j["box"].is_array() || j["box"].size() != 4)
        throw ParseError("region box must be [x0, y0, x1, y1]", line);
    r.box = {number(j["box"][0], "box", line), number(j["box"][1], "box", line), number(j["box"][2], "box", line),
             number(j["box"][3], "box", line)};
    if (j.contains("landmarks")) {
        const auto& lm = j["landmarks"];
        if (!lm.is_array() || lm.size() != 5)
            throw ParseError("expected 5 landmarks, got " + std::to_string(lm.is_array() ? lm.size() : 0), line);
        geometry::LandmarkSet set;
        for (std::size_t k = 0; k < 5; ++k) {
            if (!lm[k].is_array() || lm[k].size() != 2) throw ParseError("landmark must be [x, y]", line);
            set[k] = {number(lm[k][0], "landmark", line), number(lm[k][1], "landmark", line)};
        }
        r.landmarks = set;
    }
    if (j.contains("transcript")) {
        if (!j["transcript"].is_string()) throw ParseError("transcript must be a string", line);
        r.transcript = j["transcript"].get<std::string>();
    }
    try {
        validate(r);
    } catch (const ValueError& e) {
        throw ParseError(e.what(), line);
    }
    return r;
}

} // namespace

void save_manifest(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& s : corpus.samples) {
        json j;
        j["version"] = kManifestVersion;
        j["image"] = s.image_path;
        j["split"] = s.split;
        j["seed"] = s.seed;
        json regions = json::array();
        for (const auto& r : s.regions) regions.push_back(region_to_json(r));
        j["regions"] = regions;
        if (!s.face_transforms.empty()) {
            json ft = json::array();
            for (const auto& t : s.face_transforms)
                ft.push_back({{"scale", t.scale}, {"rotation", t.rotation}, {"translation", {t.translation.x, t.translation.y}}});
            j["face_transforms"] = ft;
        }
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing '" + path + "'");
}

Corpus load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");
    Corpus c;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), line);
        }
        if (!j.is_object()) throw ParseError("record must be a JSON object", line);
        if (!j.contains("version") || !j["version"].is_number_integer())
            throw ParseError("record is missing its version", line);
        if (j["version"].get<int>() != kManifestVersion)
            throw ParseError("unsupported manifest version " + std::to_string(j["version"].get<int>()), line);
        if (!j.contains("image") || !j["image"].is_string()) throw ParseError("record is missing its image path", line);
        if (!j.contains("regions") || !j["regions"].is_array()) throw ParseError("record is missing its regions", line);
        Sample s;
        s.image_path = j["image"].get<std::string>();
        if (j.contains("split")) s.split = j["split"].get<std::string>();
        if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
        for (const auto& r : j["regions"]) s.regions.push_back(region_from_json(r, line));
        if (j.contains("face_transforms")) {
            for (const auto& t : j["face_transforms"]) {
                geometry::SimilarityTransform g;
                try {
                    g.scale = t.at("scale").get<double>();
                    g.rotation = t.at("rotation").get<std::array<double, 4>>();
                    const auto tr = t.at("translation").get<std::array<double, 2>>();
                    g.translation = {tr[0], tr[1]};
                } catch (const json::exception& e) {
                    throw ParseError(std::string("bad face transform: ") + e.what(), line);
                }
                s.face_transforms.push_back(g);
            }
        }
        c.samples.push_back(std::move(s));
    }
    return c;
}

void save_corpus(Corpus& corpus, const std::string& root) {
    fs::create_directories(fs::path(root) / "images");
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "images/%06zu.png", i);
        corpus.samples[i].image_path = name;
        write_png((fs::path(root) / name).string(), corpus.samples[i].image);
    }
    save_manifest(corpus, (fs::path(root) / "manifest.jsonl").string());
}

Corpus load_corpus(const std::string& manifest_path) {
    Corpus c = load_manifest(manifest_path);
    const fs::path dir = fs::path(manifest_path).parent_path();
    for (std::size_t i = 0; i < c.samples.size(); ++i) {
        const fs::path p = dir / c.samples[i].image_path;
        if (!fs::exists(p))
            throw IoError("record " + std::to_string(i + 1) + ": image '" + p.string() + "' does not exist");
        c.samples[i].image = read_png(p.string());
    }
    return c;
}

BatchIterator::BatchIterator(const Corpus& corpus, int batch_size, std::uint64_t seed, double annotated_fraction)
    : corpus_(&corpus), batch_size_(batch_size), seed_(seed), annotated_fraction_(annotated_fraction),
      mix_rng_(derive_seed(seed, 0xB1A5)) {
    if (corpus.samples.empty()) throw ValueError("batch iterator: empty corpus");
    if (batch_size < 1) throw ValueError("batch iterator: batch_size must be >= 1");
    if (annotated_fraction > 1.0) throw ValueError("batch iterator: annotated_fraction must be <= 1");
    if (annotated_fraction < 0.0) {
        if (corpus.samples.size() < static_cast<std::size_t>(batch_size))
            throw ValueError("batch iterator: corpus smaller than one batch");
        pools_.resize(1);
        for (std::size_t i = 0; i < corpus.samples.size(); ++i) pools_[0].members.push_back(i);
    } else {
        pools_.resize(2);
        for (std::size_t i = 0; i < corpus.samples.size(); ++i)
            pools_[corpus.samples[i].regions.empty() ? 1 : 0].members.push_back(i);
    }
    for (std::size_t p = 0; p < pools_.size(); ++p) reshuffle(pools_[p], p);
}

void BatchIterator::reshuffle(Pool& pool, std::size_t pool_id) {
    pool.order = pool.members;
    Rng rng(derive_seed(seed_, pool.epoch * 16 + pool_id));
    for (std::size_t i = pool.order.size(); i > 1; --i) std::swap(pool.order[i - 1], pool.order[uniform_index(rng, i)]);
}

std::size_t BatchIterator::draw(Pool& pool, std::size_t pool_id) {
    if (pool.cursor >= pool.order.size()) {
        ++pool.epoch;
        pool.cursor = 0;
        reshuffle(pool, pool_id);
    }
    return pool.order[pool.cursor++];
}

std::size_t BatchIterator::batches_per_epoch() const {
    return corpus_->samples.size() / static_cast<std::size_t>(batch_size_);
}

Batch BatchIterator::next() {
    Batch b;
    if (pools_.size() == 1) {
        Pool& p = pools_[0];
        // Drop the remainder so every batch is full.
        if (p.cursor + static_cast<std::size_t>(batch_size_) > p.order.size()) {
            ++p.epoch;
            p.cursor = 0;
            reshuffle(p, 0);
        }
        for (int i = 0; i < batch_size_; ++i) b.indices.push_back(draw(p, 0));
    } else {
        for (int i = 0; i < batch_size_; ++i) {
            std::size_t pick = uniform01(mix_rng_) < annotated_fraction_ ? 0 : 1;
            if (pools_[pick].members.empty()) pick = 1 - pick;
            b.indices.push_back(draw(pools_[pick], pick));
            if (pick == 0) ++b.annotated;
        }
    }
    const auto& first = corpus_->samples[b.indices[0]].image;
    const int h = first.dim(2), w = first.dim(3);
    b.images = Tensor({batch_size_, 3, h, w});
    const std::size_t per = static_cast<std::size_t>(3) * h * w;
    for (int i = 0; i < batch_size_; ++i) {
        const Sample& s = corpus_->samples[b.indices[static_cast<std::size_t>(i)]];
        if (s.image.dim(2) != h || s.image.dim(3) != w)
            throw ShapeError("batch iterator: images in one batch differ in size");
        std::copy(s.image.data.begin(), s.image.data.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(i * per));
        b.regions.push_back(s.regions);
        if (pools_.size() == 1 && !s.regions.empty()) ++b.annotated;
    }
    return b;
}

std::string BatchIterator::state() const {
    std::ostringstream os;
    os << pools_.size();
    for (const auto& p : pools_) os << ' ' << p.epoch << ' ' << p.cursor;
    os << ' ' << mix_rng_;
    return os.str();
}

void BatchIterator::restore(const std::string& state) {
    std::istringstream is(state);
    std::size_t n = 0;
    is >> n;
    if (!is || n != pools_.size()) throw ValueError("batch iterator state does not match this iterator");
    for (std::size_t p = 0; p < n; ++p) {
        is >> pools_[p].epoch >> pools_[p].cursor;
        reshuffle(pools_[p], p);
    }
    is >> mix_rng_;
    if (!is) throw ValueError("batch iterator state is malformed");
}

} // namespace regiontok::data
