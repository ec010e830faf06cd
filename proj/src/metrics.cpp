#include "regiontok/metrics.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/glyphs.hpp"
#include "regiontok/ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

namespace regiontok::metrics {

int levenshtein(std::string_view a, std::string_view b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double ned(std::string_view s, std::string_view s_hat) {
    if (s.empty() && s_hat.empty()) throw ValueError("ned is undefined for two empty strings");
    return 1.0 - static_cast<double>(levenshtein(s, s_hat)) / static_cast<double>(std::max(s.size(), s_hat.size()));
}

std::string normalize_text(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    std::string out(s.substr(b, e - b + 1));
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

int t_acc(std::string_view s, std::string_view s_hat) { return normalize_text(s) == normalize_text(s_hat) ? 1 : 0; }

double f_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ValueError("f_sim: embedding lengths differ");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw ValueError("f_sim: zero embedding");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

namespace {
double psnr_from_mse(double mse) { return mse <= 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)); }
} // namespace

double psnr(const Tensor& x, const Tensor& x_hat) {
    require_same_shape(x, x_hat, "psnr");
    if (x.numel() == 0) throw ShapeError("psnr: empty images");
    double se = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) se += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
    return psnr_from_mse(se / static_cast<double>(x.numel()));
}

std::optional<double> masked_psnr(const Tensor& x, const Tensor& x_hat, const std::vector<bool>& mask) {
    require_same_shape(x, x_hat, "masked_psnr");
    const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (mask.size() != static_cast<std::size_t>(h) * w) throw ShapeError("masked_psnr: mask size");
    double se = 0.0;
    std::size_t count = 0;
    for (int n = 0; n < x.dim(0); ++n)
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    if (!mask[static_cast<std::size_t>(y) * w + xx]) continue;
                    const double d = x.at(n, ch, y, xx) - x_hat.at(n, ch, y, xx);
                    se += d * d;
                    ++count;
                }
    if (count == 0) return std::nullopt;
    return psnr_from_mse(se / static_cast<double>(count));
}

double bpp(long long tokens, long long codebook_size, int height, int width) {
    if (tokens < 1 || codebook_size < 1 || height < 1 || width < 1) throw ValueError("bpp: arguments must be positive");
    return static_cast<double>(tokens) * std::log2(static_cast<double>(codebook_size)) /
           (static_cast<double>(height) * width);
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

const char* to_string(SizeGroup g) {
    switch (g) {
    case SizeGroup::Small: return "small";
    case SizeGroup::Medium: return "medium";
    case SizeGroup::Large: return "large";
    }
    return "medium";
}

SizeGroup size_group(double area_fraction, const SizeThresholds& t) {
    if (area_fraction < t.small) return SizeGroup::Small;
    if (area_fraction > t.large) return SizeGroup::Large;
    return SizeGroup::Medium;
}

FaceEmbedder::FaceEmbedder(perceptual::FeatureExtractor extractor, int layer, geometry::LandmarkSet face_template)
    : extractor_(std::move(extractor)), layer_(layer), template_(face_template) {
    const int l = extractor_.layer_count();
    if (layer_ < 0) layer_ += l;
    if (layer_ < 0 || layer_ >= l) throw ValueError("face embedder: layer index out of range");
}

std::vector<double> FaceEmbedder::embed(const Tensor& image, const RegionAnnotation& face) const {
    const ad::Var canvas = perceptual::face_region_extract(ad::constant(image), face, template_,
                                                           extractor_.input_height(), extractor_.input_width());
    const Tensor f = extractor_.features(canvas)[static_cast<std::size_t>(layer_)].value();
    const int c = f.dim(1);
    const std::size_t hw = static_cast<std::size_t>(f.dim(2)) * f.dim(3);
    std::vector<double> e(f.data.begin(), f.data.end());
    for (int ch = 0; ch < c; ++ch) {
        double m = 0.0;
        for (std::size_t i = 0; i < hw; ++i) m += e[ch * hw + i];
        m /= static_cast<double>(hw);
        for (std::size_t i = 0; i < hw; ++i) e[ch * hw + i] -= m;
    }
    return e;
}

FaceEmbedder default_face_embedder(std::uint64_t seed) {
    return FaceEmbedder(perceptual::make_toy_extractor(perceptual::ExtractorKind::SeededRandomConv, seed, 5,
                                                       geometry::kFaceCanvas, geometry::kFaceCanvas));
}

namespace {

std::optional<double> mean_if(const std::vector<InstanceRecord>& recs, RegionKind kind, bool small_only,
                              double InstanceRecord::*field) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : recs) {
        if (r.kind != kind || (small_only && r.group != SizeGroup::Small)) continue;
        s += r.*field;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

std::string fmt(const std::optional<double>& v, double scale, int prec) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", prec, *v * scale);
    return buf;
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

} // namespace

void aggregate(MetricReport& report) {
    const auto& r = report.records;
    report.t_acc_s = mean_if(r, RegionKind::Text, true, &InstanceRecord::value);
    report.t_acc_m = mean_if(r, RegionKind::Text, false, &InstanceRecord::value);
    report.t_ned_s = mean_if(r, RegionKind::Text, true, &InstanceRecord::ned);
    report.t_ned_m = mean_if(r, RegionKind::Text, false, &InstanceRecord::ned);
    report.f_sim_s = mean_if(r, RegionKind::Face, true, &InstanceRecord::value);
    report.f_sim_m = mean_if(r, RegionKind::Face, false, &InstanceRecord::value);
}

MetricReport evaluate_images(const data::Corpus& corpus, const std::vector<Tensor>& reconstructions,
                             const FaceEmbedder& embedder, const EvalOptions& options) {
    if (reconstructions.size() != corpus.samples.size())
        throw ShapeError("evaluate_images: one reconstruction per sample is required");
    MetricReport rep;
    rep.images = corpus.samples.size();
    double psnr_sum = 0.0, bg_sum = 0.0;
    std::size_t bg_count = 0;
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        const auto& s = corpus.samples[i];
        const Tensor& x = s.image;
        const Tensor& y = reconstructions[i];
        require_same_shape(x, y, "evaluate_images");
        const int h = x.dim(2), w = x.dim(3);
        psnr_sum += psnr(x, y);
        std::vector<bool> background(static_cast<std::size_t>(h) * w, true);
        for (std::size_t k = 0; k < s.regions.size(); ++k) {
            const auto& reg = s.regions[k];
            const auto clipped = geometry::clip_box(reg.box, h, w);
            if (!clipped) continue;
            for (int yy = static_cast<int>(std::floor(clipped->y0)); yy < static_cast<int>(std::ceil(clipped->y1)); ++yy)
                for (int xx = static_cast<int>(std::floor(clipped->x0)); xx < static_cast<int>(std::ceil(clipped->x1)); ++xx)
                    background[static_cast<std::size_t>(yy) * w + xx] = false;
            InstanceRecord rec;
            rec.image = i;
            rec.region = k;
            rec.kind = reg.kind;
            rec.area_fraction = geometry::area_weight(reg.box, h, w);
            rec.group = size_group(rec.area_fraction, options.thresholds);
            if (reg.kind == RegionKind::Text) {
                if (!reg.transcript) continue;
                rec.reference = *reg.transcript;
                rec.recognized = glyphs::recognize(y, reg.box, options.recognition_threshold).text;
                rec.value = t_acc(rec.reference, rec.recognized);
                rec.ned = ned(rec.reference, rec.recognized);
            } else {
                if (!reg.landmarks) continue;
                const auto a = embedder.embed(x, reg), b = embedder.embed(y, reg);
                try {
                    rec.value = f_sim(a, b);
                } catch (const ValueError&) {
                    rec.value = 0.0; // a flat canvas carries no identity
                }
            }
            rep.records.push_back(std::move(rec));
        }
        if (const auto bg = masked_psnr(x, y, background)) {
            bg_sum += *bg;
            ++bg_count;
        }
    }
    rep.psnr = rep.images ? psnr_sum / static_cast<double>(rep.images) : 0.0;
    if (bg_count) rep.background_psnr = bg_sum / static_cast<double>(bg_count);
    aggregate(rep);
    return rep;
}

MetricReport evaluate_reconstruction(const autoencoder::Tokenizer& tokenizer, const data::Corpus& corpus,
                                     const FaceEmbedder& embedder, const EvalOptions& options) {
    std::vector<Tensor> recon;
    std::set<int> used;
    long long tokens = 0;
    constexpr std::size_t chunk = 16;
    for (std::size_t b = 0; b < corpus.samples.size(); b += chunk) {
        const std::size_t e = std::min(corpus.samples.size(), b + chunk);
        std::vector<ad::Var> imgs;
        for (std::size_t i = b; i < e; ++i) imgs.push_back(ad::constant(corpus.samples[i].image));
        const Tensor batch = ops::stack_images(imgs).value();
        const auto grids = tokenizer.tokenize(batch);
        const Tensor out = tokenizer.detokenize(grids);
        const std::size_t per = out.numel() / (e - b);
        for (std::size_t i = 0; i < e - b; ++i) {
            Tensor one(corpus.samples[b + i].image.shape);
            std::copy(out.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                      out.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per), one.data.begin());
            recon.push_back(std::move(one));
            used.insert(grids[i].tokens.begin(), grids[i].tokens.end());
            tokens = static_cast<long long>(grids[i].tokens.size());
        }
    }
    MetricReport rep = evaluate_images(corpus, recon, embedder, options);
    if (!corpus.samples.empty())
        rep.bpp = bpp(tokens, tokenizer.config().codebook_size, corpus.height(), corpus.width());
    rep.utilization = static_cast<double>(used.size()) / tokenizer.config().codebook_size;
    return rep;
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["schema"] = "regiontok-report/1";
    j["images"] = images;
    j["aggregates"] = {{"t_acc_s", opt(t_acc_s)}, {"t_acc_m", opt(t_acc_m)},   {"t_ned_s", opt(t_ned_s)},
                       {"t_ned_m", opt(t_ned_m)}, {"f_sim_s", opt(f_sim_s)},   {"f_sim_m", opt(f_sim_m)},
                       {"psnr", psnr},            {"background_psnr", opt(background_psnr)},
                       {"bpp", bpp},              {"utilization", utilization}};
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json o{{"image", r.image},
                         {"region", r.region},
                         {"kind", regiontok::to_string(r.kind)},
                         {"size_group", to_string(r.group)},
                         {"area_fraction", r.area_fraction},
                         {"value", r.value}};
        if (r.kind == RegionKind::Text) {
            o["reference"] = r.reference;
            o["recognized"] = r.recognized;
            o["ned"] = r.ned;
        }
        recs.push_back(o);
    }
    j["records"] = recs;
    return j.dump(2);
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "image,region,kind,size_group,area_fraction,value,ned,reference,recognized\n";
    for (const auto& r : records)
        os << r.image << ',' << r.region << ',' << regiontok::to_string(r.kind) << ',' << to_string(r.group) << ','
           << r.area_fraction << ',' << r.value << ',' << r.ned << ',' << r.reference << ',' << r.recognized << '\n';
    return os.str();
}

std::string MetricReport::table() const {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-8s %-8s %-8s %-8s %-8s %-8s %-8s %-8s %-8s\n", "T-ACC_s", "T-ACC_m", "T-NED_s",
                  "T-NED_m", "F-Sim_s", "F-Sim_m", "PSNR", "BG-PSNR", "BPP");
    os << buf;
    std::snprintf(buf, sizeof buf, "%-8s %-8s %-8s %-8s %-8s %-8s %-8.2f %-8s %-8.4f\n", fmt(t_acc_s, 100, 2).c_str(),
                  fmt(t_acc_m, 100, 2).c_str(), fmt(t_ned_s, 100, 2).c_str(), fmt(t_ned_m, 100, 2).c_str(),
                  fmt(f_sim_s, 1, 4).c_str(), fmt(f_sim_m, 1, 4).c_str(), psnr, fmt(background_psnr, 1, 2).c_str(),
                  round4(bpp));
    os << buf;
    return os.str();
}

} // namespace regiontok::metrics
