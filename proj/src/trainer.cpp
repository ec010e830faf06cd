#include "regiontok/trainer.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/serialize.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace regiontok::trainer {

using nlohmann::json;

const char* to_string(StageKind kind) {
    switch (kind) {
    case StageKind::Pretrain: return "pretrain";
    case StageKind::TextFace: return "text_face";
    case StageKind::DecoderFinetune: return "decoder_ft";
    }
    return "pretrain";
}

StageKind stage_kind_from_string(const std::string& s) {
    if (s == "pretrain") return StageKind::Pretrain;
    if (s == "text_face") return StageKind::TextFace;
    if (s == "decoder_ft") return StageKind::DecoderFinetune;
    throw ValueError("unknown stage kind '" + s + "' (expected pretrain, text_face or decoder_ft)");
}

Stage Stage::pretrain(long long steps) {
    Stage s;
    s.kind = StageKind::Pretrain;
    s.steps = steps;
    s.weights.alpha_text = 0.0;
    s.weights.alpha_face = 0.0;
    s.gan_warmup_fraction = 0.1;
    return s;
}

Stage Stage::text_face(long long steps) {
    Stage s;
    s.kind = StageKind::TextFace;
    s.steps = steps;
    s.annotated_fraction = 0.8;
    return s;
}

Stage Stage::decoder_finetune(long long steps) {
    Stage s;
    s.kind = StageKind::DecoderFinetune;
    s.steps = steps;
    s.weights.alpha_text = 0.1;
    s.weights.alpha_face = 0.1;
    s.mask.encoder = false;
    s.mask.quantizer = false;
    s.annotated_fraction = 0.8;
    return s;
}

StageSchedule StageSchedule::standard(long long pretrain, long long text_face, long long decoder_ft) {
    return {{Stage::pretrain(pretrain), Stage::text_face(text_face), Stage::decoder_finetune(decoder_ft)}};
}

long long StageSchedule::total_steps() const {
    long long n = 0;
    for (const auto& s : stages) n += s.steps;
    return n;
}

// ---------------------------------------------------------------- config

std::vector<std::string> TrainConfig::validation_errors() const {
    std::vector<std::string> e;
    const auto& m = model;
    if (m.downsample < 1 || (m.downsample & (m.downsample - 1)) != 0) e.push_back("model.downsample must be a power of two");
    if (m.base_width < 1) e.push_back("model.base_width must be >= 1");
    if (m.res_blocks < 1) e.push_back("model.res_blocks must be >= 1");
    if (m.codebook_size < 1) e.push_back("model.codebook_size must be >= 1");
    if (m.embed_dim < 1) e.push_back("model.embed_dim must be >= 1");
    if (!(m.ema_mu > 0.0 && m.ema_mu <= 1.0)) e.push_back("model.ema_mu must lie in (0, 1]");
    if (disc.base_width < 1) e.push_back("discriminator.base_width must be >= 1");
    if (disc.layers < 1) e.push_back("discriminator.layers must be >= 1");
    if (!(optim.lr > 0.0)) e.push_back("optimizer.lr must be > 0");
    if (!(optim.disc_lr > 0.0)) e.push_back("optimizer.disc_lr must be > 0");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) e.push_back("optimizer.beta1 must lie in [0, 1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) e.push_back("optimizer.beta2 must lie in [0, 1)");
    if (!(optim.clip_norm > 0.0)) e.push_back("optimizer.clip_norm must be > 0");
    if (!(optim.weight_decay >= 0.0)) e.push_back("optimizer.weight_decay must be >= 0");
    if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction < 1.0))
        e.push_back("optimizer.warmup_fraction must lie in [0, 1)");
    for (const auto& [name, x] : {std::pair<const char*, const ExtractorSettings*>{"image", &perceptual.image},
                                  {"text", &perceptual.text},
                                  {"face", &perceptual.face}}) {
        if (x->layers < 1) e.push_back(std::string("perceptual.") + name + ".layers must be >= 1");
        if (x->kind == perceptual::ExtractorKind::External && x->path.empty())
            e.push_back(std::string("perceptual.") + name + ".path is required for external extractors");
    }
    if (perceptual.region.min_region_size < 0) e.push_back("perceptual.min_region_size must be >= 0");
    if (batch_size < 1) e.push_back("batch_size must be >= 1");
    if (image_height < 1 || image_width < 1) e.push_back("image_size must be positive");
    else if (m.downsample >= 1 && (image_height % m.downsample != 0 || image_width % m.downsample != 0))
        e.push_back("image_size must be divisible by model.downsample");
    for (std::size_t i = 0; i < schedule.stages.size(); ++i) {
        const auto& s = schedule.stages[i];
        const std::string p = "schedule[" + std::to_string(i) + "]";
        if (s.steps < 0) e.push_back(p + ".steps must be >= 0");
        const auto& w = s.weights;
        for (const auto& [name, v] : {std::pair<const char*, double>{"beta", w.beta},
                                      {"gamma", w.gamma},
                                      {"eta", w.eta},
                                      {"alpha_text", w.alpha_text},
                                      {"alpha_face", w.alpha_face}})
            if (!(v >= 0.0) || !std::isfinite(v)) e.push_back(p + ".weights." + name + " must be finite and >= 0");
        if (s.kind == StageKind::Pretrain && (w.alpha_text != 0.0 || w.alpha_face != 0.0))
            e.push_back(p + ": pretrain stages must have alpha_text = alpha_face = 0");
        if (s.kind == StageKind::DecoderFinetune && (s.mask.encoder || s.mask.quantizer))
            e.push_back(p + ": decoder_ft stages must freeze the encoder and the quantizer");
        if (s.annotated_fraction > 1.0) e.push_back(p + ".annotated_fraction must be <= 1");
        if (!(s.gan_warmup_fraction >= 0.0 && s.gan_warmup_fraction <= 1.0))
            e.push_back(p + ".gan_warmup_fraction must lie in [0, 1]");
        if (s.lr && !(*s.lr > 0.0)) e.push_back(p + ".lr must be > 0");
    }
    return e;
}

void TrainConfig::validate() const {
    const auto errors = validation_errors();
    if (errors.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ValueError(msg);
}

std::string TrainConfig::fingerprint() const {
    std::ostringstream os;
    os << model.fingerprint() << ";mu=" << model.ema_mu << ";disc=" << disc.base_width << "x" << disc.layers
       << ";img=" << image_height << "x" << image_width;
    return os.str();
}

namespace {

const char* kind_name(perceptual::ExtractorKind k) {
    switch (k) {
    case perceptual::ExtractorKind::Identity: return "identity";
    case perceptual::ExtractorKind::SeededRandomConv: return "seeded_random_conv";
    case perceptual::ExtractorKind::External: return "external";
    }
    return "identity";
}

json extractor_json(const ExtractorSettings& x) {
    return {{"kind", kind_name(x.kind)}, {"seed", x.seed}, {"layers", x.layers}, {"path", x.path}};
}

json weights_json(const LossWeights& w) {
    return {{"beta", w.beta}, {"gamma", w.gamma}, {"eta", w.eta}, {"alpha_text", w.alpha_text}, {"alpha_face", w.alpha_face}};
}

json mask_json(const ComponentMask& m) {
    return {{"encoder", m.encoder}, {"quantizer", m.quantizer}, {"decoder", m.decoder}, {"discriminator", m.discriminator}};
}

// Reads typed fields out of a JSON object, collecting every problem.
class FieldReader {
public:
    explicit FieldReader(std::vector<std::string>& errors) : errors_(errors) {}

    template <typename T>
    void read(const json& obj, const char* key, const std::string& path, T& out) {
        if (!obj.contains(key)) return;
        const json& v = obj[key];
        const std::string where = path.empty() ? key : path + "." + key;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw std::runtime_error("expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw std::runtime_error("expected an integer");
                if constexpr (std::is_unsigned_v<T>) {
                    if (v.is_number_integer() && !v.is_number_unsigned()) throw std::runtime_error("expected a nonnegative integer");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw std::runtime_error("expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw std::runtime_error("expected a string");
            }
            out = v.get<T>();
        } catch (const std::exception& e) {
            errors_.push_back(where + ": " + e.what());
        }
    }

    void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
        if (!obj.is_object()) {
            errors_.push_back((path.empty() ? std::string("config") : path) + ": expected an object");
            return;
        }
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [k, v] : obj.items())
            if (!ok.count(k)) errors_.push_back((path.empty() ? k : path + "." + k) + ": unknown key");
    }

private:
    std::vector<std::string>& errors_;
};

void read_extractor(FieldReader& r, std::vector<std::string>& errors, const json& j, const std::string& path,
                    ExtractorSettings& x) {
    r.check_keys(j, path, {"kind", "seed", "layers", "path"});
    if (!j.is_object()) return;
    std::string kind = kind_name(x.kind);
    r.read(j, "kind", path, kind);
    if (kind == "identity") x.kind = perceptual::ExtractorKind::Identity;
    else if (kind == "seeded_random_conv") x.kind = perceptual::ExtractorKind::SeededRandomConv;
    else if (kind == "external") x.kind = perceptual::ExtractorKind::External;
    else errors.push_back(path + ".kind: unknown extractor kind '" + kind + "'");
    r.read(j, "seed", path, x.seed);
    r.read(j, "layers", path, x.layers);
    r.read(j, "path", path, x.path);
}

} // namespace

std::string TrainConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["batch_size"] = batch_size;
    j["image_size"] = {image_height, image_width};
    j["train_manifest"] = train_manifest;
    j["output_dir"] = output_dir;
    j["model"] = {{"downsample", model.downsample}, {"base_width", model.base_width}, {"res_blocks", model.res_blocks},
                  {"codebook_size", model.codebook_size}, {"embed_dim", model.embed_dim}, {"ema_mu", model.ema_mu},
                  {"seed", model.seed}};
    j["discriminator"] = {{"base_width", disc.base_width}, {"layers", disc.layers}, {"seed", disc.seed}};
    j["optimizer"] = {{"lr", optim.lr},
                      {"disc_lr", optim.disc_lr},
                      {"beta1", optim.beta1},
                      {"beta2", optim.beta2},
                      {"clip_norm", optim.clip_norm},
                      {"weight_decay", optim.weight_decay},
                      {"warmup_fraction", optim.warmup_fraction}};
    j["perceptual"] = {{"image", extractor_json(perceptual.image)},
                       {"text", extractor_json(perceptual.text)},
                       {"face", extractor_json(perceptual.face)},
                       {"area_weighting", perceptual.region.area_weighting},
                       {"min_region_size", perceptual.region.min_region_size},
                       {"region_losses", perceptual.region_losses}};
    json stages = json::array();
    for (const auto& s : schedule.stages) {
        json o{{"kind", to_string(s.kind)},
               {"steps", s.steps},
               {"weights", weights_json(s.weights)},
               {"mask", mask_json(s.mask)},
               {"annotated_fraction", s.annotated_fraction},
               {"gan_warmup_fraction", s.gan_warmup_fraction}};
        if (s.lr) o["lr"] = *s.lr;
        stages.push_back(o);
    }
    j["schedule"] = stages;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValueError(std::string("config is not valid JSON: ") + e.what());
    }
    std::vector<std::string> errors;
    FieldReader r(errors);
    TrainConfig c;
    r.check_keys(j, "", {"seed", "batch_size", "image_size", "train_manifest", "output_dir", "model", "discriminator",
                         "optimizer", "perceptual", "schedule"});
    if (!j.is_object()) throw ValueError("config must be a JSON object");
    r.read(j, "seed", "", c.seed);
    r.read(j, "batch_size", "", c.batch_size);
    r.read(j, "train_manifest", "", c.train_manifest);
    r.read(j, "output_dir", "", c.output_dir);
    if (j.contains("image_size")) {
        const auto& s = j["image_size"];
        if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer())
            errors.push_back("image_size: expected [height, width]");
        else {
            c.image_height = s[0].get<int>();
            c.image_width = s[1].get<int>();
        }
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        r.check_keys(m, "model", {"downsample", "base_width", "res_blocks", "codebook_size", "embed_dim", "ema_mu", "seed"});
        if (m.is_object()) {
            r.read(m, "downsample", "model", c.model.downsample);
            r.read(m, "base_width", "model", c.model.base_width);
            r.read(m, "res_blocks", "model", c.model.res_blocks);
            r.read(m, "codebook_size", "model", c.model.codebook_size);
            r.read(m, "embed_dim", "model", c.model.embed_dim);
            r.read(m, "ema_mu", "model", c.model.ema_mu);
            r.read(m, "seed", "model", c.model.seed);
        }
    }
    if (j.contains("discriminator")) {
        const auto& d = j["discriminator"];
        r.check_keys(d, "discriminator", {"base_width", "layers", "seed"});
        if (d.is_object()) {
            r.read(d, "base_width", "discriminator", c.disc.base_width);
            r.read(d, "layers", "discriminator", c.disc.layers);
            r.read(d, "seed", "discriminator", c.disc.seed);
        }
    }
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        r.check_keys(o, "optimizer", {"lr", "disc_lr", "beta1", "beta2", "clip_norm", "weight_decay", "warmup_fraction"});
        if (o.is_object()) {
            r.read(o, "lr", "optimizer", c.optim.lr);
            r.read(o, "disc_lr", "optimizer", c.optim.disc_lr);
            r.read(o, "beta1", "optimizer", c.optim.beta1);
            r.read(o, "beta2", "optimizer", c.optim.beta2);
            r.read(o, "clip_norm", "optimizer", c.optim.clip_norm);
            r.read(o, "weight_decay", "optimizer", c.optim.weight_decay);
            r.read(o, "warmup_fraction", "optimizer", c.optim.warmup_fraction);
        }
    }
    if (j.contains("perceptual")) {
        const auto& p = j["perceptual"];
        r.check_keys(p, "perceptual", {"image", "text", "face", "area_weighting", "min_region_size", "region_losses"});
        if (p.is_object()) {
            if (p.contains("image")) read_extractor(r, errors, p["image"], "perceptual.image", c.perceptual.image);
            if (p.contains("text")) read_extractor(r, errors, p["text"], "perceptual.text", c.perceptual.text);
            if (p.contains("face")) read_extractor(r, errors, p["face"], "perceptual.face", c.perceptual.face);
            r.read(p, "area_weighting", "perceptual", c.perceptual.region.area_weighting);
            r.read(p, "min_region_size", "perceptual", c.perceptual.region.min_region_size);
            r.read(p, "region_losses", "perceptual", c.perceptual.region_losses);
        }
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        if (!s.is_array()) errors.push_back("schedule: expected an array of stages");
        else {
            c.schedule.stages.clear();
            for (std::size_t i = 0; i < s.size(); ++i) {
                const std::string p = "schedule[" + std::to_string(i) + "]";
                const auto& o = s[i];
                r.check_keys(o, p, {"kind", "steps", "weights", "mask", "annotated_fraction", "gan_warmup_fraction", "lr"});
                if (!o.is_object()) continue;
                std::string kind = "pretrain";
                r.read(o, "kind", p, kind);
                Stage st;
                try {
                    const StageKind k = stage_kind_from_string(kind);
                    st = k == StageKind::Pretrain ? Stage::pretrain(0)
                         : k == StageKind::TextFace ? Stage::text_face(0)
                                                    : Stage::decoder_finetune(0);
                } catch (const ValueError& e) {
                    errors.push_back(p + ".kind: " + e.what());
                }
                r.read(o, "steps", p, st.steps);
                if (o.contains("weights")) {
                    const auto& w = o["weights"];
                    const std::string wp = p + ".weights";
                    r.check_keys(w, wp, {"beta", "gamma", "eta", "alpha_text", "alpha_face"});
                    if (w.is_object()) {
                        r.read(w, "beta", wp, st.weights.beta);
                        r.read(w, "gamma", wp, st.weights.gamma);
                        r.read(w, "eta", wp, st.weights.eta);
                        r.read(w, "alpha_text", wp, st.weights.alpha_text);
                        r.read(w, "alpha_face", wp, st.weights.alpha_face);
                    }
                }
                if (o.contains("mask")) {
                    const auto& m = o["mask"];
                    const std::string mp = p + ".mask";
                    r.check_keys(m, mp, {"encoder", "quantizer", "decoder", "discriminator"});
                    if (m.is_object()) {
                        r.read(m, "encoder", mp, st.mask.encoder);
                        r.read(m, "quantizer", mp, st.mask.quantizer);
                        r.read(m, "decoder", mp, st.mask.decoder);
                        r.read(m, "discriminator", mp, st.mask.discriminator);
                    }
                }
                r.read(o, "annotated_fraction", p, st.annotated_fraction);
                r.read(o, "gan_warmup_fraction", p, st.gan_warmup_fraction);
                if (o.contains("lr")) {
                    double lr = 0.0;
                    r.read(o, "lr", p, lr);
                    st.lr = lr;
                }
                c.schedule.stages.push_back(st);
            }
        }
    }
    for (auto& e : c.validation_errors()) errors.push_back(std::move(e));
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ValueError(msg);
    }
    return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------- losses

namespace {

perceptual::FeatureExtractor build_extractor(const ExtractorSettings& s, int h, int w) {
    if (s.kind == perceptual::ExtractorKind::External) {
        auto ex = perceptual::load_extractor(s.path);
        if (ex.input_height() != h || ex.input_width() != w)
            throw ConfigMismatchError("external extractor '" + s.path + "' expects " + std::to_string(ex.input_height()) +
                                      "x" + std::to_string(ex.input_width()) + " inputs, need " + std::to_string(h) +
                                      "x" + std::to_string(w));
        return ex;
    }
    return perceptual::make_toy_extractor(s.kind, s.seed, s.layers, h, w);
}

Tensor image_slice(const Tensor& x, int n) {
    const std::size_t per = x.numel() / static_cast<std::size_t>(x.dim(0));
    Tensor out({1, x.dim(1), x.dim(2), x.dim(3)});
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(n * per), x.data.begin() + static_cast<std::ptrdiff_t>((n + 1) * per),
              out.data.begin());
    return out;
}

std::string describe(const LossTerms& t) {
    std::ostringstream os;
    os << "rec=" << t.reconstruction << " commit=" << t.commitment << " perc=" << t.perceptual
       << " gan=" << t.adversarial << " text=" << t.text << " face=" << t.face;
    return os.str();
}

} // namespace

Extractors make_extractors(const PerceptualConfig& config, int image_h, int image_w) {
    Extractors e;
    e.image = build_extractor(config.image, image_h, image_w);
    e.image_weights = perceptual::unit_channel_weights(*e.image);
    if (config.region_losses) {
        e.text = build_extractor(config.text, perceptual::kBannerHeight, perceptual::kBannerWidth);
        e.face = build_extractor(config.face, geometry::kFaceCanvas, geometry::kFaceCanvas);
    }
    e.region = config.region;
    return e;
}

LossResult total_loss(const Tensor& x, const ad::Var& x_hat, const ad::Var& z_rows, const Tensor& zq_rows,
                      const std::vector<std::vector<RegionAnnotation>>& regions, const LossWeights& weights,
                      const Extractors& extractors, const adversarial::Discriminator* discriminator) {
    require_same_shape(x, x_hat.value(), "total_loss");
    const int n = x.dim(0);
    if (regions.size() != static_cast<std::size_t>(n)) throw ShapeError("total_loss: one region list per image is required");
    std::vector<ad::Var> terms;
    std::vector<double> coeffs;
    LossResult out;

    const ad::Var rec = ops::mean(ops::abs(ops::sub(x_hat, ad::constant(x))));
    terms.push_back(rec);
    coeffs.push_back(1.0);
    out.raw.reconstruction = rec.item();

    if (weights.beta > 0.0) {
        const ad::Var c = quantizer::commitment_loss(z_rows, zq_rows);
        terms.push_back(c);
        coeffs.push_back(weights.beta);
        out.raw.commitment = c.item();
    }
    if (weights.gamma > 0.0 && extractors.image) {
        const ad::Var p = perceptual::image_perceptual_loss(x, x_hat, *extractors.image, extractors.image_weights);
        terms.push_back(p);
        coeffs.push_back(weights.gamma);
        out.raw.perceptual = p.item();
    }
    if (weights.eta > 0.0 && discriminator) {
        const ad::Var g = adversarial::g_loss(*discriminator, x_hat);
        terms.push_back(g);
        coeffs.push_back(weights.eta);
        out.raw.adversarial = g.item();
    }
    const auto region_term = [&](RegionKind kind, double alpha, const std::optional<perceptual::FeatureExtractor>& ex,
                                 double& raw) {
        if (alpha <= 0.0 || !ex) return;
        std::vector<ad::Var> per;
        for (int i = 0; i < n; ++i) {
            const auto& rs = regions[static_cast<std::size_t>(i)];
            if (std::none_of(rs.begin(), rs.end(), [&](const RegionAnnotation& r) { return r.kind == kind; })) continue;
            const Tensor xi = image_slice(x, i);
            const ad::Var yi = ops::select_image(x_hat, i);
            per.push_back(kind == RegionKind::Text
                              ? perceptual::text_loss(xi, yi, rs, *ex, extractors.region)
                              : perceptual::face_loss(xi, yi, rs, *ex, extractors.face_template, extractors.region));
        }
        if (per.empty()) return;
        const std::vector<double> avg(per.size(), 1.0 / n);
        const ad::Var t = ops::weighted_sum(per, avg);
        terms.push_back(t);
        coeffs.push_back(alpha);
        raw = t.item();
    };
    region_term(RegionKind::Text, weights.alpha_text, extractors.text, out.raw.text);
    region_term(RegionKind::Face, weights.alpha_face, extractors.face, out.raw.face);

    out.total = ops::weighted_sum(terms, coeffs);
    out.weighted = {out.raw.reconstruction,
                    weights.beta * out.raw.commitment,
                    weights.gamma * out.raw.perceptual,
                    weights.eta * out.raw.adversarial,
                    weights.alpha_text * out.raw.text,
                    weights.alpha_face * out.raw.face};
    return out;
}

// ---------------------------------------------------------------- logging

std::string StepLog::csv_header() {
    return "global_step,stage,stage_step,lr,eta,rec,commit,perc,gan,text,face,total,grad_norm,d_loss,restarts,"
           "utilization,annotated";
}

std::string StepLog::csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << global_step << ',' << stage << ',' << stage_step << ',' << lr << ',' << eta << ',' << raw.reconstruction << ','
       << raw.commitment << ',' << raw.perceptual << ',' << raw.adversarial << ',' << raw.text << ',' << raw.face << ','
       << total << ',' << grad_norm << ',' << d_loss << ',' << restarts << ',' << utilization << ',' << annotated;
    return os.str();
}

// ---------------------------------------------------------------- trainer

namespace {
nn::AdamConfig adam_config(const OptimizerConfig& o) { return {o.beta1, o.beta2, 1e-8, o.weight_decay}; }
} // namespace

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)), tokenizer_((config_.validate(), config_.model)), discriminator_(config_.disc),
      extractors_(make_extractors(config_.perceptual, config_.image_height, config_.image_width)),
      restart_rng_(derive_seed(config_.seed, 0x5E57)) {
    gen_opt_ = nn::Adam(generator_params(), adam_config(config_.optim));
    disc_opt_ = nn::Adam(discriminator_.params(), adam_config(config_.optim));
}

nn::ParamList Trainer::generator_params() const {
    nn::ParamList p;
    p.append("encoder.", tokenizer_.encoder_params());
    p.append("decoder.", tokenizer_.decoder_params());
    return p;
}

StepLog Trainer::train_step(const data::Batch& batch, const Stage& stage, long long stage_step) {
    const Tensor& x = batch.images;
    StepLog log;
    log.stage = position_.stage;
    log.stage_step = stage_step;
    log.annotated = batch.annotated;
    log.lr = nn::cosine_lr(stage.lr.value_or(config_.optim.lr), stage_step, stage.steps, config_.optim.warmup_fraction);
    double ramp = 1.0;
    if (stage.gan_warmup_fraction > 0.0 && stage.steps > 0)
        ramp = std::min(1.0, static_cast<double>(stage_step) / (stage.gan_warmup_fraction * static_cast<double>(stage.steps)));
    LossWeights w = stage.weights;
    w.eta *= ramp;
    if (!config_.perceptual.region_losses) w.alpha_text = w.alpha_face = 0.0;
    log.eta = w.eta;

    const auto fw = tokenizer_.forward(ad::constant(x));
    const auto loss = total_loss(x, fw.reconstruction, fw.latent_rows, fw.assignment.quantized, batch.regions, w,
                                 extractors_, &discriminator_);
    log.raw = loss.raw;
    log.weighted = loss.weighted;
    log.total = loss.total.item();
    if (!std::isfinite(log.total))
        throw NonFiniteError("non-finite loss at step " + std::to_string(position_.global_step) + ": " + describe(loss.raw));

    nn::ParamList gen = generator_params();
    const nn::ParamList dparams = discriminator_.params();
    gen.zero_grad();
    loss.total.backward();
    const std::size_t n_enc = tokenizer_.encoder_params().size();
    std::vector<bool> trainable(gen.size());
    nn::ParamList active;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        trainable[i] = i < n_enc ? stage.mask.encoder : stage.mask.decoder;
        if (trainable[i]) active.add(gen.items()[i].first, gen.items()[i].second);
        else gen.items()[i].second.zero_grad();
    }
    log.grad_norm = nn::clip_grad_norm(active, config_.optim.clip_norm);
    if (!std::isfinite(log.grad_norm))
        throw NonFiniteError("non-finite gradient norm at step " + std::to_string(position_.global_step));
    gen_opt_.step(gen, log.lr, trainable);
    gen.zero_grad();

    nn::ParamList dp = dparams;
    dp.zero_grad();
    if (stage.weights.eta > 0.0 && stage.mask.discriminator) {
        const ad::Var real = discriminator_(ad::constant(x));
        const ad::Var fake = discriminator_(ad::constant(fw.reconstruction.value()));
        const ad::Var dl = ops::add(adversarial::hinge_d_loss(real, fake),
                                    ops::scale(adversarial::lecam_penalty(real, fake, lecam_), adversarial::kLeCamWeight));
        log.d_loss = dl.item();
        if (!std::isfinite(log.d_loss))
            throw NonFiniteError("non-finite discriminator loss at step " + std::to_string(position_.global_step));
        dl.backward();
        nn::clip_grad_norm(dp, config_.optim.clip_norm);
        const double dlr = nn::cosine_lr(config_.optim.disc_lr, stage_step, stage.steps, config_.optim.warmup_fraction);
        disc_opt_.step(dp, dlr);
        dp.zero_grad();
        const auto mean = [](const Tensor& t) {
            double s = 0.0;
            for (double v : t.data) s += v;
            return s / static_cast<double>(t.numel());
        };
        lecam_ = adversarial::lecam_update(lecam_, mean(real.value()), mean(fake.value()));
    }

    if (stage.mask.quantizer) {
        const Tensor& rows = fw.latent_rows.value();
        quantizer::ema_update(tokenizer_.codebook(), rows, fw.assignment.indices);
        log.restarts = quantizer::restart_dead_codes(tokenizer_.codebook(), rows, restart_rng_);
    }
    log.utilization = quantizer::utilization(tokenizer_.codebook(), fw.assignment.indices);
    log.global_step = position_.global_step;
    return log;
}

long long Trainer::run(const data::Corpus& corpus, long long max_steps, const StepCallback& on_step,
                       const StageCallback& on_stage_end) {
    if (corpus.samples.empty()) throw ValueError("training corpus is empty");
    if (corpus.height() != config_.image_height || corpus.width() != config_.image_width)
        throw ShapeError("corpus images are " + std::to_string(corpus.height()) + "x" + std::to_string(corpus.width()) +
                         " but the config expects " + std::to_string(config_.image_height) + "x" +
                         std::to_string(config_.image_width));
    long long done = 0;
    const auto& stages = config_.schedule.stages;
    while (position_.stage < stages.size() && (max_steps < 0 || done < max_steps)) {
        const Stage& stage = stages[position_.stage];
        if (position_.stage_step < stage.steps) {
            data::BatchIterator it(corpus, config_.batch_size, derive_seed(config_.seed, 1000 + position_.stage),
                                   stage.annotated_fraction);
            if (position_.stage_step > 0 && !iterator_state_.empty()) it.restore(iterator_state_);
            spdlog::debug("stage {} ({}) from step {}", position_.stage, to_string(stage.kind), position_.stage_step);
            while (position_.stage_step < stage.steps && (max_steps < 0 || done < max_steps)) {
                const data::Batch batch = it.next();
                const StepLog log = train_step(batch, stage, position_.stage_step);
                iterator_state_ = it.state();
                ++position_.stage_step;
                ++position_.global_step;
                ++done;
                if (on_step) on_step(log);
            }
        }
        if (position_.stage_step >= stage.steps) {
            if (on_stage_end) on_stage_end(position_.stage);
            ++position_.stage;
            position_.stage_step = 0;
            iterator_state_.clear();
        }
    }
    return done;
}

// ---------------------------------------------------------------- checkpoints

namespace {

void write_params(BinaryWriter& w, const nn::ParamList& p) {
    w.u64(p.size());
    for (const auto& [name, v] : p.items()) {
        w.str(name);
        w.tensor(v.value());
    }
}

void read_params(BinaryReader& r, nn::ParamList& p, const std::string& what) {
    const auto n = r.u64();
    if (n != p.size())
        throw ConfigMismatchError(what + ": checkpoint holds " + std::to_string(n) + " tensors, model has " +
                                  std::to_string(p.size()));
    for (auto& [name, v] : p.items()) {
        const std::string stored = r.str();
        Tensor t = r.tensor();
        if (stored != name) throw ConfigMismatchError(what + ": expected tensor '" + name + "', found '" + stored + "'");
        if (t.shape != v.shape())
            throw ConfigMismatchError(what + ": tensor '" + name + "' has shape " + shape_string(t.shape) +
                                      " in the checkpoint, " + shape_string(v.shape()) + " in the model");
        v.mutable_value() = std::move(t);
    }
}

void write_adam(BinaryWriter& w, const nn::Adam& a) {
    w.i64(a.steps());
    w.u64(a.first_moments().size());
    for (std::size_t i = 0; i < a.first_moments().size(); ++i) {
        w.tensor(a.first_moments()[i]);
        w.tensor(a.second_moments()[i]);
    }
}

void read_adam(BinaryReader& r, nn::Adam& a, const std::string& what) {
    a.set_steps(r.i64());
    const auto n = r.u64();
    if (n != a.first_moments().size()) throw ConfigMismatchError(what + ": optimizer state size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        Tensor m = r.tensor(), v = r.tensor();
        if (m.shape != a.first_moments()[i].shape || v.shape != a.second_moments()[i].shape)
            throw ConfigMismatchError(what + ": optimizer moment shape mismatch");
        a.first_moments()[i] = std::move(m);
        a.second_moments()[i] = std::move(v);
    }
}

} // namespace

std::string Trainer::state_bytes() const {
    BinaryWriter w;
    w.str(config_.fingerprint());
    w.str(config_.to_json());
    w.u64(position_.stage);
    w.i64(position_.stage_step);
    w.i64(position_.global_step);
    w.str(iterator_state_);
    w.str(rng_state(restart_rng_));
    w.f64(lecam_.ema_real);
    w.f64(lecam_.ema_fake);
    w.f64(lecam_.decay);
    write_params(w, generator_params());
    write_params(w, discriminator_.params());
    const auto& cb = tokenizer_.codebook();
    w.i64(cb.size);
    w.i64(cb.dim);
    w.f64(cb.mu);
    w.tensor(cb.embeddings);
    w.tensor(cb.cluster_sum);
    w.doubles(cb.cluster_count);
    write_adam(w, gen_opt_);
    write_adam(w, disc_opt_);
    return w.bytes();
}

void Trainer::save_checkpoint(const std::string& path) const {
    write_envelope(path, kCheckpointMagic, kCheckpointVersion, state_bytes());
}

void Trainer::load_checkpoint(const std::string& path) {
    const std::string payload = read_envelope(path, kCheckpointMagic, kCheckpointVersion);
    BinaryReader r(payload);
    const std::string fp = r.str();
    if (fp != config_.fingerprint())
        throw ConfigMismatchError("checkpoint '" + path + "' was written for [" + fp + "], current config is [" +
                                  config_.fingerprint() + "]");
    r.str(); // config snapshot, informational
    Position pos;
    pos.stage = r.u64();
    pos.stage_step = r.i64();
    pos.global_step = r.i64();
    std::string it_state = r.str();
    const std::string rng = r.str();
    adversarial::LeCamState lc;
    lc.ema_real = r.f64();
    lc.ema_fake = r.f64();
    lc.decay = r.f64();
    nn::ParamList gen = generator_params();
    read_params(r, gen, "generator");
    nn::ParamList dp = discriminator_.params();
    read_params(r, dp, "discriminator");
    auto& cb = tokenizer_.codebook();
    const auto k = r.i64(), d = r.i64();
    if (k != cb.size || d != cb.dim)
        throw ConfigMismatchError("checkpoint codebook is " + std::to_string(k) + "x" + std::to_string(d) + ", model expects " +
                                  std::to_string(cb.size) + "x" + std::to_string(cb.dim));
    cb.mu = r.f64();
    cb.embeddings = r.tensor();
    cb.cluster_sum = r.tensor();
    cb.cluster_count = r.doubles();
    read_adam(r, gen_opt_, "generator optimizer");
    read_adam(r, disc_opt_, "discriminator optimizer");
    if (!r.at_end()) throw ParseError("checkpoint '" + path + "' has trailing data", 0);
    position_ = pos;
    iterator_state_ = std::move(it_state);
    set_rng_state(restart_rng_, rng);
    lecam_ = lc;
}

Trainer Trainer::from_checkpoint(const std::string& path) {
    const std::string payload = read_envelope(path, kCheckpointMagic, kCheckpointVersion);
    BinaryReader r(payload);
    r.str();
    Trainer t(TrainConfig::from_json(r.str()));
    t.load_checkpoint(path);
    return t;
}

} // namespace regiontok::trainer
