// regiontok command-line interface.
//
// Exit codes: 0 success, 1 validation failure (bad flags, config or inputs),
// 2 runtime failure (I/O, corrupt files, numerical blow-up).

#include "regiontok/errors.hpp"
#include "regiontok/generator.hpp"
#include "regiontok/image_io.hpp"
#include "regiontok/metrics.hpp"
#include "regiontok/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace regiontok;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << text;
    if (!out) throw IoError("write to '" + path + "' failed");
}

// Applies "a.b.c=value" to a JSON document; value is parsed as JSON when
// possible and taken as a string otherwise. Array indices are numeric segments.
void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ValueError("override '" + assignment + "' must look like key.path=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &doc;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const bool last = i + 1 == parts.size();
        const std::string& p = parts[i];
        if (node->is_array()) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(p);
            } catch (const std::exception&) {
                throw ValueError("override '" + key + "': '" + p + "' is not an array index");
            }
            if (idx >= node->size()) throw ValueError("override '" + key + "': index " + p + " out of range");
            node = &(*node)[idx];
        } else {
            if (!node->is_object()) throw ValueError("override '" + key + "': '" + p + "' is not inside an object");
            node = &(*node)[p];
        }
        if (last) *node = value;
    }
}

trainer::TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = path.empty() ? json::parse(trainer::TrainConfig{}.to_json()) : json::object();
    if (!path.empty()) {
        try {
            doc = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            throw ValueError("config '" + path + "' is not valid JSON: " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return trainer::TrainConfig::from_json(doc.dump());
}

// Class prompt of a sample: 0 when it shows text, 1 when it shows a face,
// 2 when it shows neither.
generator::Prompt prompt_for(const data::Sample& s) {
    bool text = false, face = false;
    for (const auto& r : s.regions) (r.kind == RegionKind::Text ? text : face) = true;
    generator::Prompt p;
    if (text) p.push_back(0);
    if (face) p.push_back(1);
    if (p.empty()) p.push_back(2);
    return p;
}

json grid_json(const autoencoder::TokenGrid& g, const autoencoder::Tokenizer& tok) {
    json rows = json::array();
    for (int r = 0; r < g.height; ++r) {
        json row = json::array();
        for (int c = 0; c < g.width; ++c) row.push_back(g.tokens[static_cast<std::size_t>(r) * g.width + c]);
        rows.push_back(row);
    }
    return {{"format", "regiontok-tokens/1"},
            {"height", g.height},
            {"width", g.width},
            {"codebook_size", tok.codebook().size},
            {"downsample", tok.config().downsample},
            {"tokens", rows}};
}

autoencoder::TokenGrid grid_from_json(const std::string& text, const autoencoder::Tokenizer& tok) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValueError(std::string("token file is not valid JSON: ") + e.what());
    }
    if (!j.contains("tokens") || !j["tokens"].is_array()) throw ValueError("token file has no 'tokens' array");
    autoencoder::TokenGrid g;
    const auto& rows = j["tokens"];
    g.height = static_cast<int>(rows.size());
    g.width = g.height ? static_cast<int>(rows[0].size()) : 0;
    if (g.height == 0 || g.width == 0) throw ValueError("token grid is empty");
    for (int r = 0; r < g.height; ++r) {
        if (!rows[r].is_array() || static_cast<int>(rows[r].size()) != g.width)
            throw ValueError("token row " + std::to_string(r) + " does not have " + std::to_string(g.width) + " entries");
        for (int c = 0; c < g.width; ++c) {
            const auto& v = rows[r][c];
            if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<long long>() >= tok.codebook().size)
                throw ValueError("invalid token " + v.dump() + " at (" + std::to_string(r) + ", " + std::to_string(c) +
                                 "); expected an integer in [0, " + std::to_string(tok.codebook().size) + ")");
            g.tokens.push_back(v.get<int>());
        }
    }
    return g;
}

int cmd_gen_data(const std::string& kind, int count, int height, int width, std::uint64_t seed, const std::string& out) {
    if (count < 1) throw ValueError("--count must be >= 1");
    if (height < 8 || width < 8) throw ValueError("--height and --width must be >= 8");
    // Default face sizes suit 32-pixel images; scale them with the requested size.
    const auto scaled_faces = [&] {
        data::FaceCorpusConfig c;
        const double f = std::min(height, width) / 32.0;
        c.height = height;
        c.width = width;
        c.min_size *= f;
        c.max_size *= f;
        return c;
    };
    data::Corpus corpus;
    if (kind == "text") {
        data::TextCorpusConfig c;
        c.height = height;
        c.width = width;
        corpus = data::generate_text_corpus(count, c, seed);
    } else if (kind == "face") {
        corpus = data::generate_face_corpus(count, scaled_faces(), seed);
    } else {
        data::MixedCorpusConfig c;
        c.face = scaled_faces();
        c.text.height = height;
        c.text.width = width;
        corpus = data::generate_mixed_corpus(count, c, seed);
    }
    data::save_corpus(corpus, out);
    std::map<std::string, int> counts;
    const metrics::SizeThresholds thresholds;
    for (const auto& s : corpus.samples)
        for (const auto& r : s.regions) {
            const double frac = r.box.area() / (static_cast<double>(height) * width);
            ++counts[std::string(to_string(r.kind)) + "/" + metrics::to_string(metrics::size_group(frac, thresholds))];
        }
    std::cout << "wrote " << corpus.size() << " images to " << (fs::path(out) / "manifest.jsonl").string() << "\n";
    for (const auto& [k, v] : counts) std::cout << "  " << k << ": " << v << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, manifest, out, resume;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_region_losses = false;
    bool no_area_weighting = false;
    long long max_steps = -1;
};

int cmd_train(const TrainArgs& a) {
    std::vector<std::string> overrides = a.overrides;
    if (a.seed_set) overrides.push_back("seed=" + std::to_string(a.seed));
    if (!a.manifest.empty()) overrides.push_back("train_manifest=" + json(a.manifest).dump());
    if (!a.out.empty()) overrides.push_back("output_dir=" + json(a.out).dump());
    if (a.no_region_losses) overrides.push_back("perceptual.region_losses=false");
    if (a.no_area_weighting) overrides.push_back("perceptual.area_weighting=false");
    trainer::TrainConfig cfg = load_config(a.config, overrides);
    if (cfg.train_manifest.empty()) throw ValueError("train_manifest is not set (use --manifest)");
    if (cfg.output_dir.empty()) throw ValueError("output_dir is not set (use --out)");

    const data::Corpus corpus = data::load_corpus(cfg.train_manifest);
    trainer::Trainer t(cfg);
    if (!a.resume.empty()) t.load_checkpoint(a.resume);
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    write_file((dir / "config.json").string(), cfg.to_json() + "\n");
    if (a.resume.empty()) t.save_checkpoint((dir / "initial.ckpt").string());

    const fs::path log_path = dir / "train_log.csv";
    const bool fresh = a.resume.empty() || !fs::exists(log_path);
    std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write '" + log_path.string() + "'");
    if (fresh) log << trainer::StepLog::csv_header() << "\n";
    const auto on_step = [&](const trainer::StepLog& s) {
        log << s.csv_row() << "\n";
        if (s.global_step % 50 == 0)
            spdlog::info("step {} stage {} total {:.5f} rec {:.5f}", s.global_step, s.stage, s.total, s.raw.reconstruction);
    };
    const auto on_stage_end = [&](std::size_t stage) {
        const auto name = "stage" + std::to_string(stage) + "_" +
                          trainer::to_string(cfg.schedule.stages[stage].kind) + ".ckpt";
        t.save_checkpoint((dir / name).string());
    };
    t.run(corpus, a.max_steps, on_step, on_stage_end);
    log.flush();
    t.save_checkpoint((dir / "latest.ckpt").string());
    std::cout << "trained to global step " << t.position().global_step << "; checkpoint "
              << (dir / "latest.ckpt").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& out, bool identity,
             std::uint64_t embed_seed) {
    const data::Corpus corpus = data::load_corpus(manifest);
    const auto embedder = metrics::default_face_embedder(embed_seed);
    metrics::MetricReport report;
    if (identity) {
        std::vector<Tensor> recons;
        for (const auto& s : corpus.samples) recons.push_back(s.image);
        report = metrics::evaluate_images(corpus, recons, embedder);
    } else {
        if (checkpoint.empty()) throw ValueError("--checkpoint is required unless --identity is given");
        const trainer::Trainer t = trainer::Trainer::from_checkpoint(checkpoint);
        if (corpus.height() != t.config().image_height || corpus.width() != t.config().image_width)
            throw ConfigMismatchError("manifest images are " + std::to_string(corpus.height()) + "x" +
                                      std::to_string(corpus.width()) + " but the checkpoint was trained on " +
                                      std::to_string(t.config().image_height) + "x" +
                                      std::to_string(t.config().image_width));
        report = metrics::evaluate_reconstruction(t.tokenizer(), corpus, embedder);
    }
    // Self-check: aggregates must be reproducible from the records and in range.
    metrics::MetricReport check = report;
    metrics::aggregate(check);
    bool ok = check.t_acc_s == report.t_acc_s && check.t_acc_m == report.t_acc_m && check.f_sim_s == report.f_sim_s &&
              check.f_sim_m == report.f_sim_m && check.t_ned_s == report.t_ned_s && check.t_ned_m == report.t_ned_m;
    for (const auto& r : report.records)
        ok = ok && r.value >= -1.0 - 1e-12 && r.value <= 1.0 + 1e-12 && r.ned >= 0.0 && r.ned <= 1.0;
    ok = ok && report.psnr >= 0.0 && report.psnr <= metrics::kPsnrCap;

    if (!out.empty()) {
        const fs::path dir(out);
        fs::create_directories(dir);
        write_file((dir / "report.json").string(), report.to_json() + "\n");
        write_file((dir / "instances.csv").string(), report.to_csv());
    }
    std::cout << report.table();
    if (!ok) {
        std::cerr << "error: report self-check failed\n";
        return kExitRuntime;
    }
    return 0;
}

int cmd_encode(const std::string& checkpoint, const std::string& image, const std::string& out) {
    const trainer::Trainer t = trainer::Trainer::from_checkpoint(checkpoint);
    const Tensor x = read_png(image);
    const int f = t.tokenizer().config().downsample;
    if (x.dim(2) % f != 0 || x.dim(3) % f != 0)
        throw ValueError("image '" + image + "' is " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                         ", not a multiple of the downsampling factor " + std::to_string(f));
    const auto grids = t.tokenizer().tokenize(x);
    const std::string text = grid_json(grids.front(), t.tokenizer()).dump() + "\n";
    if (out.empty()) std::cout << text;
    else write_file(out, text);
    return 0;
}

int cmd_decode(const std::string& checkpoint, const std::string& tokens, const std::string& out) {
    const trainer::Trainer t = trainer::Trainer::from_checkpoint(checkpoint);
    const auto grid = grid_from_json(read_file(tokens), t.tokenizer());
    write_png(out, t.tokenizer().detokenize(grid));
    return 0;
}

struct ARArgs {
    std::string tokenizer, manifest, out;
    long long stage1_steps = 100, stage2_steps = 400;
    int batch = 8, width = 128, layers = 4, heads = 4;
    double lr = 1e-3, cond_dropout = 0.1;
    std::uint64_t seed = 0;
};

int cmd_train_ar(const ARArgs& a) {
    const trainer::Trainer t = trainer::Trainer::from_checkpoint(a.tokenizer);
    const data::Corpus corpus = data::load_corpus(a.manifest);
    const auto& tok = t.tokenizer();
    std::vector<generator::ARExample> examples;
    int gh = 0, gw = 0;
    for (const auto& s : corpus.samples) {
        const auto grid = tok.tokenize(s.image).front();
        gh = grid.height;
        gw = grid.width;
        examples.push_back({prompt_for(s), generator::grid_to_sequence(grid)});
    }
    generator::ARConfig mc;
    mc.codebook_size = tok.codebook().size;
    mc.prompt_vocab = 3;
    mc.max_prompt_len = 2;
    mc.grid_height = gh;
    mc.grid_width = gw;
    mc.width = a.width;
    mc.layers = a.layers;
    mc.heads = a.heads;
    mc.seed = a.seed;
    generator::ARModel model(mc, tok.codebook().embeddings);
    generator::ARTrainConfig tc;
    tc.stage1_steps = a.stage1_steps;
    tc.stage2_steps = a.stage2_steps;
    tc.batch_size = a.batch;
    tc.lr = a.lr;
    tc.cond_dropout = a.cond_dropout;
    tc.seed = a.seed;
    generator::ARTrainer trainer(model, tc);
    trainer.run(examples, [](long long step, double loss) {
        if (step % 50 == 0) spdlog::info("ar step {} loss {:.4f}", step, loss);
    });
    model.save(a.out);
    std::cout << "saved AR model (" << mc.fingerprint() << ") to " << a.out << "\n";
    return 0;
}

struct SampleArgs {
    std::string tokenizer, ar, prompt, out;
    int count = 4;
    generator::SamplerConfig sampler;
};

int cmd_sample(const SampleArgs& a) {
    const trainer::Trainer t = trainer::Trainer::from_checkpoint(a.tokenizer);
    const generator::ARModel model = generator::ARModel::load(a.ar);
    if (a.count < 1) throw ValueError("--count must be >= 1");
    a.sampler.validate();
    generator::Prompt prompt;
    std::stringstream ss(a.prompt);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            prompt.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ValueError("--prompt expects comma-separated integers, got '" + item + "'");
        }
    }
    const fs::path dir(a.out);
    fs::create_directories(dir);
    for (int i = 0; i < a.count; ++i) {
        generator::SamplerConfig sc = a.sampler;
        sc.seed = derive_seed(a.sampler.seed, static_cast<std::uint64_t>(i));
        if (model.config().codebook_size != t.tokenizer().codebook().size)
            throw ConfigMismatchError("AR model predicts " + std::to_string(model.config().codebook_size) +
                                      " tokens but the tokenizer codebook has " +
                                      std::to_string(t.tokenizer().codebook().size));
        const auto grid = generator::sample(model, prompt, sc, model.config().grid_height, model.config().grid_width);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03d", i);
        write_png((dir / (std::string(name) + ".png")).string(), t.tokenizer().detokenize(grid));
        write_file((dir / (std::string(name) + ".json")).string(), grid_json(grid, t.tokenizer()).dump() + "\n");
    }
    std::cout << "wrote " << a.count << " samples to " << dir.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"regiontok: discrete image tokenizer with localized text and face losses"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    auto* gen = app.add_subcommand("gen-data", "Render a synthetic annotated corpus");
    std::string kind = "mixed", gen_out;
    int count = 0, height = 32, width = 32;
    std::uint64_t gen_seed = 0;
    gen->add_option("--kind", kind, "text, face or mixed")->check(CLI::IsMember({"text", "face", "mixed"}));
    gen->add_option("-n,--count", count, "Number of images")->required();
    gen->add_option("--height", height, "Image height");
    gen->add_option("--width", width, "Image width");
    gen->add_option("--seed", gen_seed, "Random seed");
    gen->add_option("-o,--out", gen_out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Run the staged tokenizer training schedule");
    TrainArgs ta;
    train->add_option("-c,--config", ta.config, "JSON config (defaults when omitted)");
    train->add_option("--manifest", ta.manifest, "Training manifest (overrides train_manifest)");
    train->add_option("-o,--out", ta.out, "Output directory (overrides output_dir)");
    train->add_option("--resume", ta.resume, "Checkpoint to continue from");
    train->add_option("--set", ta.overrides, "Config override key.path=value (repeatable)");
    auto* seed_opt = train->add_option("--seed", ta.seed, "Random seed (overrides seed)");
    train->add_flag("--no-region-losses", ta.no_region_losses, "Disable the text and face losses");
    train->add_flag("--no-area-weighting", ta.no_area_weighting, "Weight every text and face region equally");
    train->add_option("--max-steps", ta.max_steps, "Stop after this many steps");

    auto* eval = app.add_subcommand("eval", "Reconstruct a corpus and report text, face and image metrics");
    std::string ev_ckpt, ev_manifest, ev_out;
    bool ev_identity = false;
    std::uint64_t ev_seed = 7;
    eval->add_option("--checkpoint", ev_ckpt, "Tokenizer checkpoint");
    eval->add_option("--manifest", ev_manifest, "Evaluation manifest")->required();
    eval->add_option("-o,--out", ev_out, "Directory for report.json and instances.csv");
    eval->add_flag("--identity", ev_identity, "Score the images against themselves");
    eval->add_option("--embed-seed", ev_seed, "Seed of the face embedder");

    auto* enc = app.add_subcommand("encode", "Image to token grid JSON");
    std::string en_ckpt, en_img, en_out;
    enc->add_option("--checkpoint", en_ckpt, "Tokenizer checkpoint")->required();
    enc->add_option("-i,--image", en_img, "Input PNG")->required();
    enc->add_option("-o,--out", en_out, "Output JSON (stdout when omitted)");

    auto* dec = app.add_subcommand("decode", "Token grid JSON to image");
    std::string de_ckpt, de_tokens, de_out;
    dec->add_option("--checkpoint", de_ckpt, "Tokenizer checkpoint")->required();
    dec->add_option("-t,--tokens", de_tokens, "Token grid JSON")->required();
    dec->add_option("-o,--out", de_out, "Output PNG")->required();

    auto* tar = app.add_subcommand("train-ar", "Train the toy AR generator on tokenized images");
    ARArgs aa;
    tar->add_option("--tokenizer", aa.tokenizer, "Tokenizer checkpoint")->required();
    tar->add_option("--manifest", aa.manifest, "Training manifest")->required();
    tar->add_option("-o,--out", aa.out, "Output AR checkpoint")->required();
    tar->add_option("--stage1-steps", aa.stage1_steps, "Adapter-and-head steps");
    tar->add_option("--stage2-steps", aa.stage2_steps, "Full-model steps");
    tar->add_option("--batch", aa.batch, "Batch size");
    tar->add_option("--width", aa.width, "Transformer width");
    tar->add_option("--layers", aa.layers, "Transformer layers");
    tar->add_option("--heads", aa.heads, "Attention heads");
    tar->add_option("--lr", aa.lr, "Learning rate");
    tar->add_option("--cond-dropout", aa.cond_dropout, "Condition dropout probability");
    tar->add_option("--seed", aa.seed, "Random seed");

    auto* smp = app.add_subcommand("sample", "Sample images from the AR generator");
    SampleArgs sa;
    smp->add_option("--tokenizer", sa.tokenizer, "Tokenizer checkpoint")->required();
    smp->add_option("--ar", sa.ar, "AR checkpoint")->required();
    smp->add_option("--prompt", sa.prompt, "Comma-separated prompt tokens (0 text, 1 face, 2 plain)");
    smp->add_option("-n,--count", sa.count, "Number of samples");
    smp->add_option("--cfg-scale", sa.sampler.cfg_scale, "Guidance scale (default 5.0)");
    smp->add_option("--top-k", sa.sampler.top_k, "Top-k truncation");
    smp->add_option("--temperature", sa.sampler.temperature, "Sampling temperature");
    smp->add_option("--seed", sa.sampler.seed, "Random seed");
    smp->add_option("-o,--out", sa.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    ta.seed_set = seed_opt->count() > 0;

    try {
        if (*gen) return cmd_gen_data(kind, count, height, width, gen_seed, gen_out);
        if (*train) return cmd_train(ta);
        if (*eval) return cmd_eval(ev_ckpt, ev_manifest, ev_out, ev_identity, ev_seed);
        if (*enc) return cmd_encode(en_ckpt, en_img, en_out);
        if (*dec) return cmd_decode(de_ckpt, de_tokens, de_out);
        if (*tar) return cmd_train_ar(aa);
        if (*smp) return cmd_sample(sa);
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ConfigMismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}
