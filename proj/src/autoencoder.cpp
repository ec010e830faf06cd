#include "regiontok/autoencoder.hpp"

#include "regiontok/errors.hpp"

#include <sstream>

namespace regiontok::autoencoder {

AutoencoderConfig AutoencoderConfig::full_scale() {
    AutoencoderConfig c;
    c.downsample = 16;
    c.base_width = 256;
    c.res_blocks = 4;
    c.codebook_size = 16384;
    c.embed_dim = 256;
    return c;
}

int AutoencoderConfig::stages() const {
    int s = 0;
    for (int f = downsample; f > 1; f /= 2) ++s;
    return s;
}

void AutoencoderConfig::validate() const {
    if (downsample < 1 || (downsample & (downsample - 1)) != 0)
        throw ValueError("model.downsample must be a power of two, got " + std::to_string(downsample));
    if (base_width < 1) throw ValueError("model.base_width must be >= 1");
    if (res_blocks < 1) throw ValueError("model.res_blocks must be >= 1");
    if (codebook_size < 1) throw ValueError("model.codebook_size must be >= 1");
    if (embed_dim < 1) throw ValueError("model.embed_dim must be >= 1");
    if (!(ema_mu > 0.0 && ema_mu <= 1.0)) throw ValueError("model.ema_mu must lie in (0, 1]");
}

std::string AutoencoderConfig::fingerprint() const {
    std::ostringstream os;
    os << "f=" << downsample << ";w=" << base_width << ";r=" << res_blocks << ";K=" << codebook_size
       << ";d=" << embed_dim;
    return os.str();
}

std::vector<int> stage_widths(const AutoencoderConfig& config) {
    // Width doubles once after the first stage, as in the usual (1, 2, 2, ...) multiplier scheme.
    std::vector<int> w;
    for (int s = 0; s <= config.stages(); ++s) w.push_back(config.base_width * (s == 0 ? 1 : 2));
    return w;
}

Encoder::Encoder(const AutoencoderConfig& config, Rng& rng) : res_blocks_(config.res_blocks) {
    const auto widths = stage_widths(config);
    conv_in_ = nn::Conv2d(3, widths[0], 3, 1, 1, rng);
    for (int s = 0; s < config.stages(); ++s) {
        for (int r = 0; r < config.res_blocks; ++r) blocks_.emplace_back(widths[s], widths[s], rng);
        down_.emplace_back(widths[s], widths[s + 1], 3, 2, 1, rng);
    }
    const int low = widths.back();
    for (int r = 0; r < config.res_blocks; ++r) mid_.emplace_back(low, low, rng);
    norm_out_ = nn::GroupNorm(low);
    conv_out_ = nn::Conv2d(low, config.embed_dim, 1, 1, 0, rng);
}

ad::Var Encoder::operator()(const ad::Var& images) const {
    ad::Var h = conv_in_(ops::add_scalar(ops::scale(images, 2.0), -1.0));
    std::size_t b = 0;
    for (const auto& down : down_) {
        for (int r = 0; r < res_blocks_; ++r) h = blocks_[b++](h);
        h = down(h);
    }
    for (const auto& block : mid_) h = block(h);
    return conv_out_(ops::silu(norm_out_(h)));
}

nn::ParamList Encoder::params() const {
    nn::ParamList p;
    conv_in_.collect("conv_in.", p);
    std::size_t b = 0;
    for (std::size_t s = 0; s < down_.size(); ++s) {
        for (int r = 0; r < res_blocks_; ++r)
            blocks_[b++].collect("stage" + std::to_string(s) + ".block" + std::to_string(r) + ".", p);
        down_[s].collect("stage" + std::to_string(s) + ".down.", p);
    }
    for (std::size_t r = 0; r < mid_.size(); ++r) mid_[r].collect("mid.block" + std::to_string(r) + ".", p);
    norm_out_.collect("norm_out.", p);
    conv_out_.collect("conv_out.", p);
    return p;
}

Decoder::Decoder(const AutoencoderConfig& config, Rng& rng) : res_blocks_(config.res_blocks) {
    const auto widths = stage_widths(config);
    const int low = widths.back();
    conv_in_ = nn::Conv2d(config.embed_dim, low, 3, 1, 1, rng);
    for (int r = 0; r < config.res_blocks; ++r) mid_.emplace_back(low, low, rng);
    for (int s = config.stages() - 1; s >= 0; --s) {
        up_.emplace_back(widths[s + 1], widths[s], 3, 1, 1, rng);
        for (int r = 0; r < config.res_blocks; ++r) blocks_.emplace_back(widths[s], widths[s], rng);
    }
    norm_out_ = nn::GroupNorm(widths[0]);
    conv_out_ = nn::Conv2d(widths[0], 3, 3, 1, 1, rng, 0.5);
}

ad::Var Decoder::operator()(const ad::Var& latents) const {
    ad::Var h = conv_in_(latents);
    for (const auto& block : mid_) h = block(h);
    std::size_t b = 0;
    for (const auto& up : up_) {
        h = up(ops::upsample_nearest(h, 2));
        for (int r = 0; r < res_blocks_; ++r) h = blocks_[b++](h);
    }
    h = conv_out_(ops::silu(norm_out_(h)));
    return ops::add_scalar(ops::scale(ops::tanh(h), 0.5), 0.5);
}

nn::ParamList Decoder::params() const {
    nn::ParamList p;
    conv_in_.collect("conv_in.", p);
    for (std::size_t r = 0; r < mid_.size(); ++r) mid_[r].collect("mid.block" + std::to_string(r) + ".", p);
    std::size_t b = 0;
    for (std::size_t s = 0; s < up_.size(); ++s) {
        up_[s].collect("stage" + std::to_string(s) + ".up.", p);
        for (int r = 0; r < res_blocks_; ++r)
            blocks_[b++].collect("stage" + std::to_string(s) + ".block" + std::to_string(r) + ".", p);
    }
    norm_out_.collect("norm_out.", p);
    conv_out_.collect("conv_out.", p);
    return p;
}

Tokenizer::Tokenizer(AutoencoderConfig config) : config_(config) {
    config_.validate();
    Rng enc_rng(derive_seed(config_.seed, 1));
    Rng dec_rng(derive_seed(config_.seed, 2));
    Rng cb_rng(derive_seed(config_.seed, 3));
    encoder_ = Encoder(config_, enc_rng);
    decoder_ = Decoder(config_, dec_rng);
    codebook_ = quantizer::Codebook::random(config_.codebook_size, config_.embed_dim, config_.ema_mu, cb_rng);
}

ad::Var Tokenizer::encode(const ad::Var& images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("encode expects [N, 3, H, W], got " + shape_string(s));
    if (s[2] % config_.downsample != 0 || s[3] % config_.downsample != 0)
        throw ShapeError("encode: image " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                         " is not divisible by the downsample factor " + std::to_string(config_.downsample));
    return encoder_(images);
}

ad::Var Tokenizer::decode(const ad::Var& latents) const {
    const auto& s = latents.shape();
    if (s.size() != 4 || s[1] != config_.embed_dim)
        throw ShapeError("decode expects [N, " + std::to_string(config_.embed_dim) + ", h, w], got " + shape_string(s));
    return decoder_(latents);
}

ForwardResult Tokenizer::forward(const ad::Var& images) const {
    ForwardResult r;
    r.latents = encode(images);
    const auto& s = r.latents.shape();
    r.latent_rows = ops::nchw_to_rows(r.latents);
    r.assignment = quantizer::assign(codebook_, r.latent_rows.value());
    const ad::Var st_rows = quantizer::straight_through(r.latent_rows, r.assignment.quantized);
    r.quantized = ops::rows_to_nchw(st_rows, s[0], s[1], s[2], s[3]);
    r.reconstruction = decode(r.quantized);
    return r;
}

Tensor Tokenizer::reconstruct(const Tensor& images) const {
    return forward(ad::constant(images)).reconstruction.value();
}

std::vector<TokenGrid> Tokenizer::tokenize(const Tensor& images) const {
    const ad::Var z = encode(ad::constant(images));
    const auto& s = z.shape();
    const auto q = quantizer::assign(codebook_, ops::nchw_to_rows(z).value());
    std::vector<TokenGrid> grids;
    const std::size_t per = static_cast<std::size_t>(s[2]) * s[3];
    for (int n = 0; n < s[0]; ++n) {
        TokenGrid g{s[2], s[3], {}};
        g.tokens.assign(q.indices.begin() + static_cast<std::ptrdiff_t>(n * per),
                        q.indices.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        grids.push_back(std::move(g));
    }
    return grids;
}

Tensor Tokenizer::detokenize(const std::vector<TokenGrid>& grids) const {
    if (grids.empty()) throw ShapeError("detokenize: no grids");
    const int h = grids[0].height, w = grids[0].width, d = config_.embed_dim;
    const int n = static_cast<int>(grids.size());
    Tensor rows({n * h * w, d});
    std::size_t r = 0;
    for (std::size_t gi = 0; gi < grids.size(); ++gi) {
        const auto& g = grids[gi];
        if (g.height != h || g.width != w) throw ShapeError("detokenize: grids differ in size");
        if (g.tokens.size() != static_cast<std::size_t>(h) * w)
            throw ShapeError("detokenize: grid has " + std::to_string(g.tokens.size()) + " tokens, expected " +
                             std::to_string(h * w));
        for (std::size_t i = 0; i < g.tokens.size(); ++i, ++r) {
            const int t = g.tokens[i];
            if (t < 0 || t >= codebook_.size)
                throw ValueError("detokenize: token " + std::to_string(t) + " at grid " + std::to_string(gi) +
                                 " row " + std::to_string(i / static_cast<std::size_t>(w)) + " col " +
                                 std::to_string(i % static_cast<std::size_t>(w)) + " is outside [0, " +
                                 std::to_string(codebook_.size) + ")");
            const auto e = codebook_.embedding(t);
            std::copy(e.begin(), e.end(), rows.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
        }
    }
    const ad::Var latents = ops::rows_to_nchw(ad::constant(std::move(rows)), n, d, h, w);
    return decode(latents).value();
}

} // namespace regiontok::autoencoder
