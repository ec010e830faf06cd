#pragma once

// Convolutional encoder/decoder around the EMA vector quantizer.
//
// Images are [N, 3, H, W] tensors with values in [0, 1]. The encoder shifts
// them to [-1, 1] before its first convolution; the decoder ends in
// (tanh + 1) / 2 so reconstructions always stay in [0, 1].

#include "regiontok/nn.hpp"
#include "regiontok/quantizer.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace regiontok::autoencoder {

struct AutoencoderConfig {
    int downsample = 8;
    int base_width = 64;
    int res_blocks = 2;
    int codebook_size = 512;
    int embed_dim = 32;
    double ema_mu = 0.05;
    std::uint64_t seed = 0;

    // 16x downsampling, width 256, 4 residual blocks, 16,384 x 256 codebook.
    static AutoencoderConfig full_scale();
    // Throws ValueError naming the first invalid field.
    void validate() const;
    int stages() const;
    std::string fingerprint() const;
};

struct TokenGrid {
    int height = 0;
    int width = 0;
    std::vector<int> tokens; // row-major

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

struct ForwardResult {
    ad::Var latents;   // z = E(x), [N, d, h, w]
    ad::Var quantized; // straight-through zq, [N, d, h, w]
    ad::Var latent_rows; // z as [N*h*w, d]
    quantizer::QuantizationResult assignment;
    ad::Var reconstruction; // [N, 3, H, W]
};

class Encoder {
public:
    Encoder() = default;
    Encoder(const AutoencoderConfig& config, Rng& rng);
    ad::Var operator()(const ad::Var& images) const;
    nn::ParamList params() const;

private:
    nn::Conv2d conv_in_;
    std::vector<nn::ResBlock> blocks_;
    std::vector<nn::Conv2d> down_;
    std::vector<nn::ResBlock> mid_;
    nn::GroupNorm norm_out_;
    nn::Conv2d conv_out_;
    int res_blocks_ = 0;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(const AutoencoderConfig& config, Rng& rng);
    ad::Var operator()(const ad::Var& latents) const;
    nn::ParamList params() const;

private:
    nn::Conv2d conv_in_;
    std::vector<nn::ResBlock> mid_;
    std::vector<nn::Conv2d> up_;
    std::vector<nn::ResBlock> blocks_;
    nn::GroupNorm norm_out_;
    nn::Conv2d conv_out_;
    int res_blocks_ = 0;
};

// Stage widths from input resolution to the bottleneck.
std::vector<int> stage_widths(const AutoencoderConfig& config);

class Tokenizer {
public:
    explicit Tokenizer(AutoencoderConfig config);

    const AutoencoderConfig& config() const { return config_; }

    // Throws ShapeError when H or W is not divisible by the downsample factor.
    ad::Var encode(const ad::Var& images) const;
    ad::Var decode(const ad::Var& latents) const;

    // Full differentiable pipeline D(straight_through(E(x), Q(E(x)))).
    ForwardResult forward(const ad::Var& images) const;

    Tensor reconstruct(const Tensor& images) const;
    std::vector<TokenGrid> tokenize(const Tensor& images) const;
    // Throws ValueError naming the first out-of-range token.
    Tensor detokenize(const std::vector<TokenGrid>& grids) const;
    Tensor detokenize(const TokenGrid& grid) const { return detokenize(std::vector<TokenGrid>{grid}); }

    quantizer::Codebook& codebook() { return codebook_; }
    const quantizer::Codebook& codebook() const { return codebook_; }

    nn::ParamList encoder_params() const { return encoder_.params(); }
    nn::ParamList decoder_params() const { return decoder_.params(); }

private:
    AutoencoderConfig config_;
    Encoder encoder_;
    Decoder decoder_;
    quantizer::Codebook codebook_;
};

} // namespace regiontok::autoencoder
