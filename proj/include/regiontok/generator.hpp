#pragma once

// Toy autoregressive transformer over rasterized token grids, conditioned on
// a short prompt of class tokens, with guided top-k sampling.
//
// Input layout: prompt tokens, then the start-of-image token, then the image
// tokens. An empty prompt is encoded as the single null token, which is also
// what condition dropout substitutes during training.

#include "regiontok/autoencoder.hpp"
#include "regiontok/nn.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace regiontok::generator {

using autoencoder::TokenGrid;

struct TokenSequence {
    std::vector<int> tokens;
    int height = 0;
    int width = 0;

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Row-major scan.
TokenSequence grid_to_sequence(const TokenGrid& grid);
// Throws ShapeError when tokens.size() != height * width.
TokenGrid sequence_to_grid(const TokenSequence& sequence);

using Prompt = std::vector<int>;

struct ARConfig {
    int codebook_size = 128; // K, image-token vocabulary
    int prompt_vocab = 8;
    int max_prompt_len = 4;
    int grid_height = 8;
    int grid_width = 8;
    int width = 128;
    int layers = 4;
    int heads = 4;
    int mlp_ratio = 4;
    double head_std = 0.02;
    std::uint64_t seed = 0;

    void validate() const;
    int sequence_length() const { return grid_height * grid_width; }
    std::string fingerprint() const;
};

struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj, fc1, fc2;
};

// Per-layer keys and values of the tokens consumed so far.
struct KVCache {
    std::vector<std::vector<double>> keys;   // [layer][t * width]
    std::vector<std::vector<double>> values; // [layer][t * width]
    int length = 0;
    int image_offset = -1; // rows taken by the prompt and the start-of-image token
    std::vector<double> logits; // prediction for the next image token
};

class ARModel {
public:
    // token_table [K, e] is the frozen embedding of image tokens (typically a
    // copy of the tokenizer codebook); a seeded Gaussian table is used when absent.
    explicit ARModel(ARConfig config, std::optional<Tensor> token_table = std::nullopt);

    const ARConfig& config() const { return config_; }
    const Tensor& token_table() const { return token_table_; }
    int soi_token() const { return config_.prompt_vocab; }
    int null_token() const { return config_.prompt_vocab + 1; }

    // Logits [prefix.size() + 1, K]: row i predicts image token i given the
    // prompt and prefix[0..i).
    ad::Var logits(const Prompt& prompt, std::span<const int> prefix) const;

    // Incremental inference with a KV cache; agrees with logits() row by row.
    KVCache start(const Prompt& prompt) const;
    void advance(KVCache& cache, int image_token) const;

    // All parameters, in checkpoint order.
    nn::ParamList params() const;
    // Flags marking the input adapter, condition embeddings and output head,
    // the only parameters trained in the first AR stage.
    std::vector<bool> adapter_and_head_mask() const;

    void save(const std::string& path) const;
    static ARModel load(const std::string& path);

    static constexpr std::string_view kMagic = "RTKARM01";
    static constexpr std::uint32_t kVersion = 1;

private:
    void check_prompt(const Prompt& prompt) const;
    std::vector<int> condition_ids(const Prompt& prompt) const;
    void push_row(KVCache& cache, const ad::Var& row, bool keep_logits) const;

    ARConfig config_;
    Tensor token_table_;
    nn::Linear adapter1_, adapter2_;
    ad::Var cond_embed_; // [prompt_vocab + 2, width]
    ad::Var pos_embed_;  // [max_prompt_len + 1 + n, width]
    std::vector<Block> blocks_;
    nn::LayerNorm ln_f_;
    nn::Linear head_;
};

// Mean next-token cross-entropy of `sequence` under prompt + SOI.
ad::Var ar_loss(const ARModel& model, const Prompt& prompt, const TokenSequence& sequence);

struct ARExample {
    Prompt prompt;
    TokenSequence sequence;
};

struct ARTrainConfig {
    long long stage1_steps = 0; // adapter and head only
    long long stage2_steps = 500; // all parameters
    int batch_size = 8;
    double lr = 1e-3;
    double warmup_fraction = 0.05;
    double cond_dropout = 0.1;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
    long long total_steps() const { return stage1_steps + stage2_steps; }
};

class ARTrainer {
public:
    ARTrainer(ARModel& model, ARTrainConfig config);

    // One optimizer step on `batch`; returns the mean loss before the update.
    double train_step(std::span<const ARExample> batch);
    // Runs the remaining steps, drawing batches uniformly from `examples`.
    void run(std::span<const ARExample> examples, const std::function<void(long long, double)>& on_step = {});
    long long step() const { return step_; }

private:
    ARModel& model_;
    ARTrainConfig config_;
    nn::Adam opt_;
    Rng rng_;
    long long step_ = 0;
};

struct SamplerConfig {
    double cfg_scale = 5.0;
    int top_k = 4096; // clamped to K
    double temperature = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// uncond + scale * (cond - uncond); scale 1 and 0 return cond and uncond exactly.
std::vector<double> combine_cfg(std::span<const double> cond, std::span<const double> uncond, double scale);
std::vector<double> cfg_logits(const ARModel& model, const Prompt& prompt, std::span<const int> prefix, double scale);

// Indices of the k largest logits, ties broken by lower index.
std::vector<int> top_k_set(std::span<const double> logits, int k);
// Temperature, then top-k truncation and renormalization, then one draw.
int sample_token(std::span<const double> logits, double temperature, int top_k, Rng& rng);

// Per-step record of the allowed set, for auditing truncation.
struct SampleTrace {
    std::vector<std::vector<int>> allowed;
};

TokenGrid sample(const ARModel& model, const Prompt& prompt, const SamplerConfig& sampler, int height, int width,
                 SampleTrace* trace = nullptr);

// Samples a grid and decodes it; throws ConfigMismatchError on a vocabulary mismatch.
Tensor generate_image(const ARModel& model, const autoencoder::Tokenizer& tokenizer, const Prompt& prompt,
                      const SamplerConfig& sampler);

} // namespace regiontok::generator
