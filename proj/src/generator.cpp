#include "regiontok/generator.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace regiontok::generator {

TokenSequence grid_to_sequence(const TokenGrid& grid) {
    if (grid.height < 0 || grid.width < 0 || grid.tokens.size() != static_cast<std::size_t>(grid.height) * grid.width)
        throw ShapeError("grid_to_sequence: grid holds " + std::to_string(grid.tokens.size()) + " tokens for " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width));
    return {grid.tokens, grid.height, grid.width};
}

TokenGrid sequence_to_grid(const TokenSequence& sequence) {
    if (sequence.height < 0 || sequence.width < 0 ||
        sequence.tokens.size() != static_cast<std::size_t>(sequence.height) * sequence.width)
        throw ShapeError("sequence_to_grid: " + std::to_string(sequence.tokens.size()) + " tokens cannot fill " +
                         std::to_string(sequence.height) + "x" + std::to_string(sequence.width));
    return {sequence.height, sequence.width, sequence.tokens};
}

void ARConfig::validate() const {
    if (codebook_size < 1) throw ValueError("ar.codebook_size must be >= 1");
    if (prompt_vocab < 1) throw ValueError("ar.prompt_vocab must be >= 1");
    if (max_prompt_len < 1) throw ValueError("ar.max_prompt_len must be >= 1");
    if (grid_height < 1 || grid_width < 1) throw ValueError("ar grid dimensions must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0) throw ValueError("ar.width must be a positive multiple of ar.heads");
    if (layers < 0) throw ValueError("ar.layers must be >= 0");
    if (mlp_ratio < 1) throw ValueError("ar.mlp_ratio must be >= 1");
    if (!(head_std > 0.0)) throw ValueError("ar.head_std must be > 0");
}

std::string ARConfig::fingerprint() const {
    std::ostringstream os;
    os << "K=" << codebook_size << ";P=" << prompt_vocab << "x" << max_prompt_len << ";grid=" << grid_height << "x"
       << grid_width << ";W=" << width << ";L=" << layers << ";H=" << heads << ";mlp=" << mlp_ratio;
    return os.str();
}

ARModel::ARModel(ARConfig config, std::optional<Tensor> token_table) : config_(std::move(config)) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, 0xA7));
    if (token_table) {
        if (token_table->rank() != 2 || token_table->dim(0) != config_.codebook_size)
            throw ConfigMismatchError("token table " + shape_string(token_table->shape) + " does not match K = " +
                                      std::to_string(config_.codebook_size));
        token_table_ = std::move(*token_table);
    } else {
        token_table_ = nn::normal_tensor({config_.codebook_size, 16}, 1.0, rng);
    }
    const int w = config_.width, e = token_table_.dim(1);
    adapter1_ = nn::Linear(e, w, rng, 1.0 / std::sqrt(static_cast<double>(e)));
    adapter2_ = nn::Linear(w, w, rng, 1.0 / std::sqrt(static_cast<double>(w)));
    cond_embed_ = ad::parameter(nn::normal_tensor({config_.prompt_vocab + 2, w}, 0.02, rng));
    pos_embed_ = ad::parameter(nn::normal_tensor({config_.max_prompt_len + 1 + config_.sequence_length(), w}, 0.02, rng));
    const double proj_std = 0.02 / std::sqrt(2.0 * std::max(1, config_.layers));
    for (int l = 0; l < config_.layers; ++l) {
        Block b;
        b.ln1 = nn::LayerNorm(w);
        b.ln2 = nn::LayerNorm(w);
        b.qkv = nn::Linear(w, 3 * w, rng, 0.02);
        b.proj = nn::Linear(w, w, rng, proj_std);
        b.fc1 = nn::Linear(w, config_.mlp_ratio * w, rng, 0.02);
        b.fc2 = nn::Linear(config_.mlp_ratio * w, w, rng, proj_std);
        blocks_.push_back(std::move(b));
    }
    ln_f_ = nn::LayerNorm(w);
    head_ = nn::Linear(w, config_.codebook_size, rng, config_.head_std);
}

void ARModel::check_prompt(const Prompt& prompt) const {
    if (prompt.size() > static_cast<std::size_t>(config_.max_prompt_len))
        throw ValueError("prompt has " + std::to_string(prompt.size()) + " tokens, the model accepts at most " +
                         std::to_string(config_.max_prompt_len));
    for (int t : prompt)
        if (t < 0 || t >= config_.prompt_vocab)
            throw ValueError("prompt token " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(config_.prompt_vocab));
}

std::vector<int> ARModel::condition_ids(const Prompt& prompt) const {
    check_prompt(prompt);
    std::vector<int> ids = prompt.empty() ? std::vector<int>{null_token()} : prompt;
    ids.push_back(soi_token());
    return ids;
}

namespace {

ad::Var mlp(const Block& b, const ad::Var& x) { return b.fc2(ops::gelu(b.fc1(x))); }

void check_image_tokens(std::span<const int> tokens, int k) {
    for (int t : tokens)
        if (t < 0 || t >= k)
            throw ValueError("image token " + std::to_string(t) + " outside vocabulary of " + std::to_string(k));
}

} // namespace

ad::Var ARModel::logits(const Prompt& prompt, std::span<const int> prefix) const {
    const std::vector<int> cond = condition_ids(prompt);
    const int n = config_.sequence_length();
    if (prefix.size() >= static_cast<std::size_t>(n))
        throw ValueError("prefix of " + std::to_string(prefix.size()) + " tokens leaves nothing to predict in a grid of " +
                         std::to_string(n));
    check_image_tokens(prefix, config_.codebook_size);

    std::vector<int> pos;
    for (std::size_t i = 0; i + 1 < cond.size(); ++i) pos.push_back(static_cast<int>(i));
    pos.push_back(config_.max_prompt_len);
    for (std::size_t j = 0; j < prefix.size(); ++j) pos.push_back(config_.max_prompt_len + 1 + static_cast<int>(j));

    std::vector<ad::Var> parts{ops::embedding(cond_embed_, cond)};
    if (!prefix.empty()) {
        const ad::Var e = ops::embedding(ad::constant(token_table_), prefix);
        parts.push_back(adapter2_(ops::gelu(adapter1_(e))));
    }
    ad::Var x = ops::add(ops::concat_rows(parts), ops::embedding(pos_embed_, pos));
    for (const auto& b : blocks_) {
        x = ops::add(x, b.proj(ops::causal_attention(b.qkv(b.ln1(x)), config_.heads)));
        x = ops::add(x, mlp(b, b.ln2(x)));
    }
    const int first = static_cast<int>(cond.size()) - 1;
    x = ops::slice_rows(x, first, first + static_cast<int>(prefix.size()) + 1);
    return head_(ln_f_(x));
}

void ARModel::push_row(KVCache& cache, const ad::Var& row, bool keep_logits) const {
    const int w = config_.width, heads = config_.heads, hd = w / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    if (cache.keys.empty()) {
        cache.keys.resize(blocks_.size());
        cache.values.resize(blocks_.size());
    }
    const int t_len = cache.length + 1;
    ad::Var x = row;
    std::vector<double> scores(static_cast<std::size_t>(t_len));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        const Tensor qkv = b.qkv(b.ln1(x)).value();
        auto& keys = cache.keys[l];
        auto& vals = cache.values[l];
        keys.insert(keys.end(), qkv.data.begin() + w, qkv.data.begin() + 2 * w);
        vals.insert(vals.end(), qkv.data.begin() + 2 * w, qkv.data.begin() + 3 * w);
        Tensor att({1, w});
        for (int h = 0; h < heads; ++h) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < t_len; ++j) {
                double s = 0.0;
                for (int e = 0; e < hd; ++e) s += qkv.data[h * hd + e] * keys[static_cast<std::size_t>(j) * w + h * hd + e];
                scores[j] = s * inv;
                mx = std::max(mx, scores[j]);
            }
            double z = 0.0;
            for (int j = 0; j < t_len; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                z += scores[j];
            }
            for (int j = 0; j < t_len; ++j) scores[j] /= z;
            for (int e = 0; e < hd; ++e) {
                double acc = 0.0;
                for (int j = 0; j < t_len; ++j) acc += scores[j] * vals[static_cast<std::size_t>(j) * w + h * hd + e];
                att.data[h * hd + e] = acc;
            }
        }
        x = ops::add(x, b.proj(ad::constant(std::move(att))));
        x = ops::add(x, mlp(b, b.ln2(x)));
    }
    cache.length = t_len;
    if (keep_logits) cache.logits = head_(ln_f_(x)).value().data;
}

KVCache ARModel::start(const Prompt& prompt) const {
    const std::vector<int> cond = condition_ids(prompt);
    KVCache cache;
    for (std::size_t i = 0; i < cond.size(); ++i) {
        const bool soi = i + 1 == cond.size();
        const int pos = soi ? config_.max_prompt_len : static_cast<int>(i);
        const ad::Var row = ops::add(ops::embedding(cond_embed_, std::span<const int>(&cond[i], 1)),
                                     ops::embedding(pos_embed_, std::span<const int>(&pos, 1)));
        push_row(cache, row, soi);
    }
    cache.image_offset = cache.length;
    return cache;
}

void ARModel::advance(KVCache& cache, int image_token) const {
    check_image_tokens(std::span<const int>(&image_token, 1), config_.codebook_size);
    if (cache.image_offset < 0) throw ValueError("advance: cache was not created by start()");
    const int j = cache.length - cache.image_offset;
    if (j >= config_.sequence_length() - 1) throw ValueError("advance: the grid is already complete");
    const int pos = config_.max_prompt_len + 1 + j;
    const ad::Var e = ops::embedding(ad::constant(token_table_), std::span<const int>(&image_token, 1));
    const ad::Var row = ops::add(adapter2_(ops::gelu(adapter1_(e))), ops::embedding(pos_embed_, std::span<const int>(&pos, 1)));
    push_row(cache, row, true);
}

nn::ParamList ARModel::params() const {
    nn::ParamList p;
    adapter1_.collect("adapter1.", p);
    adapter2_.collect("adapter2.", p);
    p.add("cond_embed", cond_embed_);
    p.add("pos_embed", pos_embed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string pre = "block" + std::to_string(l) + ".";
        const Block& b = blocks_[l];
        b.ln1.collect(pre + "ln1.", p);
        b.qkv.collect(pre + "qkv.", p);
        b.proj.collect(pre + "proj.", p);
        b.ln2.collect(pre + "ln2.", p);
        b.fc1.collect(pre + "fc1.", p);
        b.fc2.collect(pre + "fc2.", p);
    }
    ln_f_.collect("ln_f.", p);
    head_.collect("head.", p);
    return p;
}

std::vector<bool> ARModel::adapter_and_head_mask() const {
    const auto p = params();
    std::vector<bool> mask;
    for (const auto& [name, v] : p.items())
        mask.push_back(name.starts_with("adapter") || name == "cond_embed" || name.starts_with("head."));
    return mask;
}

void ARModel::save(const std::string& path) const {
    BinaryWriter w;
    const auto& c = config_;
    for (int v : {c.codebook_size, c.prompt_vocab, c.max_prompt_len, c.grid_height, c.grid_width, c.width, c.layers,
                  c.heads, c.mlp_ratio})
        w.i64(v);
    w.f64(c.head_std);
    w.u64(c.seed);
    w.tensor(token_table_);
    const auto p = params();
    w.u64(p.size());
    for (const auto& [name, v] : p.items()) {
        w.str(name);
        w.tensor(v.value());
    }
    write_envelope(path, kMagic, kVersion, w.bytes());
}

ARModel ARModel::load(const std::string& path) {
    const std::string payload = read_envelope(path, kMagic, kVersion);
    BinaryReader r(payload);
    ARConfig c;
    for (int* f : {&c.codebook_size, &c.prompt_vocab, &c.max_prompt_len, &c.grid_height, &c.grid_width, &c.width,
                   &c.layers, &c.heads, &c.mlp_ratio})
        *f = static_cast<int>(r.i64());
    c.head_std = r.f64();
    c.seed = r.u64();
    Tensor table = r.tensor();
    ARModel model(c, std::move(table));
    auto p = model.params();
    if (r.u64() != p.size()) throw ParseError("AR checkpoint '" + path + "': parameter count mismatch", 0);
    for (auto& [name, v] : p.items()) {
        const std::string stored = r.str();
        Tensor t = r.tensor();
        if (stored != name || t.shape != v.shape())
            throw ParseError("AR checkpoint '" + path + "': unexpected tensor '" + stored + "'", 0);
        v.mutable_value() = std::move(t);
    }
    if (!r.at_end()) throw ParseError("AR checkpoint '" + path + "' has trailing data", 0);
    return model;
}

ad::Var ar_loss(const ARModel& model, const Prompt& prompt, const TokenSequence& sequence) {
    const int n = static_cast<int>(sequence.tokens.size());
    if (n != model.config().sequence_length())
        throw ShapeError("ar_loss: sequence of " + std::to_string(n) + " tokens, the model expects " +
                         std::to_string(model.config().sequence_length()));
    check_image_tokens(sequence.tokens, model.config().codebook_size);
    const std::span<const int> all(sequence.tokens);
    return ops::cross_entropy(model.logits(prompt, all.first(static_cast<std::size_t>(n - 1))), all);
}

void ARTrainConfig::validate() const {
    if (stage1_steps < 0 || stage2_steps < 0) throw ValueError("AR step counts must be >= 0");
    if (batch_size < 1) throw ValueError("AR batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValueError("AR lr must be > 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ValueError("AR warmup_fraction must lie in [0, 1)");
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ValueError("AR cond_dropout must lie in [0, 1]");
    if (!(clip_norm > 0.0)) throw ValueError("AR clip_norm must be > 0");
}

ARTrainer::ARTrainer(ARModel& model, ARTrainConfig config)
    : model_(model), config_((config.validate(), config)), opt_(model.params(), {0.9, 0.95, 1e-8, 0.0}),
      rng_(derive_seed(config_.seed, 0xA2)) {}

double ARTrainer::train_step(std::span<const ARExample> batch) {
    if (batch.empty()) throw ValueError("AR train_step: empty batch");
    std::vector<ad::Var> losses;
    for (const auto& ex : batch) {
        const bool drop = uniform01(rng_) < config_.cond_dropout;
        losses.push_back(ar_loss(model_, drop ? Prompt{} : ex.prompt, ex.sequence));
    }
    const std::vector<double> w(losses.size(), 1.0 / static_cast<double>(losses.size()));
    const ad::Var loss = ops::weighted_sum(losses, w);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteError("non-finite AR loss at step " + std::to_string(step_));

    nn::ParamList p = model_.params();
    p.zero_grad();
    loss.backward();
    std::vector<bool> trainable(p.size(), true);
    if (step_ < config_.stage1_steps) trainable = model_.adapter_and_head_mask();
    nn::ParamList active;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (trainable[i]) active.add(p.items()[i].first, p.items()[i].second);
        else p.items()[i].second.zero_grad();
    }
    nn::clip_grad_norm(active, config_.clip_norm);
    const bool stage1 = step_ < config_.stage1_steps;
    const long long stage_step = stage1 ? step_ : step_ - config_.stage1_steps;
    const long long stage_len = stage1 ? config_.stage1_steps : config_.stage2_steps;
    opt_.step(p, nn::cosine_lr(config_.lr, stage_step, stage_len, config_.warmup_fraction), trainable);
    p.zero_grad();
    ++step_;
    return value;
}

void ARTrainer::run(std::span<const ARExample> examples, const std::function<void(long long, double)>& on_step) {
    if (examples.empty()) throw ValueError("AR training set is empty");
    while (step_ < config_.total_steps()) {
        std::vector<ARExample> batch;
        for (int i = 0; i < config_.batch_size; ++i) batch.push_back(examples[uniform_index(rng_, examples.size())]);
        const double loss = train_step(batch);
        if (on_step) on_step(step_ - 1, loss);
    }
}

void SamplerConfig::validate() const {
    if (!(cfg_scale >= 1.0)) throw ValueError("cfg_scale must be >= 1");
    if (top_k < 1) throw ValueError("top_k must be >= 1");
    if (!(temperature > 0.0)) throw ValueError("temperature must be > 0");
}

std::vector<double> combine_cfg(std::span<const double> cond, std::span<const double> uncond, double scale) {
    if (cond.size() != uncond.size()) throw ShapeError("combine_cfg: logit length mismatch");
    if (scale == 1.0) return {cond.begin(), cond.end()};
    if (scale == 0.0) return {uncond.begin(), uncond.end()};
    std::vector<double> out(cond.size());
    for (std::size_t i = 0; i < cond.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
    return out;
}

std::vector<double> cfg_logits(const ARModel& model, const Prompt& prompt, std::span<const int> prefix, double scale) {
    const auto row = [&](const Prompt& p) {
        const Tensor l = model.logits(p, prefix).value();
        const int k = l.dim(1);
        return std::vector<double>(l.data.end() - k, l.data.end());
    };
    const std::vector<double> cond = row(prompt);
    if (scale == 1.0) return cond;
    return combine_cfg(cond, row({}), scale);
}

std::vector<int> top_k_set(std::span<const double> logits, int k) {
    if (logits.empty()) throw ValueError("top_k_set: empty logits");
    if (k < 1) throw ValueError("top_k must be >= 1");
    std::vector<int> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t keep = std::min(idx.size(), static_cast<std::size_t>(k));
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), [&](int a, int b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    });
    idx.resize(keep);
    return idx;
}

namespace {

int draw(std::span<const double> logits, double temperature, int top_k, Rng& rng, std::vector<int>* allowed_out) {
    if (!(temperature > 0.0)) throw ValueError("temperature must be > 0");
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& v : scaled) v /= temperature;
    const std::vector<int> allowed = top_k_set(scaled, top_k);
    const double mx = scaled[allowed.front()];
    std::vector<double> p(allowed.size());
    double z = 0.0;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
        p[i] = std::exp(scaled[allowed[i]] - mx);
        z += p[i];
    }
    const double u = uniform01(rng) * z;
    double acc = 0.0;
    int chosen = allowed.back();
    for (std::size_t i = 0; i < allowed.size(); ++i) {
        acc += p[i];
        if (u < acc) {
            chosen = allowed[i];
            break;
        }
    }
    if (allowed_out) *allowed_out = allowed;
    return chosen;
}

} // namespace

int sample_token(std::span<const double> logits, double temperature, int top_k, Rng& rng) {
    return draw(logits, temperature, top_k, rng, nullptr);
}

TokenGrid sample(const ARModel& model, const Prompt& prompt, const SamplerConfig& sampler, int height, int width,
                 SampleTrace* trace) {
    sampler.validate();
    if (height != model.config().grid_height || width != model.config().grid_width)
        throw ShapeError("sample: grid " + std::to_string(height) + "x" + std::to_string(width) + " but the model was built for " +
                         std::to_string(model.config().grid_height) + "x" + std::to_string(model.config().grid_width));
    Rng rng(sampler.seed);
    const bool guided = sampler.cfg_scale != 1.0 && !prompt.empty();
    KVCache cond = model.start(prompt);
    KVCache uncond = guided ? model.start({}) : KVCache{};
    TokenGrid grid{height, width, {}};
    const int n = height * width;
    if (trace) trace->allowed.clear();
    for (int i = 0; i < n; ++i) {
        const std::vector<double> logits =
            guided ? combine_cfg(cond.logits, uncond.logits, sampler.cfg_scale) : cond.logits;
        std::vector<int> allowed;
        const int t = draw(logits, sampler.temperature, sampler.top_k, rng, trace ? &allowed : nullptr);
        if (trace) trace->allowed.push_back(std::move(allowed));
        grid.tokens.push_back(t);
        if (i + 1 < n) {
            model.advance(cond, t);
            if (guided) model.advance(uncond, t);
        }
    }
    return grid;
}

Tensor generate_image(const ARModel& model, const autoencoder::Tokenizer& tokenizer, const Prompt& prompt,
                      const SamplerConfig& sampler) {
    if (model.config().codebook_size != tokenizer.codebook().size)
        throw ConfigMismatchError("AR model predicts " + std::to_string(model.config().codebook_size) +
                                  " image tokens but the tokenizer codebook has " + std::to_string(tokenizer.codebook().size));
    const TokenGrid grid = sample(model, prompt, sampler, model.config().grid_height, model.config().grid_width);
    return tokenizer.detokenize(grid);
}

} // namespace regiontok::generator
