#pragma once

// Layers, parameter registries and the Adam optimizer shared by the
// tokenizer, discriminator and AR transformer.

#include "regiontok/autograd.hpp"
#include "regiontok/ops.hpp"
#include "regiontok/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace regiontok::nn {

using ad::Var;

// Ordered list of named parameters. Order is part of the checkpoint format.
class ParamList {
public:
    void add(std::string name, Var v) { items_.emplace_back(std::move(name), std::move(v)); }
    void append(const std::string& prefix, const ParamList& other);

    const std::vector<std::pair<std::string, Var>>& items() const& { return items_; }
    std::vector<std::pair<std::string, Var>>& items() & { return items_; }
    // By value on temporaries, so `for (auto& p : model.params().items())` is safe.
    std::vector<std::pair<std::string, Var>> items() && { return std::move(items_); }
    std::size_t size() const { return items_.size(); }
    std::size_t total_elements() const;

    void zero_grad();
    double grad_norm() const;
    void scale_grads(double s);

private:
    std::vector<std::pair<std::string, Var>> items_;
};

// Groups that divide the channel count, capped at 8.
int default_groups(int channels);

struct Conv2d {
    Var weight, bias;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, double gain = 1.0);
    Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;

    GroupNorm() = default;
    explicit GroupNorm(int channels);
    Var operator()(const Var& x) const { return ops::group_norm(x, gamma, beta, groups); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Linear {
    Var weight, bias;

    Linear() = default;
    Linear(int in, int out, Rng& rng, double std_dev);
    Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim);
    Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }
    void collect(const std::string& prefix, ParamList& out) const;
};

// GroupNorm -> SiLU -> conv -> GroupNorm -> SiLU -> conv, plus a skip
// connection (1x1 conv when widths differ).
struct ResBlock {
    GroupNorm norm1, norm2;
    Conv2d conv1, conv2;
    Conv2d skip;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(int in, int out, Rng& rng);
    Var operator()(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct AdamConfig {
    double beta1 = 0.5;
    double beta2 = 0.9;
    double eps = 1e-8;
    double weight_decay = 0.05; // decoupled
};

// Adam with decoupled weight decay. Weight decay is applied only to tensors
// of rank >= 2 (conv and linear weights).
class Adam {
public:
    Adam() = default;
    Adam(const ParamList& params, AdamConfig config);

    void step(ParamList& params, double lr);
    // Trainable flags per parameter (same order as the ParamList); untouched
    // entries keep their moments.
    void step(ParamList& params, double lr, const std::vector<bool>& trainable);

    long long steps() const { return t_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    const std::vector<Tensor>& first_moments() const { return m_; }
    const std::vector<Tensor>& second_moments() const { return v_; }
    void set_steps(long long t) { t_ = t; }
    const AdamConfig& config() const { return config_; }

private:
    AdamConfig config_;
    std::vector<Tensor> m_, v_;
    long long t_ = 0;
};

// Clips the global gradient norm of `params` to max_norm; returns the norm
// before clipping.
double clip_grad_norm(ParamList& params, double max_norm);

// Linear warmup over the first warmup_fraction of total_steps, then cosine
// decay to zero.
double cosine_lr(double base_lr, long long step, long long total_steps, double warmup_fraction);

Tensor normal_tensor(Shape shape, double std_dev, Rng& rng);

} // namespace regiontok::nn
