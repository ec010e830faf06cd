#include "regiontok/nn.hpp"

#include "regiontok/errors.hpp"

#include <cmath>

namespace regiontok::nn {

void ParamList::append(const std::string& prefix, const ParamList& other) {
    for (const auto& [name, v] : other.items_) items_.emplace_back(prefix + name, v);
}

std::size_t ParamList::total_elements() const {
    std::size_t n = 0;
    for (const auto& item : items_) n += item.second.numel();
    return n;
}

void ParamList::zero_grad() {
    for (auto& item : items_) item.second.zero_grad();
}

double ParamList::grad_norm() const {
    double s = 0.0;
    for (const auto& item : items_)
        for (double g : item.second.grad().data) s += g * g;
    return std::sqrt(s);
}

void ParamList::scale_grads(double s) {
    for (auto& item : items_) {
        auto& node = *item.second.node();
        for (double& g : node.grad.data) g *= s;
    }
}

int default_groups(int channels) {
    for (int g = 8; g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

Tensor normal_tensor(Shape shape, double std_dev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = std_dev * normal(rng);
    return t;
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng, double gain)
    : stride(stride_), pad(pad_) {
    const double fan_in = static_cast<double>(in) * kernel * kernel;
    weight = ad::parameter(normal_tensor({out, in, kernel, kernel}, gain * std::sqrt(2.0 / fan_in), rng));
    bias = ad::parameter(Tensor({out}, 0.0));
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.add(prefix + "weight", weight);
    out.add(prefix + "bias", bias);
}

GroupNorm::GroupNorm(int channels)
    : gamma(ad::parameter(Tensor({channels}, 1.0))), beta(ad::parameter(Tensor({channels}, 0.0))),
      groups(default_groups(channels)) {}

void GroupNorm::collect(const std::string& prefix, ParamList& out) const {
    out.add(prefix + "gamma", gamma);
    out.add(prefix + "beta", beta);
}

Linear::Linear(int in, int out, Rng& rng, double std_dev)
    : weight(ad::parameter(normal_tensor({out, in}, std_dev, rng))), bias(ad::parameter(Tensor({out}, 0.0))) {}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.add(prefix + "weight", weight);
    out.add(prefix + "bias", bias);
}

LayerNorm::LayerNorm(int dim)
    : gamma(ad::parameter(Tensor({dim}, 1.0))), beta(ad::parameter(Tensor({dim}, 0.0))) {}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.add(prefix + "gamma", gamma);
    out.add(prefix + "beta", beta);
}

ResBlock::ResBlock(int in, int out, Rng& rng)
    : norm1(in), norm2(out), conv1(in, out, 3, 1, 1, rng), conv2(out, out, 3, 1, 1, rng, 0.5), has_skip(in != out) {
    if (has_skip) skip = Conv2d(in, out, 1, 1, 0, rng);
}

Var ResBlock::operator()(const Var& x) const {
    Var h = conv1(ops::silu(norm1(x)));
    h = conv2(ops::silu(norm2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
}

void ResBlock::collect(const std::string& prefix, ParamList& out) const {
    norm1.collect(prefix + "norm1.", out);
    conv1.collect(prefix + "conv1.", out);
    norm2.collect(prefix + "norm2.", out);
    conv2.collect(prefix + "conv2.", out);
    if (has_skip) skip.collect(prefix + "skip.", out);
}

Adam::Adam(const ParamList& params, AdamConfig config) : config_(config) {
    for (const auto& item : params.items()) {
        m_.emplace_back(item.second.shape(), 0.0);
        v_.emplace_back(item.second.shape(), 0.0);
    }
}

void Adam::step(ParamList& params, double lr) { step(params, lr, std::vector<bool>(params.size(), true)); }

void Adam::step(ParamList& params, double lr, const std::vector<bool>& trainable) {
    if (params.size() != m_.size() || trainable.size() != m_.size())
        throw ShapeError("Adam: parameter list does not match optimizer state");
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i]) continue;
        auto& node = *params.items()[i].second.node();
        if (node.grad.empty()) continue;
        auto& w = node.value.data;
        const auto& g = node.grad.data;
        auto& m = m_[i].data;
        auto& v = v_[i].data;
        const bool decay = node.value.rank() >= 2 && config_.weight_decay > 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            if (decay) w[k] -= lr * config_.weight_decay * w[k];
            w[k] -= lr * mh / (std::sqrt(vh) + config_.eps);
        }
    }
}

double clip_grad_norm(ParamList& params, double max_norm) {
    const double norm = params.grad_norm();
    if (norm > max_norm && norm > 0.0) params.scale_grads(max_norm / norm);
    return norm;
}

double cosine_lr(double base_lr, long long step, long long total_steps, double warmup_fraction) {
    if (total_steps <= 0) return base_lr;
    const long long warmup = static_cast<long long>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double denom = static_cast<double>(std::max<long long>(1, total_steps - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / denom);
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

} // namespace regiontok::nn
