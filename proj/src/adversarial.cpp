#include "regiontok/adversarial.hpp"

#include "regiontok/errors.hpp"
#include "regiontok/ops.hpp"

#include <algorithm>
#include <numeric>

namespace regiontok::adversarial {

Discriminator::Discriminator(const DiscriminatorConfig& config) : config_(config) {
    if (config.layers < 1 || config.base_width < 1) throw ValueError("discriminator needs layers >= 1 and width >= 1");
    Rng rng(derive_seed(config.seed, 0xD15C));
    int in = 3;
    for (int l = 0; l < config.layers; ++l) {
        const int out = config.base_width << std::min(l, 3);
        convs_.emplace_back(in, out, 4, 2, 1, rng);
        norms_.emplace_back(out);
        in = out;
    }
    head_ = nn::Conv2d(in, 1, 3, 1, 1, rng);
}

ad::Var Discriminator::operator()(const ad::Var& images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("discriminator expects [N, 3, H, W], got " + shape_string(s));
    ad::Var h = ops::add_scalar(ops::scale(images, 2.0), -1.0);
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        h = convs_[l](h);
        if (l > 0) h = norms_[l](h);
        h = ops::leaky_relu(h, 0.2);
    }
    return head_(h);
}

nn::ParamList Discriminator::params() const {
    nn::ParamList p;
    for (std::size_t l = 0; l < convs_.size(); ++l) {
        convs_[l].collect("conv" + std::to_string(l) + ".", p);
        // The first layer has no norm; its unused parameters stay out of the list.
        if (l > 0) norms_[l].collect("norm" + std::to_string(l) + ".", p);
    }
    head_.collect("head.", p);
    return p;
}

ad::Var hinge_d_loss(const ad::Var& real_logits, const ad::Var& fake_logits) {
    const ad::Var r = ops::mean(ops::relu(ops::add_scalar(ops::scale(real_logits, -1.0), 1.0)));
    const ad::Var f = ops::mean(ops::relu(ops::add_scalar(fake_logits, 1.0)));
    return ops::add(r, f);
}

ad::Var hinge_g_loss(const ad::Var& fake_logits) { return ops::scale(ops::mean(fake_logits), -1.0); }

ad::Var lecam_penalty(const ad::Var& real_logits, const ad::Var& fake_logits, const LeCamState& state) {
    const ad::Var r = ops::mean(ops::square(ops::add_scalar(real_logits, -state.ema_fake)));
    const ad::Var f = ops::mean(ops::square(ops::add_scalar(fake_logits, -state.ema_real)));
    return ops::add(r, f);
}

LeCamState lecam_update(const LeCamState& state, double mean_real, double mean_fake) {
    LeCamState s = state;
    s.ema_real = state.decay * state.ema_real + (1.0 - state.decay) * mean_real;
    s.ema_fake = state.decay * state.ema_fake + (1.0 - state.decay) * mean_fake;
    return s;
}

ad::Var d_loss(const Discriminator& d, const Tensor& x, const Tensor& x_hat) {
    require_same_shape(x, x_hat, "d_loss");
    return hinge_d_loss(d(ad::constant(x)), d(ad::constant(x_hat)));
}

ad::Var g_loss(const Discriminator& d, const ad::Var& x_hat) { return hinge_g_loss(d(x_hat)); }

namespace {
double mean_of(const Tensor& t) { return std::accumulate(t.data.begin(), t.data.end(), 0.0) / static_cast<double>(t.numel()); }
} // namespace

LeCamResult lecam(const Discriminator& d, const Tensor& x, const Tensor& x_hat, const LeCamState& state) {
    require_same_shape(x, x_hat, "lecam");
    const ad::Var real = d(ad::constant(x));
    const ad::Var fake = d(ad::constant(x_hat));
    return {lecam_penalty(real, fake, state), lecam_update(state, mean_of(real.value()), mean_of(fake.value()))};
}

} // namespace regiontok::adversarial
