#pragma once

// Patch discriminator with hinge losses and LeCAM regularization.

#include "regiontok/nn.hpp"

#include <cstdint>

namespace regiontok::adversarial {

struct DiscriminatorConfig {
    int base_width = 16;
    int layers = 2; // stride-2 4x4 convolutions before the logit head
    std::uint64_t seed = 0;
};

// [N, 3, H, W] -> [N, 1, H / 2^layers, W / 2^layers] patch logits.
class Discriminator {
public:
    Discriminator() = default;
    explicit Discriminator(const DiscriminatorConfig& config);

    ad::Var operator()(const ad::Var& images) const;
    nn::ParamList params() const;
    const DiscriminatorConfig& config() const { return config_; }

private:
    DiscriminatorConfig config_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::GroupNorm> norms_;
    nn::Conv2d head_;
};

inline constexpr double kLeCamDecay = 0.9;
inline constexpr double kLeCamWeight = 0.05;

struct LeCamState {
    double ema_real = 0.0;
    double ema_fake = 0.0;
    double decay = kLeCamDecay;

    friend bool operator==(const LeCamState&, const LeCamState&) = default;
};

// mean(max(0, 1 - real)) + mean(max(0, 1 + fake)).
ad::Var hinge_d_loss(const ad::Var& real_logits, const ad::Var& fake_logits);
// -mean(fake).
ad::Var hinge_g_loss(const ad::Var& fake_logits);
// mean((real - ema_fake)^2) + mean((fake - ema_real)^2) under the given state.
ad::Var lecam_penalty(const ad::Var& real_logits, const ad::Var& fake_logits, const LeCamState& state);
// Folds the current batch means into both EMAs.
LeCamState lecam_update(const LeCamState& state, double mean_real, double mean_fake);

// Gradients reach the discriminator only.
ad::Var d_loss(const Discriminator& d, const Tensor& x, const Tensor& x_hat);
// Gradients reach x_hat (and through it the generator).
ad::Var g_loss(const Discriminator& d, const ad::Var& x_hat);

struct LeCamResult {
    ad::Var loss;
    LeCamState state; // after the EMA update
};
LeCamResult lecam(const Discriminator& d, const Tensor& x, const Tensor& x_hat, const LeCamState& state);

} // namespace regiontok::adversarial
