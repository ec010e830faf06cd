#include "regiontok/errors.hpp"
#include "regiontok/nn.hpp"
#include "regiontok/ops.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace regiontok;
using regiontok::testing::check_gradient;
using regiontok::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-6;

Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int co = w.dim(0), k = w.dim(2);
    const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    Tensor out({n, co, oh, ow});
    for (int b_ = 0; b_ < n; ++b_)
        for (int o = 0; o < co; ++o)
            for (int r = 0; r < oh; ++r)
                for (int c = 0; c < ow; ++c) {
                    double s = b.data[o];
                    for (int i = 0; i < ci; ++i)
                        for (int kr = 0; kr < k; ++kr)
                            for (int kc = 0; kc < k; ++kc) {
                                const int y = r * stride + kr - pad, xx = c * stride + kc - pad;
                                if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                                s += w.at(o, i, kr, kc) * x.at(b_, i, y, xx);
                            }
                    out.at(b_, o, r, c) = s;
                }
    return out;
}

} // namespace

TEST(Ops, ElementwiseGradients) {
    const Tensor x0 = random_tensor({2, 3, 4}, 1);
    const Tensor other = random_tensor({2, 3, 4}, 2);
    const auto sum_of = [](auto op) { return [op](const ad::Var& x) { return ops::sum(op(x)); }; };
    EXPECT_LT(check_gradient(sum_of([&](const ad::Var& x) { return ops::mul(x, ad::constant(other)); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([&](const ad::Var& x) { return ops::mul(x, x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::silu(x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::gelu(x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::tanh(x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::sigmoid(x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::square(x); }), x0).relative_error, kGradTol);
    // Kinks at 0 are avoided by the seeded draws.
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::abs(x); }), x0).relative_error, kGradTol);
    EXPECT_LT(check_gradient(sum_of([](const ad::Var& x) { return ops::leaky_relu(x, 0.2); }), x0).relative_error, kGradTol);
}

TEST(Ops, SharedSubexpressionAccumulates) {
    // y = sum(x * x + 3x) -> dy/dx = 2x + 3
    const Tensor x0 = random_tensor({5}, 3);
    ad::Var x = ad::parameter(x0);
    ops::sum(ops::add(ops::mul(x, x), ops::scale(x, 3.0))).backward();
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(x.grad().data[i], 2.0 * x0.data[i] + 3.0, 1e-12);
}

TEST(Ops, Conv2dMatchesDirectLoops) {
    const Tensor x = random_tensor({2, 3, 7, 6}, 4);
    const Tensor w = random_tensor({4, 3, 3, 3}, 5);
    const Tensor b = random_tensor({4}, 6);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            const Tensor got = ops::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), stride, pad).value();
            const Tensor want = conv_oracle(x, w, b, stride, pad);
            ASSERT_EQ(got.shape, want.shape);
            for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got.data[i], want.data[i], 1e-12);
        }
}

TEST(Ops, Conv2dGradients) {
    const Tensor x0 = random_tensor({1, 2, 5, 5}, 7);
    const Tensor w0 = random_tensor({3, 2, 3, 3}, 8);
    const Tensor b0 = random_tensor({3}, 9);
    const Tensor probe = random_tensor({1, 3, 3, 3}, 10);
    const auto loss = [&](const ad::Var& out) { return ops::sum(ops::mul(out, ad::constant(probe))); };
    EXPECT_LT(check_gradient([&](const ad::Var& x) { return loss(ops::conv2d(x, ad::constant(w0), ad::constant(b0), 2, 1)); }, x0)
                  .relative_error,
              kGradTol);
    EXPECT_LT(check_gradient([&](const ad::Var& w) { return loss(ops::conv2d(ad::constant(x0), w, ad::constant(b0), 2, 1)); }, w0)
                  .relative_error,
              kGradTol);
    EXPECT_LT(check_gradient([&](const ad::Var& b) { return loss(ops::conv2d(ad::constant(x0), ad::constant(w0), b, 2, 1)); }, b0)
                  .relative_error,
              kGradTol);
}

TEST(Ops, GroupNormNormalizesEachGroup) {
    const Tensor x = random_tensor({2, 4, 3, 3}, 11, -3.0, 5.0);
    const Tensor out =
        ops::group_norm(ad::constant(x), ad::constant(Tensor({4}, 1.0)), ad::constant(Tensor({4}, 0.0)), 2, 0.0).value();
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 2; ++g) {
            double m = 0.0, v = 0.0;
            for (int c = 2 * g; c < 2 * g + 2; ++c)
                for (int i = 0; i < 9; ++i) m += out.at(n, c, i / 3, i % 3);
            m /= 18.0;
            for (int c = 2 * g; c < 2 * g + 2; ++c)
                for (int i = 0; i < 9; ++i) v += std::pow(out.at(n, c, i / 3, i % 3) - m, 2);
            EXPECT_NEAR(m, 0.0, 1e-12);
            EXPECT_NEAR(v / 18.0, 1.0, 1e-9);
        }
}

TEST(Ops, NormalizationGradients) {
    const Tensor x0 = random_tensor({1, 4, 3, 3}, 12);
    const Tensor gamma = random_tensor({4}, 13, 0.5, 1.5);
    const Tensor beta = random_tensor({4}, 14);
    const Tensor probe = random_tensor({1, 4, 3, 3}, 15);
    EXPECT_LT(check_gradient(
                  [&](const ad::Var& x) {
                      return ops::sum(ops::mul(ops::group_norm(x, ad::constant(gamma), ad::constant(beta), 2), ad::constant(probe)));
                  },
                  x0)
                  .relative_error,
              kGradTol);
    const Tensor r0 = random_tensor({3, 6}, 16);
    const Tensor lg = random_tensor({6}, 17, 0.5, 1.5), lb = random_tensor({6}, 18);
    const Tensor lp = random_tensor({3, 6}, 19);
    EXPECT_LT(check_gradient(
                  [&](const ad::Var& x) {
                      return ops::sum(ops::mul(ops::layer_norm(x, ad::constant(lg), ad::constant(lb)), ad::constant(lp)));
                  },
                  r0)
                  .relative_error,
              kGradTol);
    EXPECT_LT(check_gradient(
                  [&](const ad::Var& g) {
                      return ops::sum(ops::mul(ops::layer_norm(ad::constant(r0), g, ad::constant(lb)), ad::constant(lp)));
                  },
                  lg)
                  .relative_error,
              kGradTol);
}

TEST(Ops, LinearAndEmbeddingGradients) {
    const Tensor x0 = random_tensor({3, 4}, 20);
    const Tensor w0 = random_tensor({5, 4}, 21);
    const Tensor b0 = random_tensor({5}, 22);
    const Tensor probe = random_tensor({3, 5}, 23);
    const auto loss = [&](const ad::Var& y) { return ops::sum(ops::mul(y, ad::constant(probe))); };
    EXPECT_LT(check_gradient([&](const ad::Var& x) { return loss(ops::linear(x, ad::constant(w0), ad::constant(b0))); }, x0).relative_error,
              kGradTol);
    EXPECT_LT(check_gradient([&](const ad::Var& w) { return loss(ops::linear(ad::constant(x0), w, ad::constant(b0))); }, w0).relative_error,
              kGradTol);
    const std::vector<int> ids{2, 0, 2};
    const Tensor table = random_tensor({3, 5}, 24);
    EXPECT_LT(check_gradient([&](const ad::Var& t) { return loss(ops::embedding(t, ids)); }, table).relative_error, kGradTol);
    EXPECT_THROW(ops::embedding(ad::constant(table), std::vector<int>{3}), ValueError);
}

TEST(Ops, CausalAttentionMatchesMaskedSoftmax) {
    const int t = 5, d = 4, heads = 2, hd = 2;
    const Tensor qkv = random_tensor({t, 3 * d}, 25);
    const Tensor out = ops::causal_attention(ad::constant(qkv), heads).value();
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < t; ++i) {
            std::vector<double> s(t, -INFINITY);
            double mx = -INFINITY;
            for (int j = 0; j <= i; ++j) {
                double dot = 0.0;
                for (int e = 0; e < hd; ++e) dot += qkv.data[i * 3 * d + h * hd + e] * qkv.data[j * 3 * d + d + h * hd + e];
                s[j] = dot / std::sqrt(2.0);
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (int j = 0; j < t; ++j) z += std::exp(s[j] - mx);
            for (int e = 0; e < hd; ++e) {
                double acc = 0.0;
                for (int j = 0; j < t; ++j) acc += std::exp(s[j] - mx) / z * qkv.data[j * 3 * d + 2 * d + h * hd + e];
                EXPECT_NEAR(out.data[i * d + h * hd + e], acc, 1e-12);
            }
        }
}

TEST(Ops, CausalAttentionIgnoresTheFuture) {
    Tensor qkv = random_tensor({6, 12}, 26);
    const Tensor base = ops::causal_attention(ad::constant(qkv), 2).value();
    for (int c = 0; c < 12; ++c) qkv.data[4 * 12 + c] += 3.0;
    const Tensor moved = ops::causal_attention(ad::constant(qkv), 2).value();
    for (int i = 0; i < 4 * 4; ++i) EXPECT_EQ(base.data[i], moved.data[i]);
}

TEST(Ops, AttentionAndCrossEntropyGradients) {
    const Tensor qkv = random_tensor({4, 12}, 27);
    const Tensor probe = random_tensor({4, 4}, 28);
    EXPECT_LT(check_gradient([&](const ad::Var& x) { return ops::sum(ops::mul(ops::causal_attention(x, 2), ad::constant(probe))); }, qkv)
                  .relative_error,
              kGradTol);
    const Tensor logits = random_tensor({3, 5}, 29, -2.0, 2.0);
    const std::vector<int> targets{4, 0, 2};
    EXPECT_LT(check_gradient([&](const ad::Var& l) { return ops::cross_entropy(l, targets); }, logits).relative_error, kGradTol);
    // Oracle: mean of log-sum-exp minus target logit.
    double want = 0.0;
    for (int r = 0; r < 3; ++r) {
        double z = 0.0;
        for (int v = 0; v < 5; ++v) z += std::exp(logits.data[r * 5 + v]);
        want += std::log(z) - logits.data[r * 5 + targets[r]];
    }
    EXPECT_NEAR(ops::cross_entropy(ad::constant(logits), targets).item(), want / 3.0, 1e-12);
}

TEST(Ops, BilinearSampleValuesAndGradients) {
    const Tensor img = random_tensor({1, 2, 4, 5}, 30);
    // Pixel centers reproduce the pixel values exactly.
    std::vector<double> centers;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 5; ++c) {
            centers.push_back(c + 0.5);
            centers.push_back(r + 0.5);
        }
    for (auto pad : {ops::Padding::Zero, ops::Padding::Clamp}) {
        const Tensor same = ops::bilinear_sample(ad::constant(img), centers, 4, 5, pad).value();
        for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(same.data[i], img.data[i], 1e-12);
    }
    // Midpoint between two centers averages them.
    const std::vector<double> mid{1.0, 0.5};
    const Tensor m = ops::bilinear_sample(ad::constant(img), mid, 1, 1, ops::Padding::Zero).value();
    EXPECT_NEAR(m.data[0], 0.5 * (img.at(0, 0, 0, 0) + img.at(0, 0, 0, 1)), 1e-12);
    // Zero padding fades to 0 outside; clamp repeats the border.
    const std::vector<double> outside{-3.0, -3.0};
    EXPECT_EQ(ops::bilinear_sample(ad::constant(img), outside, 1, 1, ops::Padding::Zero).value().data[0], 0.0);
    EXPECT_NEAR(ops::bilinear_sample(ad::constant(img), outside, 1, 1, ops::Padding::Clamp).value().data[0], img.at(0, 0, 0, 0),
                1e-12);

    std::vector<double> pts;
    Rng rng(31);
    for (int i = 0; i < 9; ++i) {
        pts.push_back(uniform(rng, -0.7, 5.6));
        pts.push_back(uniform(rng, -0.7, 4.6));
    }
    const Tensor probe = random_tensor({1, 2, 3, 3}, 32);
    for (auto pad : {ops::Padding::Zero, ops::Padding::Clamp})
        EXPECT_LT(check_gradient(
                      [&](const ad::Var& x) { return ops::sum(ops::mul(ops::bilinear_sample(x, pts, 3, 3, pad), ad::constant(probe))); },
                      img)
                      .relative_error,
                  kGradTol);
}

TEST(Ops, LayoutConversionsRoundTrip) {
    const Tensor x = random_tensor({2, 3, 2, 4}, 33);
    const ad::Var rows = ops::nchw_to_rows(ad::constant(x));
    ASSERT_EQ(rows.shape(), (Shape{16, 3}));
    EXPECT_EQ(rows.value().data[1 * 3 + 2], x.at(0, 2, 0, 1));
    const Tensor back = ops::rows_to_nchw(rows, 2, 3, 2, 4).value();
    EXPECT_EQ(back.data, x.data);
    const Tensor probe = random_tensor({16, 3}, 34);
    EXPECT_LT(check_gradient([&](const ad::Var& v) { return ops::sum(ops::mul(ops::nchw_to_rows(v), ad::constant(probe))); }, x)
                  .relative_error,
              kGradTol);
    const Tensor up = ops::upsample_nearest(ad::constant(x), 2).value();
    EXPECT_EQ(up.at(1, 2, 3, 7), x.at(1, 2, 1, 3));
}

TEST(Ops, StraightThroughPassesGradientUnchanged) {
    const Tensor z0 = random_tensor({3, 2}, 35);
    const Tensor q = random_tensor({3, 2}, 36);
    ad::Var z = ad::parameter(z0);
    const ad::Var st = ops::straight_through(z, q);
    EXPECT_EQ(st.value().data, q.data);
    const Tensor probe = random_tensor({3, 2}, 37);
    ops::sum(ops::mul(st, ad::constant(probe))).backward();
    EXPECT_EQ(z.grad().data, probe.data);
    ad::Var y = ad::parameter(z0);
    ops::sum(ops::stop_gradient(y)).backward();
    EXPECT_TRUE(y.grad().empty() || std::all_of(y.grad().data.begin(), y.grad().data.end(), [](double v) { return v == 0.0; }));
}

TEST(Nn, CosineScheduleShape) {
    EXPECT_NEAR(nn::cosine_lr(1.0, 0, 100, 0.05), 0.2, 1e-15);
    EXPECT_NEAR(nn::cosine_lr(1.0, 4, 100, 0.05), 1.0, 1e-15);
    EXPECT_NEAR(nn::cosine_lr(1.0, 5, 100, 0.05), 1.0, 1e-15);
    EXPECT_NEAR(nn::cosine_lr(1.0, 5 + 95 / 2, 100, 0.05), 0.5 * (1 + std::cos(M_PI * 47.0 / 95.0)), 1e-15);
    EXPECT_NEAR(nn::cosine_lr(1.0, 100, 100, 0.05), 0.0, 1e-15);
}

TEST(Nn, AdamStepMatchesHandComputation) {
    nn::ParamList p;
    ad::Var w = ad::parameter(Tensor({2, 2}, std::vector<double>{1.0, -2.0, 0.5, 3.0}));
    ad::Var b = ad::parameter(Tensor({2}, std::vector<double>{0.1, -0.1}));
    p.add("w", w);
    p.add("b", b);
    nn::Adam adam(p, {0.5, 0.9, 1e-8, 0.05});
    const Tensor gw({2, 2}, std::vector<double>{0.3, -0.1, 0.0, 2.0});
    w.node()->grad = gw;
    b.node()->grad = Tensor({2}, std::vector<double>{1.0, 1.0});
    adam.step(p, 0.01);
    for (int k = 0; k < 4; ++k) {
        const double g = gw.data[k];
        const double m = 0.5 * g / 0.5, v = 0.1 * g * g / 0.1;
        const double w0 = std::vector<double>{1.0, -2.0, 0.5, 3.0}[k];
        const double want = w0 - 0.01 * 0.05 * w0 - 0.01 * m / (std::sqrt(v) + 1e-8);
        EXPECT_NEAR(w.value().data[k], want, 1e-14);
    }
    // Rank-1 tensors are not decayed.
    EXPECT_NEAR(b.value().data[0], 0.1 - 0.01 * 1.0 / (1.0 + 1e-8), 1e-14);
}

TEST(Nn, ClipGradNorm) {
    nn::ParamList p;
    ad::Var a = ad::parameter(Tensor({2}, 0.0));
    p.add("a", a);
    a.node()->grad = Tensor({2}, std::vector<double>{3.0, 4.0});
    EXPECT_DOUBLE_EQ(nn::clip_grad_norm(p, 1.0), 5.0);
    EXPECT_NEAR(a.grad().data[0], 0.6, 1e-15);
    EXPECT_NEAR(a.grad().data[1], 0.8, 1e-15);
    EXPECT_NEAR(nn::clip_grad_norm(p, 1.0), 1.0, 1e-15);
}
