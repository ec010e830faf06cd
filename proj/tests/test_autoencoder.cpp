#include "regiontok/autoencoder.hpp"
#include "regiontok/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace regiontok;
using namespace regiontok::autoencoder;
using regiontok::testing::check_gradient;
using regiontok::testing::random_tensor;

namespace {

AutoencoderConfig tiny() {
    AutoencoderConfig c;
    c.downsample = 4;
    c.base_width = 8;
    c.res_blocks = 1;
    c.codebook_size = 16;
    c.embed_dim = 4;
    c.seed = 5;
    return c;
}

} // namespace

TEST(Autoencoder, FullScaleConfiguration) {
    const auto p = AutoencoderConfig::full_scale();
    EXPECT_EQ(p.downsample, 16);
    EXPECT_EQ(p.base_width, 256);
    EXPECT_EQ(p.res_blocks, 4);
    EXPECT_EQ(p.codebook_size, 16384);
    EXPECT_EQ(p.embed_dim, 256);
    // Five resolution levels, four downsampling steps.
    EXPECT_EQ(p.stages(), 4);
    EXPECT_EQ(stage_widths(p).size(), 5u);
}

TEST(Autoencoder, ValidationNamesTheField) {
    auto c = tiny();
    c.downsample = 6;
    try {
        c.validate();
        FAIL();
    } catch (const ValueError& e) {
        EXPECT_NE(std::string(e.what()).find("downsample"), std::string::npos);
    }
}

TEST(Autoencoder, ShapesAndRange) {
    const Tokenizer tok(tiny());
    const Tensor x = random_tensor({2, 3, 16, 12}, 301, 0.0, 1.0);
    const auto fw = tok.forward(ad::constant(x));
    EXPECT_EQ(fw.latents.shape(), (Shape{2, 4, 4, 3}));
    EXPECT_EQ(fw.latent_rows.shape(), (Shape{24, 4}));
    EXPECT_EQ(fw.reconstruction.shape(), x.shape);
    for (double v : fw.reconstruction.value().data) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(tok.encode(ad::constant(Tensor({1, 3, 10, 12}))), ShapeError);
}

TEST(Autoencoder, TokenizeDetokenizeMatchesReconstruct) {
    const Tokenizer tok(tiny());
    const Tensor x = random_tensor({2, 3, 8, 8}, 302, 0.0, 1.0);
    const auto grids = tok.tokenize(x);
    ASSERT_EQ(grids.size(), 2u);
    EXPECT_EQ(grids[0].height, 2);
    EXPECT_EQ(grids[0].width, 2);
    const Tensor a = tok.detokenize(grids), b = tok.reconstruct(x);
    EXPECT_EQ(a.data, b.data);
    auto bad = grids[0];
    bad.tokens[3] = 16;
    EXPECT_THROW(tok.detokenize(bad), ValueError);
}

TEST(Autoencoder, SameSeedSameWeights) {
    const Tokenizer a(tiny()), b(tiny());
    const auto pa = a.encoder_params(), pb = b.encoder_params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa.items()[i].second.value().data, pb.items()[i].second.value().data);
    auto c = tiny();
    c.seed = 6;
    const Tokenizer d(c);
    EXPECT_NE(d.encoder_params().items()[0].second.value().data, pa.items()[0].second.value().data);
}

TEST(Autoencoder, ReconstructionLossGradientThroughDecoder) {
    const Tokenizer tok(tiny());
    const Tensor x = random_tensor({1, 3, 8, 8}, 303, 0.0, 1.0);
    const Tensor zq = random_tensor({1, 4, 2, 2}, 304);
    // L_rec = mean |D(zq) - x| as a function of the decoder input.
    EXPECT_LT(check_gradient([&](const ad::Var& z) { return ops::mean(ops::abs(ops::sub(tok.decode(z), ad::constant(x)))); }, zq)
                  .relative_error,
              1e-4);
}

TEST(Autoencoder, StraightThroughRoutesDecoderGradientToEncoder) {
    const Tokenizer tok(tiny());
    const Tensor x = random_tensor({1, 3, 8, 8}, 305, 0.0, 1.0);
    const auto fw = tok.forward(ad::constant(x));
    auto enc = tok.encoder_params();
    enc.zero_grad();
    ops::mean(fw.reconstruction).backward();
    EXPECT_GT(enc.grad_norm(), 0.0);
    // Forward value of the quantized map equals the codebook rows.
    const auto& q = fw.quantized.value();
    const auto& rows = fw.assignment.quantized;
    EXPECT_EQ(ops::nchw_to_rows(ad::constant(q)).value().data, rows.data);
}
