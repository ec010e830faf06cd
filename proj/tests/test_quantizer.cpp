#include "regiontok/errors.hpp"
#include "regiontok/ops.hpp"
#include "regiontok/quantizer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace regiontok;
using namespace regiontok::quantizer;
using regiontok::testing::check_gradient;
using regiontok::testing::random_tensor;

namespace {

int brute_nearest(const Tensor& codes, const double* z, int d) {
    int best = 0;
    double bd = INFINITY;
    for (int k = 0; k < codes.dim(0); ++k) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += (z[j] - codes.data[k * d + j]) * (z[j] - codes.data[k * d + j]);
        if (s < bd) {
            bd = s;
            best = k;
        }
    }
    return best;
}

} // namespace

TEST(Quantizer, AssignmentMatchesBruteForce) {
    Rng rng(201);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = 1 + static_cast<int>(uniform_index(rng, 16)), d = 1 + static_cast<int>(uniform_index(rng, 6));
        const Codebook cb = Codebook::random(k, d, 0.1, rng);
        const Tensor z = random_tensor({3, d}, 1000 + trial, -2.0, 2.0);
        const auto res = assign(cb, z);
        for (int i = 0; i < 3; ++i) {
            EXPECT_EQ(res.indices[i], brute_nearest(cb.embeddings, z.data.data() + i * d, d));
            for (int j = 0; j < d; ++j) EXPECT_EQ(res.quantized.data[i * d + j], cb.embeddings.data[res.indices[i] * d + j]);
        }
    }
}

TEST(Quantizer, TiesGoToLowestIndex) {
    const Codebook cb = Codebook::from_embeddings(Tensor({3, 1}, std::vector<double>{1.0, -1.0, 1.0}), 0.1);
    const auto res = assign(cb, Tensor({2, 1}, std::vector<double>{0.0, 1.0}));
    EXPECT_EQ(res.indices[0], 0);
    EXPECT_EQ(res.indices[1], 0);
}

TEST(Quantizer, FullBatchEmaWithUnitMomentumIsALloydStep) {
    Rng rng(202);
    Codebook cb = Codebook::random(8, 2, 1.0, rng);
    const Tensor pts = random_tensor({200, 2}, 203, -2.0, 2.0);
    const Tensor before = cb.embeddings;
    const auto res = assign(cb, pts);
    ema_update(cb, pts, res.indices);
    // Lloyd: each centroid moves to the mean of its points; empty ones stay.
    for (int k = 0; k < 8; ++k) {
        double sx = 0, sy = 0;
        int n = 0;
        for (int i = 0; i < 200; ++i)
            if (brute_nearest(before, pts.data.data() + 2 * i, 2) == k) {
                sx += pts.data[2 * i];
                sy += pts.data[2 * i + 1];
                ++n;
            }
        const double ex = n ? sx / n : before.data[2 * k], ey = n ? sy / n : before.data[2 * k + 1];
        EXPECT_NEAR(cb.embeddings.data[2 * k], ex, 1e-10);
        EXPECT_NEAR(cb.embeddings.data[2 * k + 1], ey, 1e-10);
        EXPECT_NEAR(cb.cluster_count[k], n, 1e-12);
    }
}

TEST(Quantizer, EmaMovesStatisticsByMu) {
    Codebook cb = Codebook::from_embeddings(Tensor({2, 1}, std::vector<double>{0.0, 10.0}), 0.25);
    const Tensor z({2, 1}, std::vector<double>{1.0, 3.0});
    ema_update(cb, z, std::vector<int>{0, 0});
    // S0 = 0.75*0 + 0.25*4 = 1, N0 = 0.75 + 0.5 = 1.25 -> e0 = 0.8
    EXPECT_NEAR(cb.cluster_sum.data[0], 1.0, 1e-15);
    EXPECT_NEAR(cb.cluster_count[0], 1.25, 1e-15);
    EXPECT_NEAR(cb.embeddings.data[0], 0.8, 1e-15);
    // Unused code decays: N1 = 0.75, S1 = 7.5, e1 stays 10.
    EXPECT_NEAR(cb.cluster_count[1], 0.75, 1e-15);
    EXPECT_NEAR(cb.embeddings.data[1], 10.0, 1e-12);
}

TEST(Quantizer, RestartReseedsDeadCodesFromData) {
    Rng rng(204);
    Codebook cb = Codebook::random(6, 2, 0.5, rng);
    cb.cluster_count = {2.0, 0.5, 1.0, 0.0, 0.99, 3.0};
    const Tensor z = random_tensor({10, 2}, 205);
    Rng restart(206);
    const int n = restart_dead_codes(cb, z, restart);
    EXPECT_EQ(n, 3);
    for (int k : {1, 3, 4}) {
        EXPECT_EQ(cb.cluster_count[k], 1.0);
        bool from_data = false;
        for (int i = 0; i < 10; ++i)
            from_data |= cb.embeddings.data[2 * k] == z.data[2 * i] && cb.embeddings.data[2 * k + 1] == z.data[2 * i + 1];
        EXPECT_TRUE(from_data);
        EXPECT_EQ(cb.cluster_sum.data[2 * k], cb.embeddings.data[2 * k]);
    }
    EXPECT_EQ(cb.cluster_count[2], 1.0);
}

TEST(Quantizer, CommitmentLossValueAndGradient) {
    const Tensor z0 = random_tensor({4, 3}, 207);
    const Tensor q = random_tensor({4, 3}, 208);
    double want = 0.0;
    for (std::size_t i = 0; i < 12; ++i) want += (z0.data[i] - q.data[i]) * (z0.data[i] - q.data[i]);
    EXPECT_NEAR(commitment_loss(ad::constant(z0), q).item(), want / 12.0, 1e-15);
    EXPECT_LT(check_gradient([&](const ad::Var& z) { return commitment_loss(z, q); }, z0).relative_error, 1e-6);
}

TEST(Quantizer, Utilization) {
    Rng rng(209);
    const Codebook cb = Codebook::random(8, 2, 0.1, rng);
    EXPECT_DOUBLE_EQ(utilization(cb, std::vector<int>{0, 0, 3, 7}), 3.0 / 8.0);
    EXPECT_DOUBLE_EQ(utilization(cb, std::vector<int>{}), 0.0);
}

TEST(Quantizer, RestartsRecoverCollapsedCodebook) {
    // All codes start far away from the data, so only restarts can use them.
    Rng rng(210);
    Codebook cb = Codebook::random(16, 2, 0.1, rng, 0.01);
    for (double& v : cb.embeddings.data) v += 50.0;
    cb.cluster_sum = cb.embeddings;
    Rng restart(211);
    double util = 0.0;
    for (int step = 0; step < 100; ++step) {
        const Tensor z = random_tensor({128, 2}, 3000 + step, -3.0, 3.0);
        const auto res = assign(cb, z);
        ema_update(cb, z, res.indices);
        restart_dead_codes(cb, z, restart);
        util = utilization(cb, assign(cb, z).indices);
    }
    EXPECT_GE(util, 0.95);
}
