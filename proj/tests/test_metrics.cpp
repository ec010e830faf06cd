#include "regiontok/errors.hpp"
#include "regiontok/metrics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

using namespace regiontok;
using namespace regiontok::metrics;
using regiontok::testing::random_tensor;

namespace {

// Exhaustive edit distance: explores every insert/delete/substitute path with
// a depth bound, independent of the dynamic-programming table.
int brute_distance(std::string_view a, std::string_view b) {
    std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
        if (i == a.size()) return static_cast<int>(b.size() - j);
        if (j == b.size()) return static_cast<int>(a.size() - i);
        if (a[i] == b[j]) return go(i + 1, j + 1);
        return 1 + std::min({go(i + 1, j), go(i, j + 1), go(i + 1, j + 1)});
    };
    return go(0, 0);
}

} // namespace

TEST(Metrics, EditDistanceExamples) {
    EXPECT_EQ(levenshtein("kitten", "sitting"), 3);
    EXPECT_EQ(levenshtein("", "abc"), 3);
    EXPECT_EQ(levenshtein("abc", "abc"), 0);
    EXPECT_NEAR(ned("kitten", "sitting"), 1.0 - 3.0 / 7.0, 1e-15);
    EXPECT_NEAR(round4(ned("kitten", "sitting")), 0.5714, 1e-12);
    EXPECT_EQ(ned("AB", "AB"), 1.0);
    EXPECT_EQ(ned("", "AB"), 0.0);
    EXPECT_THROW(ned("", ""), ValueError);
}

TEST(Metrics, NedMatchesBruteForceOnRandomPairs) {
    Rng rng(701);
    const std::string letters = "ABC";
    for (int trial = 0; trial < 1000; ++trial) {
        std::string a, b;
        const auto la = uniform_index(rng, 7), lb = uniform_index(rng, 7);
        for (std::size_t i = 0; i < la; ++i) a += letters[uniform_index(rng, 3)];
        for (std::size_t i = 0; i < lb; ++i) b += letters[uniform_index(rng, 3)];
        if (a.empty() && b.empty()) continue;
        const int d = brute_distance(a, b);
        ASSERT_EQ(levenshtein(a, b), d) << a << " / " << b;
        const double want = 1.0 - static_cast<double>(d) / static_cast<double>(std::max(a.size(), b.size()));
        EXPECT_EQ(ned(a, b), want);
        EXPECT_EQ(ned(a, b), ned(b, a));
    }
}

TEST(Metrics, LongRandomPairsStayInRange) {
    Rng rng(702);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string a, b;
        const auto la = 1 + uniform_index(rng, 12), lb = uniform_index(rng, 13);
        for (std::size_t i = 0; i < la; ++i) a += static_cast<char>('A' + uniform_index(rng, 4));
        for (std::size_t i = 0; i < lb; ++i) b += static_cast<char>('A' + uniform_index(rng, 4));
        const double v = ned(a, b);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        // Triangle-style bound: the distance never exceeds the longer length.
        EXPECT_LE(levenshtein(a, b), static_cast<int>(std::max(a.size(), b.size())));
    }
}

TEST(Metrics, ExactMatchAccuracyNormalizes) {
    EXPECT_EQ(t_acc("  Hello ", "hello"), 1);
    EXPECT_EQ(t_acc("AB", "A8"), 0);
    EXPECT_EQ(normalize_text(" AbC\t"), "abc");
}

TEST(Metrics, CosineSimilarity) {
    const std::vector<double> a{1, 2, 3}, b{-1, -2, -3}, c{3, 0, -1}, d{2, 4, 6};
    EXPECT_NEAR(f_sim(a, a), 1.0, 1e-15);
    EXPECT_NEAR(f_sim(a, b), -1.0, 1e-15);
    EXPECT_NEAR(f_sim(a, c), 0.0, 1e-15);
    EXPECT_NEAR(f_sim(a, d), 1.0, 1e-15);
    const std::vector<double> z{0, 0, 0};
    EXPECT_THROW(f_sim(a, z), ValueError);
    EXPECT_THROW(f_sim(a, std::vector<double>{1, 2}), ValueError);
}

TEST(Metrics, PsnrValues) {
    const Tensor x = random_tensor({1, 3, 8, 8}, 703, 0.0, 0.9);
    EXPECT_EQ(psnr(x, x), kPsnrCap);
    Tensor y = x;
    for (double& v : y.data) v += 0.1;
    EXPECT_NEAR(psnr(x, y), 20.0, 1e-9);
    const Tensor z = random_tensor({1, 3, 8, 8}, 704, 0.0, 1.0);
    EXPECT_EQ(psnr(x, z), psnr(z, x));
    EXPECT_THROW(psnr(x, Tensor({1, 3, 4, 4})), ShapeError);

    std::vector<bool> mask(64, false);
    EXPECT_FALSE(masked_psnr(x, y, mask).has_value());
    mask[5] = true;
    EXPECT_NEAR(*masked_psnr(x, y, mask), 20.0, 1e-9);
}

TEST(Metrics, BitsPerPixelTableValues) {
    EXPECT_NEAR(round4(bpp(1024, 8192, 512, 512)), 0.0508, 1e-12);
    EXPECT_NEAR(round4(bpp(2240, 4096, 512, 512)), 0.1025, 1e-12);
    EXPECT_NEAR(round4(bpp(1024, 64000, 512, 512)), 0.0624, 1e-12);
    EXPECT_NEAR(round4(bpp(1024, 262144, 512, 512)), 0.0703, 1e-12);
    EXPECT_NEAR(round4(bpp(1024, 131072, 512, 512)), 0.0664, 1e-12);
    EXPECT_NEAR(round4(bpp(1024, 16384, 512, 512)), 0.0547, 1e-12);
    EXPECT_EQ(bpp(1024, 16384, 512, 512), 1024.0 * 14.0 / (512.0 * 512.0));
}

TEST(Metrics, SizeGroups) {
    EXPECT_EQ(size_group(0.005, {}), SizeGroup::Small);
    EXPECT_EQ(size_group(0.03, {}), SizeGroup::Medium);
    EXPECT_EQ(size_group(0.2, {}), SizeGroup::Large);
}

TEST(Metrics, IdentityReconstructionScoresPerfectly) {
    const auto corpus = data::generate_mixed_corpus(20, {}, 705);
    std::vector<Tensor> recon;
    for (const auto& s : corpus.samples) recon.push_back(s.image);
    const auto report = evaluate_images(corpus, recon, default_face_embedder());
    ASSERT_FALSE(report.records.empty());
    EXPECT_EQ(report.psnr, kPsnrCap);
    ASSERT_TRUE(report.t_acc_m.has_value());
    EXPECT_EQ(*report.t_acc_m, 1.0);
    EXPECT_EQ(*report.t_ned_m, 1.0);
    ASSERT_TRUE(report.f_sim_m.has_value());
    EXPECT_NEAR(*report.f_sim_m, 1.0, 1e-12);
}

TEST(Metrics, NoiseReconstructionFailsTextReading) {
    const auto corpus = data::generate_text_corpus(20, {}, 706);
    std::vector<Tensor> recon;
    for (std::size_t i = 0; i < corpus.size(); ++i) recon.push_back(random_tensor({1, 3, 32, 32}, 800 + i, 0.0, 1.0));
    const auto report = evaluate_images(corpus, recon, default_face_embedder());
    double acc = 0.0;
    int n = 0;
    for (const auto& r : report.records) {
        acc += r.value;
        ++n;
    }
    ASSERT_GT(n, 0);
    EXPECT_LT(acc / n, 0.05);
}

TEST(Metrics, AggregatesAreMeansOfRecords) {
    const auto corpus = data::generate_mixed_corpus(30, {}, 707);
    std::vector<Tensor> recon;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        Tensor r = corpus.samples[i].image;
        const Tensor noise = random_tensor(r.shape, 900 + i, -0.15, 0.15);
        for (std::size_t k = 0; k < r.numel(); ++k) r.data[k] = std::clamp(r.data[k] + noise.data[k], 0.0, 1.0);
        recon.push_back(r);
    }
    const auto report = evaluate_images(corpus, recon, default_face_embedder());
    // "s" averages small instances, "m" averages all of them.
    auto mean_of = [&](RegionKind kind, bool small_only, bool use_ned) -> std::optional<double> {
        double s = 0.0;
        int n = 0;
        for (const auto& r : report.records)
            if (r.kind == kind && (!small_only || r.group == SizeGroup::Small)) {
                s += use_ned ? r.ned : r.value;
                ++n;
            }
        if (n == 0) return std::nullopt;
        return s / n;
    };
    auto same = [](std::optional<double> a, std::optional<double> b) {
        EXPECT_EQ(a.has_value(), b.has_value());
        if (a && b) {
            EXPECT_NEAR(*a, *b, 1e-12);
        }
    };
    same(report.t_acc_s, mean_of(RegionKind::Text, true, false));
    same(report.t_acc_m, mean_of(RegionKind::Text, false, false));
    same(report.t_ned_s, mean_of(RegionKind::Text, true, true));
    same(report.t_ned_m, mean_of(RegionKind::Text, false, true));
    same(report.f_sim_s, mean_of(RegionKind::Face, true, false));
    same(report.f_sim_m, mean_of(RegionKind::Face, false, false));
    for (const auto& col : {"T-ACC_s", "T-ACC_m", "T-NED_s", "T-NED_m", "F-Sim_s", "F-Sim_m", "PSNR", "BPP"})
        EXPECT_NE(report.table().find(col), std::string::npos) << col;
}

TEST(Metrics, FaceEmbeddingIsScaleInvariant) {
    const auto corpus = data::generate_face_corpus(1, {}, 708);
    const auto& s = corpus.samples[0];
    const auto emb = default_face_embedder();
    const auto a = emb.embed(s.image, s.regions[0]);
    EXPECT_EQ(emb.embed(s.image, s.regions[0]), a);
    std::vector<double> scaled = a;
    for (double& v : scaled) v *= 3.0;
    EXPECT_NEAR(f_sim(a, scaled), 1.0, 1e-12);
}
