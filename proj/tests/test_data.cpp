#include "regiontok/data.hpp"
#include "regiontok/errors.hpp"
#include "regiontok/glyphs.hpp"
#include "regiontok/image_io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace regiontok;
using regiontok::testing::random_tensor;

TEST(Glyphs, AlphabetAndExtent) {
    EXPECT_EQ(glyphs::alphabet().size(), 36u);
    EXPECT_TRUE(glyphs::has_glyph('Q'));
    EXPECT_FALSE(glyphs::has_glyph('q'));
    EXPECT_THROW(glyphs::glyph('#'), ValueError);
    EXPECT_EQ(glyphs::text_extent(3, 4, 3, 2), (geometry::BoundingBox{3, 4, 3 + 34, 4 + 14}));
    // Every glyph is distinct.
    std::set<glyphs::Bitmap> seen;
    for (char c : glyphs::alphabet()) seen.insert(glyphs::glyph(c));
    EXPECT_EQ(seen.size(), 36u);
}

TEST(Glyphs, RecognizerReadsRenderedStrings) {
    Rng rng(601);
    for (int trial = 0; trial < 200; ++trial) {
        const int scale = 1 + static_cast<int>(uniform_index(rng, 2));
        const int len = 1 + static_cast<int>(uniform_index(rng, 4));
        std::string s;
        for (int i = 0; i < len; ++i) s += glyphs::alphabet()[uniform_index(rng, 36)];
        Tensor img({1, 3, 32, 64}, 0.9);
        glyphs::draw_text(img, s, 2, 3, scale, {0.1, 0.1, 0.1});
        const auto reading = glyphs::recognize(img, glyphs::text_extent(2, 3, len, scale), 0.5);
        EXPECT_EQ(reading.text, s);
    }
}

TEST(Glyphs, BlankCellsAreUnknown) {
    const Tensor img({1, 3, 16, 32}, 0.5);
    const auto reading = glyphs::recognize(img, glyphs::text_extent(1, 1, 2, 1), 0.5);
    EXPECT_EQ(reading.text, "??");
    Tensor small({1, 3, 8, 8}, 0.5);
    EXPECT_THROW(glyphs::draw_text(small, "ABC", 0, 0, 1, {0, 0, 0}), ValueError);
}

TEST(ImageIo, PngRoundTripIsExactOn8BitValues) {
    const auto dir = regiontok::testing::temp_dir("image_io");
    Tensor img = random_tensor({1, 3, 5, 7}, 602, 0.0, 1.0);
    quantize_to_8bit(img);
    write_png(dir + "/a.png", img);
    const Tensor back = read_png(dir + "/a.png");
    EXPECT_EQ(back.shape, img.shape);
    for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-15);
    EXPECT_THROW(read_png(dir + "/missing.png"), IoError);
}

TEST(Data, CorporaAreDeterministicAndValid) {
    data::MixedCorpusConfig cfg;
    const auto a = data::generate_mixed_corpus(40, cfg, 9), b = data::generate_mixed_corpus(40, cfg, 9);
    ASSERT_EQ(a.size(), 40u);
    int texts = 0, faces = 0, plain = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.samples[i].image.data, b.samples[i].image.data);
        EXPECT_EQ(a.samples[i].regions, b.samples[i].regions);
        if (a.samples[i].regions.empty()) ++plain;
        std::size_t face_idx = 0;
        for (const auto& r : a.samples[i].regions) {
            EXPECT_NO_THROW(validate(r));
            if (r.kind == RegionKind::Text) {
                ++texts;
                ASSERT_TRUE(r.transcript.has_value());
                EXPECT_EQ(glyphs::recognize(a.samples[i].image, r.box, 0.5).text, *r.transcript);
            } else {
                ++faces;
                const auto& t = a.samples[i].face_transforms.at(face_idx++);
                const auto tmpl = geometry::default_face_template();
                for (int k = 0; k < 5; ++k) {
                    const auto p = geometry::apply_transform(t, tmpl[k]);
                    EXPECT_NEAR(p.x, (*r.landmarks)[k].x, 1e-9);
                    EXPECT_NEAR(p.y, (*r.landmarks)[k].y, 1e-9);
                }
            }
        }
        for (double v : a.samples[i].image.data) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
    EXPECT_GT(texts, 0);
    EXPECT_GT(faces, 0);
    EXPECT_GT(plain, 0);
    const auto c = data::generate_mixed_corpus(40, cfg, 10);
    EXPECT_NE(c.samples[0].image.data, a.samples[0].image.data);
}

TEST(Data, CorpusRoundTripThroughDisk) {
    const auto dir = regiontok::testing::temp_dir("data_corpus");
    auto corpus = data::generate_mixed_corpus(12, {}, 3);
    data::save_corpus(corpus, dir);
    const auto back = data::load_corpus(dir + "/manifest.jsonl");
    ASSERT_EQ(back.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_EQ(back.samples[i].image.data, corpus.samples[i].image.data);
        EXPECT_EQ(back.samples[i].regions, corpus.samples[i].regions);
        EXPECT_EQ(back.samples[i].seed, corpus.samples[i].seed);
        EXPECT_EQ(back.samples[i].face_transforms.size(), corpus.samples[i].face_transforms.size());
    }
    std::filesystem::remove(dir + "/" + corpus.samples[4].image_path);
    try {
        data::load_corpus(dir + "/manifest.jsonl");
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("record 5"), std::string::npos) << e.what();
    }
}

TEST(Data, ManifestErrorsNameTheLine) {
    const auto dir = regiontok::testing::temp_dir("data_manifest");
    const std::string path = dir + "/m.jsonl";
    {
        std::ofstream out(path);
        out << R"({"version":1,"image":"a.png","regions":[]})" << "\n";
        out << R"({"version":1,"image":"b.png","regions":[{"kind":"face","box":[0,0,4,4],"landmarks":[[1,1],[2,2],[3,3],[1,2]]}]})"
            << "\n";
    }
    try {
        data::load_manifest(path);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("expected 5 landmarks, got 4"), std::string::npos) << e.what();
    }
    {
        std::ofstream out(path);
        out << "{not json\n";
    }
    EXPECT_THROW(data::load_manifest(path), ParseError);
    {
        std::ofstream out(path);
        out << R"({"version":7,"image":"a.png","regions":[]})" << "\n";
    }
    EXPECT_THROW(data::load_manifest(path), ParseError);
}

TEST(Data, BatchIteratorEpochsAndResume) {
    const auto corpus = data::generate_text_corpus(10, {}, 4);
    data::BatchIterator it(corpus, 3, 77);
    EXPECT_EQ(it.batches_per_epoch(), 3u);
    std::multiset<std::size_t> epoch;
    for (int b = 0; b < 3; ++b)
        for (auto i : it.next().indices) epoch.insert(i);
    EXPECT_EQ(epoch.size(), 9u);
    EXPECT_EQ(std::set<std::size_t>(epoch.begin(), epoch.end()).size(), 9u); // no repeats within an epoch

    data::BatchIterator a(corpus, 3, 78), b(corpus, 3, 78);
    for (int i = 0; i < 5; ++i) a.next();
    const std::string state = a.state();
    for (int i = 0; i < 5; ++i) b.next();
    data::BatchIterator c(corpus, 3, 78);
    c.restore(state);
    for (int i = 0; i < 7; ++i) {
        const auto x = a.next(), y = c.next();
        EXPECT_EQ(x.indices, y.indices);
        EXPECT_EQ(x.images.data, y.images.data);
    }
}

TEST(Data, AnnotatedFractionControlsTheMix) {
    data::MixedCorpusConfig cfg;
    cfg.plain = 0.5;
    cfg.text_only = 0.25;
    cfg.face_only = 0.25;
    const auto corpus = data::generate_mixed_corpus(60, cfg, 5);
    data::BatchIterator it(corpus, 10, 6, 0.8);
    int annotated = 0, total = 0;
    for (int i = 0; i < 200; ++i) {
        const auto b = it.next();
        annotated += b.annotated;
        total += 10;
        for (std::size_t k = 0; k < b.indices.size(); ++k)
            EXPECT_EQ(b.regions[k].empty(), corpus.samples[b.indices[k]].regions.empty());
    }
    EXPECT_NEAR(static_cast<double>(annotated) / total, 0.8, 0.03);
}
