#include "regiontok/errors.hpp"
#include "regiontok/serialize.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace regiontok;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
}

} // namespace

TEST(Serialize, Fnv1aReferenceValues) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(Serialize, WriterReaderRoundTrip) {
    BinaryWriter w;
    w.u8(7);
    w.u32(0xDEADBEEF);
    w.i64(-42);
    w.f64(-0.0);
    w.f64(1.0 / 3.0);
    w.str("hello");
    w.doubles({1.5, -2.5});
    w.ints({3, -1, 9});
    const Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    w.tensor(t);
    BinaryReader r(w.bytes());
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u32(), 0xDEADBEEF);
    EXPECT_EQ(r.i64(), -42);
    const double nz = r.f64();
    EXPECT_TRUE(std::signbit(nz));
    EXPECT_EQ(r.f64(), 1.0 / 3.0);
    EXPECT_EQ(r.str(), "hello");
    EXPECT_EQ(r.doubles(), (std::vector<double>{1.5, -2.5}));
    EXPECT_EQ(r.ints(), (std::vector<int>{3, -1, 9}));
    const Tensor back = r.tensor();
    EXPECT_EQ(back.shape, t.shape);
    EXPECT_EQ(back.data, t.data);
    EXPECT_TRUE(r.at_end());
    EXPECT_THROW(r.u8(), ParseError);
}

TEST(Serialize, EnvelopeDetectsCorruption) {
    const auto dir = regiontok::testing::temp_dir("serialize_env");
    const std::string path = dir + "/a.bin";
    write_envelope(path, "TESTMAG1", 3, "payload bytes");
    EXPECT_EQ(read_envelope(path, "TESTMAG1", 3), "payload bytes");
    EXPECT_THROW(read_envelope(path, "OTHERMAG", 3), ParseError);
    EXPECT_THROW(read_envelope(path, "TESTMAG1", 4), VersionError);
    EXPECT_THROW(read_envelope(dir + "/missing.bin", "TESTMAG1", 3), IoError);

    std::string bytes = slurp(path);
    std::string flipped = bytes;
    flipped[22] ^= 0x01;
    dump(path, flipped);
    EXPECT_THROW(read_envelope(path, "TESTMAG1", 3), ChecksumError);
    dump(path, bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_envelope(path, "TESTMAG1", 3), ChecksumError);
    dump(path, bytes.substr(0, 5));
    EXPECT_THROW(read_envelope(path, "TESTMAG1", 3), ParseError);
}

TEST(Serialize, TensorArchive) {
    const auto dir = regiontok::testing::temp_dir("serialize_archive");
    TensorArchive a;
    a.put("x", Tensor({2}, std::vector<double>{1, 2}));
    a.put("w", Tensor({1, 1}, 5.0));
    a.save(dir + "/a.rtk");
    const auto b = TensorArchive::load(dir + "/a.rtk");
    EXPECT_TRUE(b.contains("w"));
    EXPECT_EQ(b.get("x").data, (std::vector<double>{1, 2}));
    EXPECT_THROW(b.get("nope"), ValueError);
}
