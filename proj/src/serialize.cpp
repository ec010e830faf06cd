#include "regiontok/serialize.hpp"

#include "regiontok/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace regiontok {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void BinaryWriter::u32(std::uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { buf_.append(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
}

void BinaryWriter::doubles(const std::vector<double>& v) {
    u64(v.size());
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

void BinaryWriter::ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i64(x);
}

void BinaryWriter::tensor(const Tensor& t) {
    ints(t.shape);
    doubles(t.data);
}

std::string_view BinaryReader::take(std::size_t n) {
    if (n > data_.size() - pos_) throw ParseError("binary payload truncated", 0);
    const auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
}

std::uint8_t BinaryReader::u8() { return static_cast<std::uint8_t>(take(1)[0]); }

std::uint32_t BinaryReader::u32() {
    std::uint32_t v;
    std::memcpy(&v, take(sizeof v).data(), sizeof v);
    return v;
}

std::uint64_t BinaryReader::u64() {
    std::uint64_t v;
    std::memcpy(&v, take(sizeof v).data(), sizeof v);
    return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::str() {
    const auto n = u64();
    return std::string(take(n));
}

std::vector<double> BinaryReader::doubles() {
    const auto n = u64();
    if (n > (data_.size() - pos_) / sizeof(double)) throw ParseError("binary payload truncated", 0);
    std::vector<double> v(n);
    std::memcpy(v.data(), take(n * sizeof(double)).data(), n * sizeof(double));
    return v;
}

std::vector<int> BinaryReader::ints() {
    const auto n = u64();
    if (n > (data_.size() - pos_) / 8) throw ParseError("binary payload truncated", 0);
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(i64());
    return v;
}

Tensor BinaryReader::tensor() {
    Shape shape = ints();
    for (int d : shape)
        if (d < 0) throw ParseError("negative tensor dimension", 0);
    std::vector<double> data = doubles();
    if (data.size() != shape_numel(shape)) throw ParseError("tensor data does not match its shape", 0);
    return Tensor(std::move(shape), std::move(data));
}

void write_envelope(const std::string& path, std::string_view magic, std::uint32_t version, const std::string& payload) {
    BinaryWriter head;
    head.u32(version);
    head.u64(payload.size());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    out.write(head.bytes().data(), static_cast<std::streamsize>(head.bytes().size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    const std::uint64_t sum = fnv1a64(payload);
    out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
    if (!out) throw IoError("failed writing '" + path + "'");
}

std::string read_envelope(const std::string& path, std::string_view magic, std::uint32_t version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    const std::size_t head = magic.size() + 12;
    if (bytes.size() < head + 8) throw ParseError("'" + path + "' is too short to be a regiontok file", 0);
    if (std::string_view(bytes).substr(0, magic.size()) != magic)
        throw ParseError("'" + path + "' has the wrong file signature", 0);
    BinaryReader r(std::string_view(bytes).substr(magic.size(), 12));
    const auto file_version = r.u32();
    const auto size = r.u64();
    if (file_version != version)
        throw VersionError("'" + path + "' has format version " + std::to_string(file_version) + ", expected " +
                           std::to_string(version));
    if (size != bytes.size() - head - 8) throw ChecksumError("'" + path + "' has an inconsistent payload size");
    std::string payload = bytes.substr(head, size);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + head + size, sizeof stored);
    if (stored != fnv1a64(payload)) throw ChecksumError("'" + path + "' failed checksum verification");
    return payload;
}

const Tensor& TensorArchive::get(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw ValueError("tensor archive has no entry '" + name + "'");
    return it->second;
}

void TensorArchive::save(const std::string& path) const {
    BinaryWriter w;
    w.u64(entries_.size());
    for (const auto& [name, t] : entries_) {
        w.str(name);
        w.tensor(t);
    }
    write_envelope(path, kMagic, kVersion, w.bytes());
}

TensorArchive TensorArchive::load(const std::string& path) {
    const std::string payload = read_envelope(path, kMagic, kVersion);
    BinaryReader r(payload);
    TensorArchive a;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = r.str();
        a.put(name, r.tensor());
    }
    return a;
}

} // namespace regiontok
