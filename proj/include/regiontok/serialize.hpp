#pragma once

// Little-endian binary encoding shared by tensor archives and checkpoints.
//
// Every file is an envelope:
//   magic (8 bytes) | version (u32) | payload size (u64) | payload | FNV-1a 64 of payload (u64)

#include "regiontok/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace regiontok {

std::uint64_t fnv1a64(std::string_view bytes);

class BinaryWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v);
    void str(std::string_view s);
    void doubles(const std::vector<double>& v);
    void ints(const std::vector<int>& v);
    void tensor(const Tensor& t);

    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

// Throws ParseError (line 0) when the payload ends early.
class BinaryReader {
public:
    explicit BinaryReader(std::string_view bytes) : data_(bytes) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64();
    std::string str();
    std::vector<double> doubles();
    std::vector<int> ints();
    Tensor tensor();

    bool at_end() const { return pos_ == data_.size(); }

private:
    std::string_view take(std::size_t n);

    std::string_view data_;
    std::size_t pos_ = 0;
};

void write_envelope(const std::string& path, std::string_view magic, std::uint32_t version, const std::string& payload);

// Throws IoError, ParseError (bad magic, truncation), VersionError or ChecksumError.
std::string read_envelope(const std::string& path, std::string_view magic, std::uint32_t version);

// Named tensors, stored in name order.
class TensorArchive {
public:
    static constexpr std::string_view kMagic = "RTKARCH1";
    static constexpr std::uint32_t kVersion = 1;

    void put(const std::string& name, Tensor t) { entries_[name] = std::move(t); }
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    // Throws ValueError when absent.
    const Tensor& get(const std::string& name) const;
    const std::map<std::string, Tensor>& entries() const { return entries_; }

    void save(const std::string& path) const;
    static TensorArchive load(const std::string& path);

private:
    std::map<std::string, Tensor> entries_;
};

} // namespace regiontok
