#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "drc/common.hpp"

namespace drc {

// Little-endian byte codec shared by the table IPC format, the fabric wire
// frames, and the task/model encodings.

class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) { append_le(v); }
    void u32(uint32_t v) { append_le(v); }
    void u64(uint64_t v) { append_le(v); }
    void i64(int64_t v) { append_le(static_cast<uint64_t>(v)); }
    void f64(double v) { append_le(std::bit_cast<uint64_t>(v)); }

    void raw(const void* data, size_t n) {
        const auto* p = static_cast<const uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void bytes(std::span<const uint8_t> b) { raw(b.data(), b.size()); }
    void str(std::string_view s) { raw(s.data(), s.size()); }

    /// Length-prefixed (u64) blob.
    void blob(std::span<const uint8_t> b) {
        u64(b.size());
        bytes(b);
    }

    const Bytes& data() const { return buf_; }
    Bytes take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

private:
    template <typename T>
    void append_le(T v) {
        for (size_t i = 0; i < sizeof(T); ++i)
            buf_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
    }

    Bytes buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

    uint8_t u8() { return read_le<uint8_t>(); }
    uint16_t u16() { return read_le<uint16_t>(); }
    uint32_t u32() { return read_le<uint32_t>(); }
    uint64_t u64() { return read_le<uint64_t>(); }
    int64_t i64() { return static_cast<int64_t>(read_le<uint64_t>()); }
    double f64() { return std::bit_cast<double>(read_le<uint64_t>()); }

    std::span<const uint8_t> raw(size_t n) {
        need(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    std::string str(size_t n) {
        auto s = raw(n);
        return std::string(reinterpret_cast<const char*>(s.data()), s.size());
    }
    Bytes blob() {
        uint64_t n = u64();
        auto s = raw(n);
        return Bytes(s.begin(), s.end());
    }

    size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }
    size_t position() const { return pos_; }

    void need(size_t n) const {
        if (data_.size() - pos_ < n) throw DecodeError("truncated buffer");
    }

private:
    template <typename T>
    T read_le() {
        need(sizeof(T));
        uint64_t v = 0;
        for (size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::span<const uint8_t> data_;
    size_t pos_ = 0;
};

}  // namespace drc
