#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "relvit/errors.hpp"

namespace relvit {

// Little-endian binary encoding shared by dictionary snapshots and checkpoints.

class BinaryWriter {
public:
    void u8(std::uint8_t v) { buffer_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void str(std::string_view s) {
        u64(s.size());
        buffer_.append(s.data(), s.size());
    }
    void matrix(const Eigen::MatrixXd& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }
    void bytes(std::string_view s) { buffer_.append(s.data(), s.size()); }

    const std::string& buffer() const { return buffer_; }
    std::string take() { return std::move(buffer_); }

private:
    void raw(const void* p, std::size_t n) { buffer_.append(static_cast<const char*>(p), n); }

    std::string buffer_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::string_view data) : data_(data) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32() { return pod<std::uint32_t>(); }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    double f64() { return pod<double>(); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    Eigen::MatrixXd matrix() {
        const std::uint64_t rows = u64();
        const std::uint64_t cols = u64();
        if (rows != 0 && cols > (remaining() / sizeof(double)) / rows) {
            throw LoadError("payload truncated (matrix " + std::to_string(rows) + "x" + std::to_string(cols) + ")");
        }
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        const std::size_t n = sizeof(double) * rows * cols;
        need(n);
        std::memcpy(m.data(), data_.data() + pos_, n);
        pos_ += n;
        return m;
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }

private:
    template <typename T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n) const {
        if (n > remaining()) {
            throw LoadError("payload truncated at byte " + std::to_string(pos_));
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

/// FNV-1a 64-bit digest.
inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace relvit
