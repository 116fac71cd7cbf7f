// Dense row-major tensor of 64-bit reals plus the PJXT binary container.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pjx/common.hpp"

namespace pjx {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

    Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t d) const { return shape_.at(d); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-2 access (rows x cols).
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    // Rank-3 access (channels x rows x cols).
    double& at(std::size_t c, std::size_t n, std::size_t m) {
        return data_[(c * shape_[1] + n) * shape_[2] + m];
    }
    double at(std::size_t c, std::size_t n, std::size_t m) const {
        return data_[(c * shape_[1] + n) * shape_[2] + m];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    static std::size_t checked_size(const Shape& s) {
        if (s.empty()) throw ShapeError("tensor shape must have at least one extent");
        std::size_t n = 1;
        for (std::size_t e : s) {
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
            n *= e;
        }
        return n;
    }

    Shape shape_;
    std::vector<double> data_;
};

// --- PJXT container -------------------------------------------------------
//
// magic "PJXT", version u8 = 1, ndim u8, ndim little-endian u32 extents,
// then row-major little-endian IEEE-754 doubles.

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64_le(std::string& out, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline std::string encode_pjxt(const Tensor& t) {
    if (t.ndim() > 255) throw IoError("tensor rank too large for container");
    std::string out;
    out.reserve(6 + 4 * t.ndim() + 8 * t.size());
    out += "PJXT";
    out.push_back(static_cast<char>(1));  // version
    out.push_back(static_cast<char>(t.ndim()));
    for (std::size_t e : t.shape()) {
        if (e > 0xffffffffULL) throw IoError("tensor extent too large for container");
        detail::put_u32_le(out, static_cast<std::uint32_t>(e));
    }
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64_le(out, t[i]);
    return out;
}

inline Tensor decode_pjxt(const std::string& bytes, const std::string& origin) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 6 || std::memcmp(p, "PJXT", 4) != 0)
        throw IoError(origin + ": bad magic, not a PJXT tensor");
    if (p[4] != 1) throw IoError(origin + ": unsupported PJXT version " + std::to_string(int(p[4])));
    const std::size_t ndim = p[5];
    if (ndim == 0) throw IoError(origin + ": zero-rank tensor");
    std::size_t off = 6;
    if (bytes.size() < off + 4 * ndim) throw IoError(origin + ": truncated PJXT header");
    Shape shape(ndim);
    std::size_t count = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
        shape[d] = detail::get_u32_le(p + off);
        off += 4;
        if (shape[d] == 0) throw IoError(origin + ": zero extent in PJXT shape");
        count *= shape[d];
    }
    if (bytes.size() != off + 8 * count)
        throw IoError(origin + ": truncated PJXT payload, expected " +
                      std::to_string(off + 8 * count) + " bytes, got " +
                      std::to_string(bytes.size()));
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i, off += 8) data[i] = detail::get_f64_le(p + off);
    return Tensor(std::move(shape), std::move(data));
}

inline void save_pjxt(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_pjxt(t);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

inline Tensor load_pjxt(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return decode_pjxt(buf.str(), path.string());
}

}  // namespace pjx
