// Shared error types, seeded RNG, and small utilities.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pjx {

// Shape disagreement between tensors (dimension mismatch, illegal broadcast).
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition on otherwise well-shaped data (unnormalized map,
// non-scalar loss, out-of-range id).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: malformed files, missing paths, inconsistent config.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or unreadable on-disk artifacts.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. All randomness in the library (initialization, dropout,
// synthetic data, baselines) flows through an explicitly seeded instance so
// that identical seeds give bit-identical runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
};

// Reserved word-vocabulary ids shared by the dataset builder and the decoder.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kUnkId = 2;

// FNV-1a over bytes; used to fingerprint vocabularies in checkpoints.
inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace pjx
