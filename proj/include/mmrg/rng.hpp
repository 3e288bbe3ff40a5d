#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mmrg {

inline constexpr uint64_t golden_gamma = 0x9e3779b97f4a7c15ULL;

// splitmix64 finalizer.
inline constexpr uint64_t mix64(uint64_t x) {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Counter-based generator: the i-th output is a pure function of (key, i),
// so any element of a stream can be regenerated without replaying it.
class counter_rng {
public:
    explicit constexpr counter_rng(uint64_t key = 0) : key_(key) {}

    // Independent substream keyed by a label (tensor name, purpose tag, ...).
    constexpr counter_rng derive(std::string_view label) const {
        return counter_rng(mix64(key_ ^ fnv1a64(label)));
    }
    constexpr counter_rng derive(uint64_t index) const {
        return counter_rng(mix64(key_ ^ mix64(index + golden_gamma)));
    }

    constexpr uint64_t at(uint64_t i) const { return mix64(key_ + (i + 1) * golden_gamma); }

    constexpr uint64_t next_u64() { return at(counter_++); }

    // Uniform in [0, 1) with 53 random bits.
    static constexpr double to_unit(uint64_t v) { return static_cast<double>(v >> 11) * 0x1.0p-53; }
    constexpr double uniform() { return to_unit(next_u64()); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; consumes two draws, discards the sine half.
    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    constexpr uint64_t key() const { return key_; }
    constexpr uint64_t counter() const { return counter_; }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

} // namespace mmrg
