#pragma once
// Portable deterministic random numbers.
//
// All randomness in the project flows through this header so that a given
// 64-bit seed produces bit-identical streams on every platform. The standard
// library engines are avoided on purpose: std::mt19937 is portable but the
// distributions (normal, uniform_real) are implementation-defined.
//
// Generator: xoshiro256++ seeded through splitmix64. Independent streams are
// derived by absorbing purpose tags into the seed with splitmix64, e.g.
// one stream per (seed, purpose, bag index).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace evsel {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// FNV-1a over bytes; used for split assignment by bag id.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            const std::uint64_t x = next_u64();
            if (x >= threshold) return x % n;
        }
    }

    // Inclusive integer range [lo, hi].
    std::int64_t range(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller; always consumes two uniforms.
    double normal() {
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), returned in ascending order.
    std::vector<std::uint32_t> sample_indices(std::uint32_t n, std::uint32_t k) {
        std::vector<std::uint32_t> pool(n);
        for (std::uint32_t i = 0; i < n; ++i) pool[i] = i;
        for (std::uint32_t i = 0; i < k; ++i) {
            const std::uint32_t j = i + static_cast<std::uint32_t>(below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
        return pool;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<std::uint64_t, 4> s_{};
};

// Stream derivation: absorb up to three purpose tags into the master seed.
inline Rng make_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                       std::uint64_t b = 0) {
    std::uint64_t sm = seed;
    std::uint64_t mixed = splitmix64(sm);
    sm = mixed ^ (tag * 0x9E3779B97F4A7C15ULL);
    mixed = splitmix64(sm);
    sm = mixed ^ (a * 0xBF58476D1CE4E5B9ULL);
    mixed = splitmix64(sm);
    sm = mixed ^ (b * 0x94D049BB133111EBULL);
    return Rng(splitmix64(sm));
}

// Purpose tags for named streams.
namespace stream_tag {
inline constexpr std::uint64_t prototypes = 1;
inline constexpr std::uint64_t bag = 2;
inline constexpr std::uint64_t init_host = 3;
inline constexpr std::uint64_t init_selector = 4;
inline constexpr std::uint64_t init_grounding = 5;
inline constexpr std::uint64_t epoch_order = 6;
inline constexpr std::uint64_t subsample = 7;
inline constexpr std::uint64_t baseline = 8;
inline constexpr std::uint64_t oracle = 9;
}  // namespace stream_tag

}  // namespace evsel
