// Deterministic, platform-independent RNG streams.
//
// std::mt19937 is portable but the std distributions are not; every draw here
// goes through hand-rolled transforms so that a run is bit-reproducible from
// (config, seed) on any standard-conforming build.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mcam {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Mixes a seed with arbitrary tags (component names, repetition indices) so
// that derived streams are independent but reproducible.
inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = seed ^ 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;  // FNV-1a prime
    }
    uint64_t s = h;
    return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t index) {
    uint64_t s = mix_seed(seed, tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    return splitmix64(s);
}

// xoshiro256** stream seeded via splitmix64.
class RngStream {
public:
    explicit RngStream(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n) {
        // Multiply-shift rejection-free mapping is biased by < 2^-64 * n; at the
        // sizes used here (< 2^40) the bias is irrelevant, and it is branch-free.
        __uint128_t wide = static_cast<__uint128_t>(next_u64()) * n;
        return static_cast<uint64_t>(wide >> 64);
    }

    // Standard normal via Box-Muller (uses std::log/cos/sin which are
    // deterministic for a given libm).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace mcam
