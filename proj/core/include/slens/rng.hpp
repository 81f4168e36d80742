#pragma once

#include <cmath>
#include <cstdint>

namespace slens {

// xorshift64* — the one generator used everywhere so that runs are
// reproducible bit-for-bit regardless of platform libstdc++ internals.
struct xorshift_rng {
    uint64_t state;

    explicit xorshift_rng(uint64_t seed = 0x5EED5EEDull) : state(seed ? seed : 0x9E3779B97F4A7C15ull) {}

    uint64_t next_u64() {
        uint64_t x = state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state = x;
        return x * 0x2545F4914F6CDD1Dull;
    }

    // uniform in [0, 1)
    double next_double() {
        return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Box–Muller; one value per call, deterministic call order
    double gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) {
            u1 = next_double();
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
};

// spec-pinned seed for spectral start vectors
inline constexpr uint64_t k_spectral_seed = 0x5EED5EEDull;

} // namespace slens
