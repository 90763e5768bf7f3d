#pragma once

#include <cmath>
#include <cstdint>

namespace mixview {

// splitmix64 step; also used as the mixing function for seed derivation.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Deterministic, platform-independent RNG. std::mt19937_64 would also be
/// portable but its distributions are not; we hand-roll the few we need so
/// every stream is reproducible bit-for-bit from its seed.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        next_u64();
        next_u64();
    }

    uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0,1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Integer in [0, n). n must be positive.
    uint64_t next_below(uint64_t n) {
        // modulo bias is irrelevant at our n << 2^64
        return next_u64() % n;
    }

    /// Standard normal via Box-Muller (cached spare).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform01() < p; }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derives a child seed from a root seed and up to four stream tags.
/// Used everywhere an independent deterministic stream is needed
/// (per-image, per-epoch, per-view, ...).
inline uint64_t derive_seed(uint64_t root, uint64_t a, uint64_t b = 0, uint64_t c = 0,
                            uint64_t d = 0) {
    uint64_t s = root;
    (void)splitmix64(s);
    s ^= a + 0x9e3779b97f4a7c15ull;
    (void)splitmix64(s);
    s ^= b + 0xd1b54a32d192ed03ull;
    (void)splitmix64(s);
    s ^= c + 0x8cb92ba72f3d8dd7ull;
    (void)splitmix64(s);
    s ^= d + 0x2545f4914f6cdd1dull;
    return splitmix64(s);
}

/// Seed tag for bit-stable encoding of a double (guidance scales etc.).
inline uint64_t seed_tag(double v) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    __builtin_memcpy(&bits, &v, sizeof(bits));
    return bits;
}

}  // namespace mixview
