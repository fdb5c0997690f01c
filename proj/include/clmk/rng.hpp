#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace clmk {

// Counter-based pseudo-random generator, fully specified so that streams are
// reproducible across platforms and implementations.
//
// Core definitions:
//   finalize(z) : the SplitMix64 output function
//       z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//       z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//       return z ^ (z >> 31)
//   counter_hash(seed, i) = finalize(seed + (i + 1) * 0x9E3779B97F4A7C15)
//
// The i-th draw of the stream keyed by `seed` is counter_hash(seed, i); it
// depends only on (seed, i), never on iteration order.

inline constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline uint64_t rng_finalize(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t counter_hash(uint64_t seed, uint64_t counter) {
    return rng_finalize(seed + (counter + 1) * kGolden);
}

// 64-bit FNV-1a over the raw bytes of a string.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

// Map to [0, 1): take the top 53 bits.
inline double to_unit(uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Map to (0, 1]; safe as a log() argument.
inline double to_unit_open(uint64_t x) {
    return (static_cast<double>(x >> 11) + 1.0) * 0x1.0p-53;
}

// Per-record inclusion draw for Bernoulli sampling. The chain is fixed:
//   h = finalize(epoch_seed + GOLDEN)
//   h = finalize(h ^ fnv1a64(video_id))
//   h = finalize(h ^ frame_idx)
//   u = to_unit(h)
inline double record_draw(uint64_t epoch_seed, std::string_view video_id, uint64_t frame_idx) {
    uint64_t h = rng_finalize(epoch_seed + kGolden);
    h = rng_finalize(h ^ fnv1a64(video_id));
    h = rng_finalize(h ^ frame_idx);
    return to_unit(h);
}

// Sequential stream over the counter generator.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() { return counter_hash(seed_, counter_++); }
    double next_unit() { return to_unit(next_u64()); }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller; consumes exactly two draws.
    double next_normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = to_unit_open(next_u64());
        const double u2 = to_unit(next_u64());
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * z;
    }

    // Normal redrawn until |z| <= 2, then scaled; matches the usual
    // truncated-normal weight init.
    double next_trunc_normal(double mean, double stddev) {
        double z = next_normal();
        while (std::fabs(z) > 2.0) z = next_normal();
        return mean + stddev * z;
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

private:
    uint64_t seed_;
    uint64_t counter_ = 0;
};

// Fisher-Yates permutation of {0, ..., n-1} driven by the counter stream.
inline std::vector<size_t> shuffle_indices(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    CounterRng rng(seed);
    for (size_t i = n; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.next_u64() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

} // namespace clmk
