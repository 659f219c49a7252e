#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace widthscale {

// SplitMix64 finalizer. Used both as the stream generator below and as the
// documented mixer for deriving per-run seeds from (base_seed, width, seed_index).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl64(std::uint64_t v, int s) noexcept {
    return (v << s) | (v >> (64 - s));
}

// Per-run stream seed: mix64(base ^ rot(width) ^ rot(seed_index)).
constexpr std::uint64_t run_stream_seed(std::uint64_t base_seed, std::uint64_t width,
                                        std::uint64_t seed_index) noexcept {
    return mix64(base_seed ^ rotl64(width + 0x632be59bd9b4e019ull, 17)
                           ^ rotl64(seed_index + 0x9e3779b97f4a7c15ull, 41));
}

// Derive an independent sub-stream seed from a stream seed and a role tag.
constexpr std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t tag) noexcept {
    return mix64(seed ^ rotl64(tag + 0xd1b54a32d192ed03ull, 29));
}

// Deterministic SplitMix64 stream with explicit Box-Muller gaussians, so that
// sampled values do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform01() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept {
        return lo + (hi - lo) * uniform01();
    }

    // Standard normal via Box-Muller with a cached spare.
    double gaussian() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace widthscale
