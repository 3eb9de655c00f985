// SPDX-License-Identifier: Apache-2.0
//
// Counter-based deterministic RNG used everywhere randomness is needed.
//
// The generator is SplitMix64 evaluated as a pure function of
// (key, counter), so any stream can be reproduced from its key alone and
// streams never interfere. Normal deviates use the Irwin-Hall sum of 12
// uniforms, which involves only IEEE-754 adds and multiplies and is
// therefore bit-identical across platforms (no libm calls).
#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace ebkit {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

// Derives the key of an independent stream from a run seed, a label naming
// the purpose of the stream, and an optional index (epoch, parameter id...).
constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view label,
                                   std::uint64_t index = 0) {
    return detail::splitmix64(detail::splitmix64(seed) ^ detail::fnv1a64(label) ^
                              index * detail::kGolden);
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    std::uint64_t next_u64() { return detail::splitmix64(key_ + counter_++ * detail::kGolden); }

    // Uniform in [0,1) from the top 53 bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Approximately standard normal via Irwin-Hall (12 uniforms), bounded
    // in [-6, 6]; exact-arithmetic only.
    double next_normal() {
        double s = 0.0;
        for (int i = 0; i < 12; ++i) s += next_unit();
        return s - 6.0;
    }

    // Standard normal conditioned on |z| <= cut, scaled by std.
    double next_trunc_normal(double std_dev, double cut = 2.0) {
        double z = next_normal();
        while (z < -cut || z > cut) z = next_normal();
        return z * std_dev;
    }

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::size_t n, CounterRng& rng) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.next_below(i));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace ebkit
