#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

// Portable deterministic randomness. std::mt19937_64's output sequence is fixed
// by the standard, the distribution classes are not, so the conversions live here.
namespace bncap::random {

using Engine = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double unit(Engine& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform double in [lo, hi).
inline double uniform(Engine& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

/// Integer in [0, bound). Multiply-shift reduction; bound must be positive.
inline std::uint64_t below(Engine& rng, std::uint64_t bound) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * bound) >> 64);
}

template <typename T>
void shuffle(std::span<T> items, Engine& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(below(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// SplitMix64 finalizer, used to combine seeds.
inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace bncap::random
