#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace viloc {

// All randomness in the pipeline funnels through this hierarchy: every
// consumer derives its own engine from (global seed, purpose string), so
// adding or reordering one consumer never shifts the draws of another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
    // FNV-1a over the purpose string, then splitmix64 to spread bits.
    std::uint64_t h = 14695981039346656037ull;
    for (char c : purpose) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    std::uint64_t z = seed ^ h;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view purpose) {
    return std::mt19937_64(derive_seed(seed, purpose));
}

}  // namespace viloc
