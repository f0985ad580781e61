#pragma once

#include <cstdint>
#include <string_view>

#include "omniflow/tensor.hpp"

namespace omniflow {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Deterministic value in [-1, 1] derived from a 64-bit key.
inline double hash_unit(std::uint64_t key) {
    const std::uint64_t m = splitmix64(key);
    return static_cast<double>(m >> 11) * 0x1.0p-52 - 1.0;
}

/// One embedding row per key: entry j = hash_unit(mix(key, j)).
inline void fill_hash_row(Tensor& t, std::size_t row, std::uint64_t key) {
    const std::size_t d = t.cols();
    for (std::size_t j = 0; j < d; ++j) {
        t.at(row, j) = hash_unit(splitmix64(key) ^ (0x9E3779B97F4A7C15ULL * (j + 1)));
    }
}

}  // namespace omniflow
