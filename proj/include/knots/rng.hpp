// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace knots {

/// 64-bit FNV-1a; stable across platforms and standard library versions.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based uniform stream: the draw for `index` depends only on
/// (seed, key, index), never on how many draws came before it.
class KeyedUniform {
public:
    KeyedUniform(std::uint64_t seed, std::string_view key)
        : stream_(splitmix64(seed ^ splitmix64(fnv1a(key)))) {}

    /// Uniform double in [0, 1).
    double operator()(std::uint64_t index) const {
        const std::uint64_t bits = splitmix64(stream_ + index * 0xd1b54a32d192ed03ULL);
        return static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

private:
    std::uint64_t stream_;
};

}  // namespace knots
