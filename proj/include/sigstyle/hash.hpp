#pragma once

#include <cstdint>
#include <string_view>

namespace sigstyle {

// 64-bit FNV-1a; used to derive stable per-name RNG streams.
constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace sigstyle
