#pragma once

#include <cstdint>

namespace flowfilt {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Independent child seed for stream `stream` of `base`. Used to give every
/// trial, and every consumer inside a trial, its own generator.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix_seed(mix_seed(base) ^ mix_seed(stream + 0x632BE59BD9B4E019ULL));
}

}  // namespace flowfilt
