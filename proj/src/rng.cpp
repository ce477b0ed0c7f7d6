#include "delta/rng.hpp"

#include <cmath>
#include <numbers>

namespace delta {

std::uint64_t SplitMix64::below(std::uint64_t n) {
    if (n <= 1) {
        return 0;
    }
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next();
    } while (x >= limit);
    return x % n;
}

double SplitMix64::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) {
        u1 = 1e-300;
    }
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream) {
    // FNV-1a over the stream name, folded into the seed and mixed once.
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    SplitMix64 mix(global_seed ^ h);
    return mix.next();
}

} // namespace delta
