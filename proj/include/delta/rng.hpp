#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace delta {

// SplitMix64. Integer-only state update so every platform reproduces the same
// stream; floating draws are derived from the top 53 bits.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform integer in [0, n) by rejection, no modulo bias.
    std::uint64_t below(std::uint64_t n);
    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    // Standard normal via Box-Muller (one draw per call, no caching).
    double normal();

    template <class T> void shuffle(std::vector<T> &v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t state_;
};

// Named sub-seed derived from a global seed: stages can be rerun independently.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream);

} // namespace delta
