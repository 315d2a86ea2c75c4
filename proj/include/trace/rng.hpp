#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "trace/common.hpp"

namespace trace {

// SplitMix64. Every random decision in the pipeline draws from a named stream:
//   stream state = root_seed XOR fnv1a64(purpose)
// and the first next() applies the full mixer, so streams with different
// purposes are decorrelated even for adjacent root seeds. Stream names in use
// are listed in FORMATS.md; changing a name changes every downstream artifact.
struct Rng {
    uint64_t state = 0;

    Rng() = default;
    explicit Rng(uint64_t seed) : state(seed) {}
    Rng(uint64_t root_seed, std::string_view purpose) : state(root_seed ^ fnv1a64(purpose)) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0,1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // [0,n)
    int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

    // standard normal via Box-Muller; consumes exactly two u64 draws per call
    // (the second variate is discarded so consumption stays countable)
    double gauss() {
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1], log-safe
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }
};

}  // namespace trace
