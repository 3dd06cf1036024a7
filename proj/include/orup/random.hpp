#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace orup {

using Rng = std::mt19937_64;

// Uniform in [0,1) from exactly one engine draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Mixes a base seed with a stream index so independent streams never share a state.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::vector<double> normal_vector(Rng& rng, std::size_t n, double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> out(n);
    for (double& v : out) v = dist(rng);
    return out;
}

inline std::vector<double> uniform_vector(Rng& rng, std::size_t n, double lo, double hi) {
    std::vector<double> out(n);
    for (double& v : out) v = lo + (hi - lo) * uniform01(rng);
    return out;
}

}  // namespace orup
