#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "bibldr/numcore/tensor.hpp"

namespace bibldr::numcore {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; mixes a base seed with stream identifiers.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(base);
    for (auto s : stream) h = mix(h ^ mix(s + 0x51ed27e3ULL));
    return h;
}

inline Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

inline Tensor normal_tensor(Shape shape, double mean, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

/// Linear-layer initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor(std::move(shape), -bound, bound, rng);
}

}  // namespace bibldr::numcore
