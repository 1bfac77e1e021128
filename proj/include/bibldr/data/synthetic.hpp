#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bibldr/data/dataset.hpp"
#include "bibldr/numcore/random.hpp"

namespace bibldr::data {

struct BlockDatasetSpec {
    std::size_t drugs = 20;
    std::size_t diseases = 15;
    double in_block_rate = 1.0;  // noise-free by default: the label is a function of the two clusters
    double off_block_rate = 0.0;
    double in_similarity_lo = 0.6, in_similarity_hi = 0.9;
    double off_similarity_lo = 0.0, off_similarity_hi = 0.2;
};

/// Two drug clusters x two disease clusters (contiguous halves). Associations
/// occur at in_block_rate inside matching blocks and off_block_rate elsewhere;
/// similarities are high within a cluster and low across.
inline Dataset make_block_dataset(std::uint64_t seed, const BlockDatasetSpec& spec = {}) {
    numcore::Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto drug_cluster = [&](std::size_t i) { return i < spec.drugs / 2 ? 0 : 1; };
    auto disease_cluster = [&](std::size_t j) { return j < (spec.diseases + 1) / 2 ? 0 : 1; };

    auto similarity = [&](std::size_t n, auto cluster) {
        Tensor s(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) {
            s(i, i) = 1.0;
            for (std::size_t j = i + 1; j < n; ++j) {
                const bool same = cluster(i) == cluster(j);
                const double lo = same ? spec.in_similarity_lo : spec.off_similarity_lo;
                const double hi = same ? spec.in_similarity_hi : spec.off_similarity_hi;
                s(i, j) = s(j, i) = lo + (hi - lo) * unit(rng);
            }
        }
        return s;
    };
    Tensor su = similarity(spec.drugs, drug_cluster);
    Tensor sv = similarity(spec.diseases, disease_cluster);

    Tensor a(Shape{spec.drugs, spec.diseases});
    for (std::size_t i = 0; i < spec.drugs; ++i) {
        for (std::size_t j = 0; j < spec.diseases; ++j) {
            const double rate = drug_cluster(i) == disease_cluster(j) ? spec.in_block_rate : spec.off_block_rate;
            a(i, j) = unit(rng) < rate ? 1.0 : 0.0;
        }
    }
    return make_dataset(std::move(a), std::move(su), std::move(sv));
}

/// Similarity matrix S_ij = max(0, cos(x_i, x_j)) of n random unit vectors in R^dim.
inline Tensor unit_vector_similarity(std::size_t n, std::size_t dim, std::uint64_t seed) {
    numcore::Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> x(n, std::vector<double>(dim));
    for (auto& v : x) {
        double norm = 0.0;
        for (auto& c : v) {
            c = normal(rng);
            norm += c * c;
        }
        norm = std::sqrt(norm);
        for (auto& c : v) c /= norm;
    }
    Tensor s(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) {
        s(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < dim; ++c) dot += x[i][c] * x[j][c];
            s(i, j) = s(j, i) = std::max(0.0, std::min(1.0, dot));
        }
    }
    return s;
}

}  // namespace bibldr::data
