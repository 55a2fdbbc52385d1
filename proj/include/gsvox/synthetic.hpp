// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic scenes and byte hashing shared by the benchmark, the
// gradient checker CLI and the test suites.

#pragma once

#include "gsvox/core.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace gsvox {

struct SceneConfig {
    std::size_t count = 100;
    int feature_dim = 8;
    double scale_min = 0.15;
    double scale_max = 0.5;
    double opacity_min = 0.2;
    double opacity_max = 1.0;
    // Fraction of Gaussians whose mean is pushed outside the grid while the
    // 3σ box still overlaps it (the out-of-range regression scenario).
    double outside_fraction = 0.0;
    std::uint64_t seed = 1;
};

/// Seeded random scene over a grid. Deterministic for a fixed seed.
inline GaussianSet random_gaussian_set(const VoxelGridSpec& spec, const SceneConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> scale_dist(cfg.scale_min, cfg.scale_max);
    std::uniform_real_distribution<double> opacity_dist(cfg.opacity_min, cfg.opacity_max);

    const Vec3 lo = spec.origin;
    const Vec3 hi = spec.max_corner();
    GaussianSet set(cfg.feature_dim);
    const std::size_t n_outside = static_cast<std::size_t>(cfg.outside_fraction * cfg.count);
    for (std::size_t i = 0; i < cfg.count; ++i) {
        Gaussian g;
        g.scale = Vec3(scale_dist(rng), scale_dist(rng), scale_dist(rng));
        Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
        while (q.norm() < 1e-3)
            q = Vec4(normal(rng), normal(rng), normal(rng), normal(rng));
        g.quat = q / q.norm();
        g.opacity = opacity_dist(rng);
        g.feature.resize(cfg.feature_dim);
        for (int c = 0; c < cfg.feature_dim; ++c)
            g.feature[c] = normal(rng);
        for (int k = 0; k < 3; ++k)
            g.mean[k] = lo[k] + unit(rng) * (hi[k] - lo[k]);
        if (i < n_outside) {
            // Push past a random face by up to 2 of the largest scale; the
            // 3-scale support box still reaches back into the grid.
            const int axis = static_cast<int>(unit(rng) * 3.0) % 3;
            const bool high = unit(rng) < 0.5;
            const double bump = (0.5 + 1.5 * unit(rng)) * g.scale.maxCoeff();
            g.mean[axis] = high ? hi[axis] + bump : lo[axis] - bump;
        }
        set.push_back(g);
    }
    return set;
}

/// Seeded upstream gradient Ḡ (standard normal entries).
inline std::vector<double> random_upstream(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> up(n);
    for (auto& u : up)
        u = normal(rng);
    return up;
}

// ---- Hashing (determinism checks, scene fingerprints) ----

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_doubles(const std::vector<double>& v, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(v.data(), v.size() * sizeof(double), h);
}

inline std::uint64_t hash_gaussian_set(const GaussianSet& set) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    h = hash_doubles(set.means, h);
    h = hash_doubles(set.quats, h);
    h = hash_doubles(set.scales, h);
    h = hash_doubles(set.opacities, h);
    h = hash_doubles(set.features, h);
    return h;
}

} // namespace gsvox
