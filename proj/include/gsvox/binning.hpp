// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/parallel.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace gsvox {

/// Two CSR indexes over the same Gaussian–tile pair multiset: one keyed by
/// Gaussian (backward pass), one keyed by tile (forward pass). Tile IDs
/// linearize x-fastest over the tile grid; t2g lists are ascending by
/// Gaussian ID, which pins the forward accumulation order.
struct DualCsr {
    std::vector<std::size_t> g2t_indptr;    // count+1
    std::vector<std::uint32_t> g2t_indices; // tile IDs
    std::vector<std::size_t> t2g_indptr;    // num_tiles+1
    std::vector<std::uint32_t> t2g_indices; // Gaussian IDs
    std::size_t pair_count = 0;
};

/// Half-open voxel index box.
struct VoxelBox {
    std::array<int, 3> lo = {0, 0, 0};
    std::array<int, 3> hi = {0, 0, 0};

    bool empty() const { return lo[0] >= hi[0] || lo[1] >= hi[1] || lo[2] >= hi[2]; }
};

/// Voxel range of a tile, clipped to the grid dims at the edges.
inline VoxelBox tile_voxel_range(const VoxelGridSpec& spec, std::size_t tile_id) {
    const auto tg = spec.tile_grid();
    if (tile_id >= spec.num_tiles())
        throw std::out_of_range("tile_voxel_range: tile " + std::to_string(tile_id) +
                                " out of range");
    const int tx = static_cast<int>(tile_id % tg[0]);
    const int ty = static_cast<int>((tile_id / tg[0]) % tg[1]);
    const int tz = static_cast<int>(tile_id / (static_cast<std::size_t>(tg[0]) * tg[1]));
    VoxelBox box;
    const int t[3] = {tx, ty, tz};
    for (int k = 0; k < 3; ++k) {
        box.lo[k] = t[k] * spec.tile_dims[k];
        box.hi[k] = std::min(box.lo[k] + spec.tile_dims[k], spec.dims[k]);
    }
    return box;
}

namespace detail {

// Inclusive voxel-index support range of an AABB, clamped to the grid.
// Returns false when the box misses the grid entirely. The float→index
// conversion here is the single definition of "support" shared (by value,
// not by code) with the naive reference path: floor((x−origin)/voxel_size).
inline bool voxel_support_range(const VoxelGridSpec& spec, const Aabb& box, int lo[3],
                                int hi[3]) {
    for (int k = 0; k < 3; ++k) {
        const int l = static_cast<int>(std::floor((box.lo[k] - spec.origin[k]) / spec.voxel_size));
        const int h = static_cast<int>(std::floor((box.hi[k] - spec.origin[k]) / spec.voxel_size));
        if (h < 0 || l >= spec.dims[k])
            return false;
        lo[k] = std::max(l, 0);
        hi[k] = std::min(h, spec.dims[k] - 1);
    }
    return true;
}

// Inclusive tile-index range covering a voxel support range.
inline void tile_range_of(const VoxelGridSpec& spec, const int vlo[3], const int vhi[3],
                          int tlo[3], int thi[3]) {
    for (int k = 0; k < 3; ++k) {
        tlo[k] = vlo[k] / spec.tile_dims[k];
        thi[k] = vhi[k] / spec.tile_dims[k];
    }
}

} // namespace detail

/// Builds the dual CSR by pairing each Gaussian with every tile whose
/// (edge-clipped) voxel block intersects its radius_sigmas AABB. Gaussians
/// whose mean lies outside the grid still pair with every tile their support
/// box overlaps. Pair generation is parallel over contiguous Gaussian chunks
/// merged in chunk order, so the result is identical for any worker count.
inline DualCsr build_dual_csr(const GaussianSet& set, const std::vector<Covariance3>& covs,
                              const VoxelGridSpec& spec, double radius_sigmas = 3.0,
                              int num_threads = 1) {
    validate_grid_spec(spec);
    if (covs.size() != set.count)
        throw ValidationError("build_dual_csr: covariance count mismatch");
    if (!(radius_sigmas > 0.0))
        throw ValidationError("build_dual_csr: radius_sigmas must be > 0");
    const auto tg = spec.tile_grid();

    const int threads = resolve_threads(num_threads);
    const std::size_t workers =
        set.count == 0 ? 1 : std::min<std::size_t>(static_cast<std::size_t>(threads), set.count);
    std::vector<std::vector<std::uint32_t>> tile_buf(workers);   // tile ids, gaussian-major
    std::vector<std::vector<std::uint32_t>> count_buf(workers);  // tiles per gaussian

    parallel_chunks(set.count, static_cast<int>(workers),
                    [&](std::size_t w, std::size_t begin, std::size_t end) {
        auto& tiles = tile_buf[w];
        auto& counts = count_buf[w];
        counts.reserve(end - begin);
        for (std::size_t g = begin; g < end; ++g) {
            const Aabb box = gaussian_aabb(set.mean(g), covs[g], radius_sigmas);
            int vlo[3], vhi[3];
            std::uint32_t emitted = 0;
            if (detail::voxel_support_range(spec, box, vlo, vhi)) {
                int tlo[3], thi[3];
                detail::tile_range_of(spec, vlo, vhi, tlo, thi);
                for (int tz = tlo[2]; tz <= thi[2]; ++tz)
                    for (int ty = tlo[1]; ty <= thi[1]; ++ty)
                        for (int tx = tlo[0]; tx <= thi[0]; ++tx) {
                            tiles.push_back(static_cast<std::uint32_t>(
                                tx + tg[0] * (ty + static_cast<std::size_t>(tg[1]) * tz)));
                            ++emitted;
                        }
            }
            counts.push_back(emitted);
        }
    });

    DualCsr csr;
    csr.g2t_indptr.assign(set.count + 1, 0);
    std::size_t total = 0;
    {
        std::size_t g = 0;
        for (std::size_t w = 0; w < workers; ++w)
            for (std::uint32_t c : count_buf[w]) {
                csr.g2t_indptr[g] = total;
                total += c;
                ++g;
            }
        csr.g2t_indptr[set.count] = total;
    }
    csr.pair_count = total;
    csr.g2t_indices.reserve(total);
    for (std::size_t w = 0; w < workers; ++w)
        csr.g2t_indices.insert(csr.g2t_indices.end(), tile_buf[w].begin(), tile_buf[w].end());

    // (tile, gaussian) pairs; the list is already gaussian-ascending, so a
    // stable sort by tile alone yields (tile, gaussian) lexicographic order
    // and the within-tile sorted invariant.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    pairs.reserve(total);
    for (std::size_t g = 0; g < set.count; ++g)
        for (std::size_t p = csr.g2t_indptr[g]; p < csr.g2t_indptr[g + 1]; ++p)
            pairs.emplace_back(csr.g2t_indices[p], static_cast<std::uint32_t>(g));
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    // Run-length encode tile runs into t2g_indptr.
    const std::size_t num_tiles = spec.num_tiles();
    csr.t2g_indptr.assign(num_tiles + 1, 0);
    csr.t2g_indices.resize(total);
    for (std::size_t p = 0; p < total; ++p) {
        csr.t2g_indptr[pairs[p].first + 1]++;
        csr.t2g_indices[p] = pairs[p].second;
    }
    for (std::size_t t = 0; t < num_tiles; ++t)
        csr.t2g_indptr[t + 1] += csr.t2g_indptr[t];
    return csr;
}

inline DualCsr build_dual_csr(const GaussianSet& set, const VoxelGridSpec& spec,
                              double radius_sigmas = 3.0, int num_threads = 1) {
    return build_dual_csr(set, build_covariances(set, num_threads), spec, radius_sigmas,
                          num_threads);
}

/// Structural invariants: monotone indptr, matching pair multisets, sorted
/// within-tile lists. Throws ValidationError on violation.
inline void validate_dual_csr(const DualCsr& csr, std::size_t count, std::size_t num_tiles) {
    if (csr.g2t_indptr.size() != count + 1 || csr.t2g_indptr.size() != num_tiles + 1)
        throw ValidationError("DualCsr: indptr lengths mismatch");
    if (csr.g2t_indptr.front() != 0 || csr.g2t_indptr.back() != csr.pair_count ||
        csr.t2g_indptr.front() != 0 || csr.t2g_indptr.back() != csr.pair_count)
        throw ValidationError("DualCsr: indptr endpoints mismatch");
    for (std::size_t i = 0; i + 1 < csr.g2t_indptr.size(); ++i)
        if (csr.g2t_indptr[i] > csr.g2t_indptr[i + 1])
            throw ValidationError("DualCsr: g2t_indptr not nondecreasing");
    for (std::size_t i = 0; i + 1 < csr.t2g_indptr.size(); ++i)
        if (csr.t2g_indptr[i] > csr.t2g_indptr[i + 1])
            throw ValidationError("DualCsr: t2g_indptr not nondecreasing");
    for (std::size_t t = 0; t < num_tiles; ++t)
        for (std::size_t p = csr.t2g_indptr[t]; p + 1 < csr.t2g_indptr[t + 1]; ++p)
            if (csr.t2g_indices[p] >= csr.t2g_indices[p + 1])
                throw ValidationError("DualCsr: t2g tile list not strictly ascending");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> a, b;
    a.reserve(csr.pair_count);
    b.reserve(csr.pair_count);
    for (std::size_t g = 0; g < count; ++g)
        for (std::size_t p = csr.g2t_indptr[g]; p < csr.g2t_indptr[g + 1]; ++p)
            a.emplace_back(csr.g2t_indices[p], static_cast<std::uint32_t>(g));
    for (std::size_t t = 0; t < num_tiles; ++t)
        for (std::size_t p = csr.t2g_indptr[t]; p < csr.t2g_indptr[t + 1]; ++p)
            b.emplace_back(static_cast<std::uint32_t>(t), csr.t2g_indices[p]);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b)
        throw ValidationError("DualCsr: pair multisets of the two CSRs differ");
}

/// Debug dump: four lines, one array per line (g2t_indptr, g2t_indices,
/// t2g_indptr, t2g_indices), space-separated.
inline void dump_dual_csr(const DualCsr& csr, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw IoError(path + ": cannot open for writing");
    auto line = [&out](const auto& v) {
        for (std::size_t i = 0; i < v.size(); ++i)
            out << (i ? " " : "") << v[i];
        out << '\n';
    };
    line(csr.g2t_indptr);
    line(csr.g2t_indices);
    line(csr.t2g_indptr);
    line(csr.t2g_indices);
    if (!out)
        throw IoError(path + ": write failed");
}

} // namespace gsvox
