// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/binning.hpp"
#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/parallel.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace gsvox {

// Clamped-denominator constant: S_v = max(F_v, ε).
inline constexpr double kDenominatorEpsilon = 1e-6;

/// Forward splat result. `grid.density` holds F_v, `grid.features` holds the
/// normalized G_v = N_v / S_v; `denominators` holds S_v = max(F_v, ε), which
/// the backward pass consumes instead of recomputing.
struct SplatOutput {
    VoxelGrid grid;
    std::vector<double> denominators;
};

/// Occupancy head over the accumulated density: identity (o = F_v) or a
/// fixed affine-logistic o = a·σ(b·F_v). The mask is o > tau.
struct OccupancyHeadConfig {
    enum class Mode { identity, affine_logistic };
    Mode mode = Mode::identity;
    double tau = 0.3;
    double a = 1.0;
    double b = 1.0;
};

namespace detail {

// Packed per-Gaussian kernel parameters: mean, symmetric Σ⁻¹ (6), opacity.
struct Packed3 {
    double mx, my, mz;
    double ixx, ixy, ixz, iyy, iyz, izz;
    double alpha;
};

inline std::vector<Packed3> pack_gaussians(const GaussianSet& set,
                                           const std::vector<Covariance3>& covs) {
    std::vector<Packed3> packed(set.count);
    for (std::size_t g = 0; g < set.count; ++g) {
        const auto m = set.mean(g);
        const Mat3& inv = covs[g].inv;
        packed[g] = {m.x(), m.y(), m.z(), inv(0, 0), inv(0, 1), inv(0, 2),
                     inv(1, 1), inv(1, 2), inv(2, 2), set.opacities[g]};
    }
    return packed;
}

inline double density_at(const Packed3& p, double x, double y, double z) {
    const double dx = x - p.mx;
    const double dy = y - p.my;
    const double dz = z - p.mz;
    const double q = p.ixx * dx * dx + p.iyy * dy * dy + p.izz * dz * dz +
                     2.0 * (p.ixy * dx * dy + p.ixz * dx * dz + p.iyz * dy * dz);
    return p.alpha * std::exp(-0.5 * q);
}

inline void check_csr_matches(const DualCsr& csr, const GaussianSet& set,
                              const VoxelGridSpec& spec) {
    if (csr.g2t_indptr.size() != set.count + 1 || csr.t2g_indptr.size() != spec.num_tiles() + 1)
        throw ValidationError("splat: CSR shape does not match set/spec");
    for (std::uint32_t g : csr.t2g_indices)
        if (g >= set.count)
            throw ValidationError("splat: CSR pair index out of range");
}

} // namespace detail

/// Dual-CSR forward splat: per tile, each voxel accumulates
/// F_v = Σ w_{g,v}, N_v = Σ w_{g,v}·f_g over exactly that tile's Gaussian
/// list (ascending Gaussian ID), then G_v = N_v / max(F_v, ε). Tiles own
/// disjoint voxels, so the parallel loop needs no synchronization and the
/// result is bit-identical for every worker count.
inline SplatOutput splat_forward(const GaussianSet& set, const std::vector<Covariance3>& covs,
                                 const DualCsr& csr, const VoxelGridSpec& spec,
                                 int num_threads = 1) {
    validate_grid_spec(spec);
    detail::check_csr_matches(csr, set, spec);
    if (covs.size() != set.count)
        throw ValidationError("splat_forward: covariance count mismatch");
    const auto packed = detail::pack_gaussians(set, covs);
    const int C = set.feature_dim;
    const std::size_t nv = spec.num_voxels();

    SplatOutput out;
    out.grid.spec = spec;
    out.grid.feature_dim = C;
    out.grid.density.assign(nv, 0.0);
    out.grid.features.assign(nv * static_cast<std::size_t>(C), 0.0);
    out.denominators.assign(nv, 0.0);

    parallel_for(spec.num_tiles(), num_threads, [&](std::size_t tile) {
        const VoxelBox box = tile_voxel_range(spec, tile);
        for (std::size_t p = csr.t2g_indptr[tile]; p < csr.t2g_indptr[tile + 1]; ++p) {
            const std::uint32_t g = csr.t2g_indices[p];
            const detail::Packed3& pk = packed[g];
            const double* f = set.feature(g);
            for (int iz = box.lo[2]; iz < box.hi[2]; ++iz) {
                const double z = spec.origin[2] + (iz + 0.5) * spec.voxel_size;
                for (int iy = box.lo[1]; iy < box.hi[1]; ++iy) {
                    const double y = spec.origin[1] + (iy + 0.5) * spec.voxel_size;
                    for (int ix = box.lo[0]; ix < box.hi[0]; ++ix) {
                        const double x = spec.origin[0] + (ix + 0.5) * spec.voxel_size;
                        const double w = detail::density_at(pk, x, y, z);
                        const std::size_t v = spec.voxel_index(ix, iy, iz);
                        out.grid.density[v] += w;
                        double* row = out.grid.features.data() + v * C;
                        for (int c = 0; c < C; ++c)
                            row[c] += w * f[c];
                    }
                }
            }
        }
        // Normalize this tile's voxels.
        for (int iz = box.lo[2]; iz < box.hi[2]; ++iz)
            for (int iy = box.lo[1]; iy < box.hi[1]; ++iy)
                for (int ix = box.lo[0]; ix < box.hi[0]; ++ix) {
                    const std::size_t v = spec.voxel_index(ix, iy, iz);
                    const double s = std::max(out.grid.density[v], kDenominatorEpsilon);
                    out.denominators[v] = s;
                    double* row = out.grid.features.data() + v * C;
                    for (int c = 0; c < C; ++c)
                        row[c] /= s;
                }
    });
    return out;
}

inline SplatOutput splat_forward(const GaussianSet& set, const DualCsr& csr,
                                 const VoxelGridSpec& spec, int num_threads = 1) {
    return splat_forward(set, build_covariances(set, num_threads), csr, spec, num_threads);
}

/// Gaussian-to-BEV forward: the same accumulator scheme in 2D, with (x,y)
/// means and z-marginalized covariances. `bev_spec` must have nz = 1; tiles
/// collapse to (tx, ty, 1) blocks.
inline SplatOutput splat_bev_forward(const GaussianSet& set, const std::vector<Covariance3>& covs,
                                     const VoxelGridSpec& bev_spec, double radius_sigmas = 3.0,
                                     int num_threads = 1) {
    validate_grid_spec(bev_spec);
    if (bev_spec.dims[2] != 1)
        throw ValidationError("splat_bev_forward: bev_spec must have nz = 1");
    if (covs.size() != set.count)
        throw ValidationError("splat_bev_forward: covariance count mismatch");
    const int C = set.feature_dim;

    // Per-Gaussian 2D parameters: (x,y) mean, inverse of the z-marginal.
    struct Packed2 {
        double mx, my, ixx, ixy, iyy, alpha;
    };
    std::vector<Packed2> packed(set.count);
    for (std::size_t g = 0; g < set.count; ++g) {
        const Mat2 marg = marginalize_bev(covs[g]);
        const double det = marg(0, 0) * marg(1, 1) - marg(0, 1) * marg(1, 0);
        if (!(det > 0.0))
            throw ValidationError("splat_bev_forward: degenerate BEV marginal");
        const auto m = set.mean(g);
        packed[g] = {m.x(),          m.y(),           marg(1, 1) / det,
                     -marg(0, 1) / det, marg(0, 0) / det, set.opacities[g]};
    }

    // 2D pairing over the BEV tile grid via the x/y extent of the support box.
    const DualCsr csr = [&] {
        // Pair with the full z column: copy the spec and bin on x/y only by
        // flattening the support box z extent onto the single layer.
        DualCsr out;
        const auto tg = bev_spec.tile_grid();
        out.g2t_indptr.assign(set.count + 1, 0);
        std::vector<std::vector<std::uint32_t>> per_g(set.count);
        for (std::size_t g = 0; g < set.count; ++g) {
            const Vec3 mean = set.mean(g);
            const Vec3 half = radius_sigmas * covs[g].sigma.diagonal().cwiseSqrt();
            Aabb box{mean - half, mean + half};
            box.lo[2] = bev_spec.origin[2];
            box.hi[2] = bev_spec.origin[2];
            int vlo[3], vhi[3];
            if (!detail::voxel_support_range(bev_spec, box, vlo, vhi))
                continue;
            int tlo[3], thi[3];
            detail::tile_range_of(bev_spec, vlo, vhi, tlo, thi);
            for (int ty = tlo[1]; ty <= thi[1]; ++ty)
                for (int tx = tlo[0]; tx <= thi[0]; ++tx)
                    per_g[g].push_back(static_cast<std::uint32_t>(tx + tg[0] * ty));
        }
        std::size_t total = 0;
        for (std::size_t g = 0; g < set.count; ++g) {
            out.g2t_indptr[g] = total;
            total += per_g[g].size();
        }
        out.g2t_indptr[set.count] = total;
        out.pair_count = total;
        out.g2t_indices.reserve(total);
        for (auto& v : per_g)
            out.g2t_indices.insert(out.g2t_indices.end(), v.begin(), v.end());
        std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
        pairs.reserve(total);
        for (std::size_t g = 0; g < set.count; ++g)
            for (std::size_t p = out.g2t_indptr[g]; p < out.g2t_indptr[g + 1]; ++p)
                pairs.emplace_back(out.g2t_indices[p], static_cast<std::uint32_t>(g));
        std::stable_sort(pairs.begin(), pairs.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        out.t2g_indptr.assign(bev_spec.num_tiles() + 1, 0);
        out.t2g_indices.resize(total);
        for (std::size_t p = 0; p < total; ++p) {
            out.t2g_indptr[pairs[p].first + 1]++;
            out.t2g_indices[p] = pairs[p].second;
        }
        for (std::size_t t = 0; t < bev_spec.num_tiles(); ++t)
            out.t2g_indptr[t + 1] += out.t2g_indptr[t];
        return out;
    }();

    const std::size_t nv = bev_spec.num_voxels();
    SplatOutput out;
    out.grid.spec = bev_spec;
    out.grid.feature_dim = C;
    out.grid.density.assign(nv, 0.0);
    out.grid.features.assign(nv * static_cast<std::size_t>(C), 0.0);
    out.denominators.assign(nv, 0.0);

    parallel_for(bev_spec.num_tiles(), num_threads, [&](std::size_t tile) {
        const VoxelBox box = tile_voxel_range(bev_spec, tile);
        for (std::size_t p = csr.t2g_indptr[tile]; p < csr.t2g_indptr[tile + 1]; ++p) {
            const std::uint32_t g = csr.t2g_indices[p];
            const Packed2& pk = packed[g];
            const double* f = set.feature(g);
            for (int iy = box.lo[1]; iy < box.hi[1]; ++iy) {
                const double y = bev_spec.origin[1] + (iy + 0.5) * bev_spec.voxel_size;
                const double dy = y - pk.my;
                for (int ix = box.lo[0]; ix < box.hi[0]; ++ix) {
                    const double x = bev_spec.origin[0] + (ix + 0.5) * bev_spec.voxel_size;
                    const double dx = x - pk.mx;
                    const double q = pk.ixx * dx * dx + 2.0 * pk.ixy * dx * dy + pk.iyy * dy * dy;
                    const double w = pk.alpha * std::exp(-0.5 * q);
                    const std::size_t v = bev_spec.voxel_index(ix, iy, 0);
                    out.grid.density[v] += w;
                    double* row = out.grid.features.data() + v * C;
                    for (int c = 0; c < C; ++c)
                        row[c] += w * f[c];
                }
            }
        }
        for (int iy = box.lo[1]; iy < box.hi[1]; ++iy)
            for (int ix = box.lo[0]; ix < box.hi[0]; ++ix) {
                const std::size_t v = bev_spec.voxel_index(ix, iy, 0);
                const double s = std::max(out.grid.density[v], kDenominatorEpsilon);
                out.denominators[v] = s;
                double* row = out.grid.features.data() + v * C;
                for (int c = 0; c < C; ++c)
                    row[c] /= s;
            }
    });
    return out;
}

inline SplatOutput splat_bev_forward(const GaussianSet& set, const VoxelGridSpec& bev_spec,
                                     double radius_sigmas = 3.0, int num_threads = 1) {
    return splat_bev_forward(set, build_covariances(set, num_threads), bev_spec, radius_sigmas,
                             num_threads);
}

/// Per-voxel occupancy mask: o = head(F_v), mask = o > tau.
inline std::vector<std::uint8_t> occupancy_mask(const VoxelGrid& grid,
                                                const OccupancyHeadConfig& head) {
    if (!std::isfinite(head.tau))
        throw ValidationError("occupancy_mask: tau must be finite");
    std::vector<std::uint8_t> mask(grid.density.size());
    for (std::size_t v = 0; v < grid.density.size(); ++v) {
        const double f = grid.density[v];
        const double o = head.mode == OccupancyHeadConfig::Mode::identity
                             ? f
                             : head.a / (1.0 + std::exp(-head.b * f));
        mask[v] = o > head.tau ? 1 : 0;
    }
    return mask;
}

/// Elementwise conjunction of predicted, pseudo-label and visibility masks.
inline std::vector<std::uint8_t> compose_supervision_mask(const std::vector<std::uint8_t>& pred,
                                                          const std::vector<std::uint8_t>& pseudo,
                                                          const std::vector<std::uint8_t>& vis) {
    if (pred.size() != pseudo.size() || pred.size() != vis.size())
        throw ValidationError("compose_supervision_mask: length mismatch");
    std::vector<std::uint8_t> out(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i)
        out[i] = (pred[i] && pseudo[i] && vis[i]) ? 1 : 0;
    return out;
}

/// O^pred = mask × O: feature rows zeroed where the mask is false.
inline std::vector<double> masked_features(const std::vector<double>& features, int feature_dim,
                                           const std::vector<std::uint8_t>& mask) {
    if (feature_dim <= 0 || features.size() != mask.size() * static_cast<std::size_t>(feature_dim))
        throw ValidationError("masked_features: shape mismatch");
    std::vector<double> out(features.size(), 0.0);
    for (std::size_t v = 0; v < mask.size(); ++v)
        if (mask[v])
            for (int c = 0; c < feature_dim; ++c)
                out[v * feature_dim + c] = features[v * feature_dim + c];
    return out;
}

} // namespace gsvox
