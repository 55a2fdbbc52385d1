// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0
//
// Correctness-first reference implementations: the O(N_g·N_v) all-pairs
// splat paths (no CSR, no index structure) and the finite-difference
// gradient checker. The benchmark refuses to time anything until the fast
// paths agree with these, and the test suites use them as oracles. Nothing
// here may call into the dual-CSR assembly it is checking.

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/grad.hpp"
#include "gsvox/parallel.hpp"
#include "gsvox/splat.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace gsvox {

namespace detail {

// Per-Gaussian inclusive tile-index support range under the same support
// rule as the binning module: floor((aabb − origin)/voxel_size) clamped,
// then divided by the tile edge. has_support=false when the box misses the
// grid.
struct TileSupport {
    int lo[3] = {0, 0, 0};
    int hi[3] = {-1, -1, -1};
    bool has_support = false;
};

inline std::vector<TileSupport> tile_supports(const GaussianSet& set,
                                              const std::vector<Covariance3>& covs,
                                              const VoxelGridSpec& spec, double radius_sigmas) {
    std::vector<TileSupport> out(set.count);
    for (std::size_t g = 0; g < set.count; ++g) {
        const Aabb box = gaussian_aabb(set.mean(g), covs[g], radius_sigmas);
        int vlo[3], vhi[3];
        if (!voxel_support_range(spec, box, vlo, vhi))
            continue;
        tile_range_of(spec, vlo, vhi, out[g].lo, out[g].hi);
        out[g].has_support = true;
    }
    return out;
}

} // namespace detail

/// All-pairs forward: every voxel scans every Gaussian and accumulates those
/// whose tile support covers the voxel's tile. Per-voxel order is ascending
/// Gaussian ID, the same as the tiled path, so agreement is exact.
inline SplatOutput splat_forward_naive(const GaussianSet& set,
                                       const std::vector<Covariance3>& covs,
                                       const VoxelGridSpec& spec, double radius_sigmas = 3.0,
                                       int num_threads = 1) {
    validate_grid_spec(spec);
    const auto packed = detail::pack_gaussians(set, covs);
    const auto support = detail::tile_supports(set, covs, spec, radius_sigmas);
    const int C = set.feature_dim;
    const std::size_t nv = spec.num_voxels();

    SplatOutput out;
    out.grid.spec = spec;
    out.grid.feature_dim = C;
    out.grid.density.assign(nv, 0.0);
    out.grid.features.assign(nv * static_cast<std::size_t>(C), 0.0);
    out.denominators.assign(nv, 0.0);

    // Parallel over z-slices; each voxel is written by exactly one worker.
    parallel_for(static_cast<std::size_t>(spec.dims[2]), num_threads, [&](std::size_t izs) {
        const int iz = static_cast<int>(izs);
        const int tz = iz / spec.tile_dims[2];
        const double z = spec.origin[2] + (iz + 0.5) * spec.voxel_size;
        for (int iy = 0; iy < spec.dims[1]; ++iy) {
            const int ty = iy / spec.tile_dims[1];
            const double y = spec.origin[1] + (iy + 0.5) * spec.voxel_size;
            for (int ix = 0; ix < spec.dims[0]; ++ix) {
                const int tx = ix / spec.tile_dims[0];
                const double x = spec.origin[0] + (ix + 0.5) * spec.voxel_size;
                const std::size_t v = spec.voxel_index(ix, iy, iz);
                double F = 0.0;
                double* row = out.grid.features.data() + v * C;
                for (std::size_t g = 0; g < set.count; ++g) {
                    const auto& s = support[g];
                    if (!s.has_support || tx < s.lo[0] || tx > s.hi[0] || ty < s.lo[1] ||
                        ty > s.hi[1] || tz < s.lo[2] || tz > s.hi[2])
                        continue;
                    const double w = detail::density_at(packed[g], x, y, z);
                    F += w;
                    const double* f = set.feature(g);
                    for (int c = 0; c < C; ++c)
                        row[c] += w * f[c];
                }
                out.grid.density[v] = F;
                const double S = std::max(F, kDenominatorEpsilon);
                out.denominators[v] = S;
                for (int c = 0; c < C; ++c)
                    row[c] /= S;
            }
        }
    });
    return out;
}

/// All-pairs backward: every Gaussian scans every voxel of the grid in global
/// x-fastest order (vs. the tile-major order of the CSR path, so sums agree
/// to rounding, not bit-exactly).
inline GradientBuffers splat_backward_naive(const GaussianSet& set,
                                            const std::vector<Covariance3>& covs,
                                            const VoxelGridSpec& spec, const SplatOutput& forward,
                                            const std::vector<double>& upstream,
                                            double radius_sigmas = 3.0, int num_threads = 1) {
    const auto packed = detail::pack_gaussians(set, covs);
    const auto support = detail::tile_supports(set, covs, spec, radius_sigmas);
    const int C = set.feature_dim;
    GradientBuffers grads;
    grads.resize(set.count, C);

    parallel_for(set.count, num_threads, [&](std::size_t g) {
        const auto& sup = support[g];
        if (!sup.has_support)
            return;
        const detail::Packed3& pk = packed[g];
        const double* f = set.feature(g);
        double* df = grads.d_feature.data() + g * static_cast<std::size_t>(C);
        double dmean[3] = {0, 0, 0};
        double dcov[6] = {0, 0, 0, 0, 0, 0};
        double dalpha = 0.0;
        for (int iz = 0; iz < spec.dims[2]; ++iz) {
            const int tz = iz / spec.tile_dims[2];
            const double z = spec.origin[2] + (iz + 0.5) * spec.voxel_size;
            for (int iy = 0; iy < spec.dims[1]; ++iy) {
                const int ty = iy / spec.tile_dims[1];
                const double y = spec.origin[1] + (iy + 0.5) * spec.voxel_size;
                for (int ix = 0; ix < spec.dims[0]; ++ix) {
                    const int tx = ix / spec.tile_dims[0];
                    if (tx < sup.lo[0] || tx > sup.hi[0] || ty < sup.lo[1] || ty > sup.hi[1] ||
                        tz < sup.lo[2] || tz > sup.hi[2])
                        continue;
                    const double x = spec.origin[0] + (ix + 0.5) * spec.voxel_size;
                    const std::size_t v = spec.voxel_index(ix, iy, iz);
                    const double S = forward.denominators[v];
                    const double* up = upstream.data() + v * C;
                    const double dx = x - pk.mx;
                    const double dy = y - pk.my;
                    const double dz = z - pk.mz;
                    const double q = pk.ixx * dx * dx + pk.iyy * dy * dy + pk.izz * dz * dz +
                                     2.0 * (pk.ixy * dx * dy + pk.ixz * dx * dz +
                                            pk.iyz * dy * dz);
                    const double phi = std::exp(-0.5 * q);
                    const double w = pk.alpha * phi;
                    double s = 0.0;
                    if (forward.grid.density[v] > kDenominatorEpsilon) {
                        const double* G = forward.grid.features.data() + v * C;
                        for (int c = 0; c < C; ++c)
                            s += up[c] * (f[c] - G[c]);
                        s /= S;
                    } else {
                        for (int c = 0; c < C; ++c)
                            s += up[c] * f[c];
                        s /= kDenominatorEpsilon;
                    }
                    const double w_over_s = w / S;
                    for (int c = 0; c < C; ++c)
                        df[c] += w_over_s * up[c];
                    const double iv0 = pk.ixx * dx + pk.ixy * dy + pk.ixz * dz;
                    const double iv1 = pk.ixy * dx + pk.iyy * dy + pk.iyz * dz;
                    const double iv2 = pk.ixz * dx + pk.iyz * dy + pk.izz * dz;
                    const double sw = s * w;
                    dmean[0] += sw * iv0;
                    dmean[1] += sw * iv1;
                    dmean[2] += sw * iv2;
                    dalpha += s * phi;
                    const double half_sw = 0.5 * sw;
                    dcov[0] += half_sw * iv0 * iv0;
                    dcov[1] += half_sw * iv0 * iv1;
                    dcov[2] += half_sw * iv0 * iv2;
                    dcov[3] += half_sw * iv1 * iv1;
                    dcov[4] += half_sw * iv1 * iv2;
                    dcov[5] += half_sw * iv2 * iv2;
                }
            }
        }
        grads.d_mean[3 * g + 0] = dmean[0];
        grads.d_mean[3 * g + 1] = dmean[1];
        grads.d_mean[3 * g + 2] = dmean[2];
        grads.d_opacity[g] = dalpha;
        double* dc = grads.d_cov.data() + 9 * g;
        dc[0] = dcov[0];
        dc[1] = dcov[1];
        dc[2] = dcov[2];
        dc[3] = dcov[1];
        dc[4] = dcov[3];
        dc[5] = dcov[4];
        dc[6] = dcov[2];
        dc[7] = dcov[4];
        dc[8] = dcov[5];
    });
    return grads;
}

// ---- Finite-difference gradient checking ----

struct GradCheckConfig {
    double step = 1e-5;
    double opacity_step = 1e-5;       // ε-branch scenes need a smaller one
    double rel_tol = 1e-4;
    double abs_tol = 1e-8;
    std::size_t max_gaussians = 8;    // Gaussians FD-checked per scene
    int num_threads = 1;
};

struct GradCheckReport {
    // Indexed: 0 mean, 1 opacity, 2 feature, 3 covariance.
    std::array<double, 4> max_rel_err = {0, 0, 0, 0};
    std::array<std::size_t, 4> checked = {0, 0, 0, 0};
    std::size_t skipped_unstable_pairing = 0;
    std::size_t failures = 0;
    bool passed() const { return failures == 0; }

    static const char* kind_name(int k) {
        static const char* names[4] = {"mean", "opacity", "feature", "covariance"};
        return names[k];
    }
};

namespace detail {

inline bool same_tile_support(const TileSupport& a, const TileSupport& b) {
    if (a.has_support != b.has_support)
        return false;
    for (int k = 0; k < 3; ++k)
        if (a.lo[k] != b.lo[k] || a.hi[k] != b.hi[k])
            return false;
    return true;
}

inline TileSupport support_of(const Vec3& mean, const Covariance3& cov, const VoxelGridSpec& spec,
                              double radius_sigmas) {
    TileSupport s;
    const Aabb box = gaussian_aabb(mean, cov, radius_sigmas);
    int vlo[3], vhi[3];
    if (!voxel_support_range(spec, box, vlo, vhi))
        return s;
    tile_range_of(spec, vlo, vhi, s.lo, s.hi);
    s.has_support = true;
    return s;
}

} // namespace detail

/// Central finite differences of L = Σ_v ⟨Ḡ_v, G_v⟩ against the analytic
/// backward, with the CSR frozen at the unperturbed point. Perturbations
/// whose 3σ tile support would change are skipped (counted), since the
/// fixed-support objective is only differentiable at stable pairings.
inline GradCheckReport gradcheck_scene(const GaussianSet& set, const VoxelGridSpec& spec,
                                       const std::vector<double>& upstream, double radius_sigmas,
                                       const GradCheckConfig& cfg) {
    auto covs = build_covariances(set, cfg.num_threads);
    const DualCsr csr = build_dual_csr(set, covs, spec, radius_sigmas, cfg.num_threads);
    const SplatOutput forward = splat_forward(set, covs, csr, spec, cfg.num_threads);
    const GradientBuffers grads =
        splat_backward(set, covs, csr, spec, forward, upstream, cfg.num_threads);

    GradCheckReport report;
    auto fd_loss = [&](const GaussianSet& s2, const std::vector<Covariance3>& c2) {
        const SplatOutput f2 = splat_forward(s2, c2, csr, spec, cfg.num_threads);
        return upstream_dot_loss(f2, upstream);
    };
    auto record = [&](int kind, double analytic, double fd) {
        const double denom = std::max(std::abs(analytic), std::abs(fd));
        const double abs_err = std::abs(analytic - fd);
        const double rel = denom > 0.0 ? abs_err / denom : 0.0;
        report.checked[kind]++;
        report.max_rel_err[kind] = std::max(report.max_rel_err[kind], rel);
        if (abs_err > std::max(cfg.rel_tol * denom, cfg.abs_tol))
            report.failures++;
    };

    const std::size_t n_check = std::min(cfg.max_gaussians, set.count);
    const int C = set.feature_dim;
    for (std::size_t g = 0; g < n_check; ++g) {
        const detail::TileSupport base_support =
            detail::support_of(set.mean(g), covs[g], spec, radius_sigmas);
        // mean
        for (int k = 0; k < 3; ++k) {
            GaussianSet s2 = set;
            s2.means[3 * g + k] = set.means[3 * g + k] + cfg.step;
            detail::TileSupport sp = detail::support_of(s2.mean(g), covs[g], spec, radius_sigmas);
            s2.means[3 * g + k] = set.means[3 * g + k] - cfg.step;
            detail::TileSupport sm = detail::support_of(s2.mean(g), covs[g], spec, radius_sigmas);
            if (!detail::same_tile_support(sp, base_support) ||
                !detail::same_tile_support(sm, base_support)) {
                report.skipped_unstable_pairing++;
                continue;
            }
            s2.means[3 * g + k] = set.means[3 * g + k] + cfg.step;
            const double lp = fd_loss(s2, covs);
            s2.means[3 * g + k] = set.means[3 * g + k] - cfg.step;
            const double lm = fd_loss(s2, covs);
            record(0, grads.d_mean[3 * g + k], (lp - lm) / (2.0 * cfg.step));
        }
        // opacity
        {
            GaussianSet s2 = set;
            s2.opacities[g] = set.opacities[g] + cfg.opacity_step;
            const double lp = fd_loss(s2, covs);
            s2.opacities[g] = set.opacities[g] - cfg.opacity_step;
            const double lm = fd_loss(s2, covs);
            record(1, grads.d_opacity[g], (lp - lm) / (2.0 * cfg.opacity_step));
        }
        // feature
        for (int c = 0; c < C; ++c) {
            GaussianSet s2 = set;
            const std::size_t at = g * static_cast<std::size_t>(C) + c;
            s2.features[at] = set.features[at] + cfg.step;
            const double lp = fd_loss(s2, covs);
            s2.features[at] = set.features[at] - cfg.step;
            const double lm = fd_loss(s2, covs);
            record(2, grads.d_feature[at], (lp - lm) / (2.0 * cfg.step));
        }
        // covariance: joint symmetric perturbation of (i,j),(j,i); for
        // off-diagonals the FD derivative equals twice the analytic entry.
        for (int i = 0; i < 3; ++i) {
            for (int j = i; j < 3; ++j) {
                Mat3 delta = Mat3::Zero();
                delta(i, j) = 1.0;
                delta(j, i) = 1.0; // overwrites for i == j
                auto perturbed = [&](double h) {
                    std::vector<Covariance3> c2 = covs;
                    c2[g] = covariance_from_matrix(covs[g].sigma + h * delta);
                    return c2;
                };
                bool stable = true;
                for (double h : {cfg.step, -cfg.step}) {
                    const auto c2 = perturbed(h);
                    if (!detail::same_tile_support(
                            detail::support_of(set.mean(g), c2[g], spec, radius_sigmas),
                            base_support))
                        stable = false;
                }
                if (!stable) {
                    report.skipped_unstable_pairing++;
                    continue;
                }
                const double lp = fd_loss(set, perturbed(cfg.step));
                const double lm = fd_loss(set, perturbed(-cfg.step));
                const double fd = (lp - lm) / (2.0 * cfg.step);
                const double analytic = (i == j ? 1.0 : 2.0) * grads.d_cov[9 * g + 3 * i + j];
                record(3, analytic, fd);
            }
        }
    }
    return report;
}

} // namespace gsvox
