// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/binning.hpp"
#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/parallel.hpp"
#include "gsvox/splat.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace gsvox {

/// Per-Gaussian loss gradients. d_cov rows are 3×3 row-major and exactly
/// symmetric by construction.
struct GradientBuffers {
    std::size_t count = 0;
    int feature_dim = 0;
    std::vector<double> d_mean;    // count×3
    std::vector<double> d_cov;     // count×9
    std::vector<double> d_opacity; // count
    std::vector<double> d_feature; // count×C

    void resize(std::size_t n, int C) {
        count = n;
        feature_dim = C;
        d_mean.assign(3 * n, 0.0);
        d_cov.assign(9 * n, 0.0);
        d_opacity.assign(n, 0.0);
        d_feature.assign(n * static_cast<std::size_t>(C), 0.0);
    }
};

/// The scalar objective whose differential the backward pass computes:
/// L = Σ_v ⟨Ḡ_v, G_v⟩, with Ḡ_v the upstream gradient w.r.t. the normalized
/// voxel features. Test harnesses finite-difference this L; composing any
/// downstream loss l(G) just means passing Ḡ_v = ∂l/∂G_v.
inline double upstream_dot_loss(const SplatOutput& forward, const std::vector<double>& upstream) {
    if (upstream.size() != forward.grid.features.size())
        throw ValidationError("upstream_dot_loss: upstream shape mismatch");
    double loss = 0.0;
    for (std::size_t i = 0; i < upstream.size(); ++i)
        loss += upstream[i] * forward.grid.features[i];
    return loss;
}

/// Analytic backward of the forward splat for the objective above.
/// Per Gaussian (parallel, atomics-free: each worker writes only its own
/// rows), summed over exactly the voxels of its CSR-paired tiles:
///   s_{g,v} = Ḡ_v·(f_g − G_v)/S_v   if F_v > ε,   Ḡ_v·f_g/ε otherwise
///   ∂L/∂f_g = Σ_v (w_{g,v}/S_v)·Ḡ_v
///   ∂L/∂μ_g = Σ_v s_{g,v}·w_{g,v}·Σ_g⁻¹(x_v−μ_g)
///   ∂L/∂α_g = Σ_v s_{g,v}·φ_{g,v}          (α-free form; stays finite at α=0)
///   ∂L/∂Σ_g = ½ Σ_v s_{g,v}·w_{g,v}·Σ_g⁻¹ d dᵀ Σ_g⁻¹
inline GradientBuffers splat_backward(const GaussianSet& set,
                                      const std::vector<Covariance3>& covs, const DualCsr& csr,
                                      const VoxelGridSpec& spec, const SplatOutput& forward,
                                      const std::vector<double>& upstream, int num_threads = 1) {
    detail::check_csr_matches(csr, set, spec);
    if (covs.size() != set.count)
        throw ValidationError("splat_backward: covariance count mismatch");
    const int C = set.feature_dim;
    const std::size_t nv = spec.num_voxels();
    if (forward.grid.density.size() != nv || forward.denominators.size() != nv ||
        forward.grid.features.size() != nv * static_cast<std::size_t>(C))
        throw ValidationError("splat_backward: forward output does not match spec");
    if (upstream.size() != nv * static_cast<std::size_t>(C))
        throw ValidationError("splat_backward: upstream gradient shape mismatch");

    const auto packed = detail::pack_gaussians(set, covs);
    GradientBuffers grads;
    grads.resize(set.count, C);

    parallel_for(set.count, num_threads, [&](std::size_t g) {
        const detail::Packed3& pk = packed[g];
        const double* f = set.feature(g);
        double* df = grads.d_feature.data() + g * static_cast<std::size_t>(C);
        double dmean[3] = {0, 0, 0};
        double dcov[6] = {0, 0, 0, 0, 0, 0}; // xx, xy, xz, yy, yz, zz
        double dalpha = 0.0;
        for (std::size_t p = csr.g2t_indptr[g]; p < csr.g2t_indptr[g + 1]; ++p) {
            const VoxelBox box = tile_voxel_range(spec, csr.g2t_indices[p]);
            for (int iz = box.lo[2]; iz < box.hi[2]; ++iz) {
                const double z = spec.origin[2] + (iz + 0.5) * spec.voxel_size;
                for (int iy = box.lo[1]; iy < box.hi[1]; ++iy) {
                    const double y = spec.origin[1] + (iy + 0.5) * spec.voxel_size;
                    for (int ix = box.lo[0]; ix < box.hi[0]; ++ix) {
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

                        // s_{g,v}: quotient-rule branch on the clamp.
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

inline GradientBuffers splat_backward(const GaussianSet& set, const DualCsr& csr,
                                      const VoxelGridSpec& spec, const SplatOutput& forward,
                                      const std::vector<double>& upstream, int num_threads = 1) {
    return splat_backward(set, build_covariances(set, num_threads), csr, spec, forward, upstream,
                          num_threads);
}

} // namespace gsvox
