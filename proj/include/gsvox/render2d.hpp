// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace gsvox {

// Compositing stops once transmittance drops below this.
inline constexpr double kTransmittanceCutoff = 1e-4;
// Image-space footprints are clipped at this many sigmas.
inline constexpr double kFootprintSigmas = 3.0;

/// Alpha-blended render output: per-pixel feature map F̄ (H×W×C, row-major,
/// channel-last), depth map D̄ and the accumulated blending weight.
struct RenderTarget {
    int width = 0;
    int height = 0;
    int feature_dim = 0;
    std::vector<double> features;  // H*W*C
    std::vector<double> depth;     // H*W
    std::vector<double> alpha_sum; // H*W

    std::size_t pixel_index(int px, int py) const {
        return static_cast<std::size_t>(py) * width + px;
    }
};

struct Projected2d {
    Vec2 pixel = Vec2::Zero();
    Mat2 cov2 = Mat2::Identity();
    double depth = 0.0;
    bool visible = false;
};

/// Projects one Gaussian into a camera: mean via the pinhole projection,
/// covariance via the first-order EWA approximation Σ₂ = J·Σ_cam·Jᵀ with J
/// the projection Jacobian at the camera-frame mean (no low-pass dilation).
/// The visible flag mirrors project_point (positive depth, pixel in bounds).
inline Projected2d project_gaussian_2d(const Vec3& mean, const Covariance3& cov,
                                       const CameraModel& cam) {
    Projected2d out;
    const Mat3 R = cam.extrinsics.topLeftCorner<3, 3>();
    const Vec3 t = cam.extrinsics.topRightCorner<3, 1>();
    const Vec3 p = R * mean + t;
    out.depth = p.z();
    if (!(p.z() > 0.0))
        return out;
    const double fx = cam.intrinsics(0, 0);
    const double fy = cam.intrinsics(1, 1);
    const double skew = cam.intrinsics(0, 1);
    const Vec3 uvw = cam.intrinsics * (p / p.z());
    out.pixel = uvw.head<2>();
    out.visible = out.pixel.x() >= 0.0 && out.pixel.x() < cam.width && out.pixel.y() >= 0.0 &&
                  out.pixel.y() < cam.height;

    const double iz = 1.0 / p.z();
    const double iz2 = iz * iz;
    Eigen::Matrix<double, 2, 3> J;
    J << fx * iz, skew * iz, -(fx * p.x() + skew * p.y()) * iz2,
         0.0,     fy * iz,   -fy * p.y() * iz2;
    const Mat3 sigma_cam = R * cov.sigma * R.transpose();
    out.cov2 = J * sigma_cam * J.transpose();
    return out;
}

/// Eq. 9–10 compositor: visible Gaussians sorted ascending by view depth
/// (stable), per-pixel opacity α'_i = α_i·exp(−½ ΔᵀΣ₂⁻¹Δ), front-to-back
/// blend F̄ = Σ f_i α'_i Π_{j<i}(1−α'_j) and likewise for depth. Footprints
/// are clipped at 3σ in image space; a pixel stops compositing once its
/// transmittance falls below 1e-4. Parallel over rows; Gaussian order is
/// shared, so output is identical for any worker count.
inline RenderTarget render(const GaussianSet& set, const std::vector<Covariance3>& covs,
                           const CameraModel& cam, int num_threads = 1) {
    validate_camera(cam);
    if (covs.size() != set.count)
        throw ValidationError("render: covariance count mismatch");
    const int C = set.feature_dim;
    RenderTarget target;
    target.width = cam.width;
    target.height = cam.height;
    target.feature_dim = C;
    const std::size_t npx = static_cast<std::size_t>(cam.width) * cam.height;
    target.features.assign(npx * static_cast<std::size_t>(C), 0.0);
    target.depth.assign(npx, 0.0);
    target.alpha_sum.assign(npx, 0.0);

    struct Footprint {
        std::uint32_t gaussian;
        double depth;
        double mx, my;
        double ixx, ixy, iyy; // Σ₂⁻¹
        int x0, x1, y0, y1;   // inclusive pixel bbox
    };
    std::vector<Footprint> prints;
    prints.reserve(set.count);
    for (std::size_t g = 0; g < set.count; ++g) {
        const Projected2d proj = project_gaussian_2d(set.mean(g), covs[g], cam);
        if (proj.depth <= 0.0)
            continue;
        const double det =
            proj.cov2(0, 0) * proj.cov2(1, 1) - proj.cov2(0, 1) * proj.cov2(1, 0);
        if (!(det > 0.0))
            continue;
        const double rx = kFootprintSigmas * std::sqrt(proj.cov2(0, 0));
        const double ry = kFootprintSigmas * std::sqrt(proj.cov2(1, 1));
        Footprint fp;
        fp.gaussian = static_cast<std::uint32_t>(g);
        fp.depth = proj.depth;
        fp.mx = proj.pixel.x();
        fp.my = proj.pixel.y();
        fp.ixx = proj.cov2(1, 1) / det;
        fp.ixy = -proj.cov2(0, 1) / det;
        fp.iyy = proj.cov2(0, 0) / det;
        fp.x0 = std::max(0, static_cast<int>(std::floor(fp.mx - rx)));
        fp.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(fp.mx + rx)));
        fp.y0 = std::max(0, static_cast<int>(std::floor(fp.my - ry)));
        fp.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(fp.my + ry)));
        if (fp.x0 > fp.x1 || fp.y0 > fp.y1)
            continue;
        prints.push_back(fp);
    }
    std::stable_sort(prints.begin(), prints.end(),
                     [](const Footprint& a, const Footprint& b) { return a.depth < b.depth; });

    parallel_for(static_cast<std::size_t>(cam.height), num_threads, [&](std::size_t py_s) {
        const int py = static_cast<int>(py_s);
        std::vector<double> transmittance(cam.width, 1.0);
        for (const Footprint& fp : prints) {
            if (py < fp.y0 || py > fp.y1)
                continue;
            const double* f = set.feature(fp.gaussian);
            const double alpha = set.opacities[fp.gaussian];
            for (int px = fp.x0; px <= fp.x1; ++px) {
                double& T = transmittance[px];
                if (T < kTransmittanceCutoff)
                    continue;
                const double ddx = (px + 0.5) - fp.mx;
                const double ddy = (py + 0.5) - fp.my;
                const double q =
                    fp.ixx * ddx * ddx + 2.0 * fp.ixy * ddx * ddy + fp.iyy * ddy * ddy;
                const double a = alpha * std::exp(-0.5 * q);
                if (a <= 0.0)
                    continue;
                const double weight = a * T;
                const std::size_t at = target.pixel_index(px, py);
                double* row = target.features.data() + at * C;
                for (int c = 0; c < C; ++c)
                    row[c] += weight * f[c];
                target.depth[at] += weight * fp.depth;
                target.alpha_sum[at] += weight;
                T *= (1.0 - a);
            }
        }
    });
    return target;
}

inline RenderTarget render(const GaussianSet& set, const CameraModel& cam, int num_threads = 1) {
    return render(set, build_covariances(set, num_threads), cam, num_threads);
}

} // namespace gsvox
