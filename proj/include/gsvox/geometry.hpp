// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/parallel.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <mutex>
#include <string>
#include <vector>

namespace gsvox {

// Gradients involve Σ⁻¹·d·dᵀ·Σ⁻¹; beyond this condition number they blow up,
// so such covariances are rejected per Gaussian.
inline constexpr double kMaxConditionNumber = 1e12;

/// 3×3 SPD covariance with its inverse cached (computed once per Gaussian
/// per pass via Cholesky).
struct Covariance3 {
    Mat3 sigma = Mat3::Identity();
    Mat3 inv = Mat3::Identity();
};

inline Mat3 rotation_from_quat(const Vec4& q) {
    // (w,x,y,z) order.
    return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
}

/// Builds Covariance3 from an explicit Σ. Rejects asymmetric, non-finite,
/// non-SPD, or near-singular (cond > 1e12) matrices.
inline Covariance3 covariance_from_matrix(const Mat3& sigma) {
    if (!sigma.allFinite())
        throw ValidationError("covariance: non-finite entries");
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() >
        1e-12 * std::max(1.0, sigma.cwiseAbs().maxCoeff()))
        throw ValidationError("covariance: matrix not symmetric");
    Eigen::LLT<Mat3> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw ValidationError("covariance: matrix not positive definite");
    Eigen::SelfAdjointEigenSolver<Mat3> es(sigma, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()(0);
    const double hi = es.eigenvalues()(2);
    if (!(lo > 0.0) || hi / lo > kMaxConditionNumber)
        throw ValidationError("covariance: condition number exceeds 1e12");
    Covariance3 cov;
    cov.sigma = sigma;
    cov.inv = llt.solve(Mat3::Identity());
    return cov;
}

/// Σ = R(q)·diag(scale)²·R(q)ᵀ, with scale the per-axis standard deviations.
inline Covariance3 covariance_from_quat_scale(const Vec4& quat, const Vec3& scale) {
    if (!quat.allFinite() || !scale.allFinite())
        throw ValidationError("covariance_from_quat_scale: non-finite input");
    if (!(scale.minCoeff() > 0.0))
        throw ValidationError("covariance_from_quat_scale: scale must be positive");
    const Mat3 R = rotation_from_quat(quat);
    const Mat3 sigma = R * scale.array().square().matrix().asDiagonal() * R.transpose();
    // Symmetrize: the product is symmetric up to rounding.
    return covariance_from_matrix(0.5 * (sigma + sigma.transpose()));
}

/// One Covariance3 per Gaussian of the set.
inline std::vector<Covariance3> build_covariances(const GaussianSet& set, int num_threads = 1) {
    std::vector<Covariance3> covs(set.count);
    std::exception_ptr err;
    std::mutex err_mutex;
    parallel_chunks(set.count, num_threads, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t g = begin; g < end; ++g) {
            try {
                covs[g] = covariance_from_quat_scale(set.quat(g), set.scale(g));
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!err)
                    err = std::current_exception();
                return;
            }
        }
    });
    if (err)
        std::rethrow_exception(err);
    return covs;
}

/// Un-normalized density contribution w = α·exp(−½ dᵀΣ⁻¹d), d = point − mean.
inline double gaussian_density(const Vec3& mean, const Covariance3& cov, double opacity,
                               const Vec3& point) {
    const Vec3 d = point - mean;
    const double q = d.dot(cov.inv * d);
    return opacity * std::exp(-0.5 * q);
}

/// Back-projects pixel (u,v) at depth d: lifts to (u·d, v·d, d), applies K⁻¹,
/// then the inverse extrinsic (camera → target frame).
inline Vec3 transform_pixel_depth_to_frame(const Vec2& pixel, double depth,
                                           const CameraModel& cam) {
    if (!(depth > 0.0))
        throw ValidationError("transform_pixel_depth_to_frame: depth must be > 0");
    const Vec3 homog(pixel.x() * depth, pixel.y() * depth, depth);
    const Vec3 p_cam = cam.intrinsics.inverse() * homog;
    const Mat3 R = cam.extrinsics.topLeftCorner<3, 3>();
    const Vec3 t = cam.extrinsics.topRightCorner<3, 1>();
    // Rigid inverse of target→camera.
    return R.transpose() * (p_cam - t);
}

struct Projection {
    Vec2 pixel = Vec2::Zero();
    double depth = 0.0;
    bool visible = false;
};

/// Perspective projection of a target-frame point. Visible iff depth > 0 and
/// the pixel lands inside the image bounds. Behind-camera points are not an
/// error; they simply report visible=false.
inline Projection project_point(const Vec3& point, const CameraModel& cam) {
    const Mat3 R = cam.extrinsics.topLeftCorner<3, 3>();
    const Vec3 t = cam.extrinsics.topRightCorner<3, 1>();
    const Vec3 p_cam = R * point + t;
    Projection out;
    out.depth = p_cam.z();
    if (!(p_cam.z() > 0.0))
        return out;
    const Vec3 uv = cam.intrinsics * (p_cam / p_cam.z());
    out.pixel = uv.head<2>();
    out.visible = out.pixel.x() >= 0.0 && out.pixel.x() < cam.width && out.pixel.y() >= 0.0 &&
                  out.pixel.y() < cam.height;
    return out;
}

struct Aabb {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();
};

/// Axis-aligned support box mean ± radius_sigmas·sqrt(diag(Σ)). Contains the
/// Mahalanobis ellipsoid of that radius (per-axis marginal std-dev bounds the
/// ellipsoid extent along each axis).
inline Aabb gaussian_aabb(const Vec3& mean, const Covariance3& cov, double radius_sigmas = 3.0) {
    const Vec3 half = radius_sigmas * cov.sigma.diagonal().cwiseSqrt();
    return Aabb{mean - half, mean + half};
}

/// Exact Gaussian marginal over z: drop the z row/column.
inline Mat2 marginalize_bev(const Covariance3& cov) {
    return cov.sigma.topLeftCorner<2, 2>();
}

} // namespace gsvox
