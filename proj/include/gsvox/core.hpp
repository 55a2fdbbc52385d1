// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsvox {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid domain data (invariant violations, shape mismatches).
struct ValidationError : Error {
    using Error::Error;
};

// File format / I-O failures. Messages name the byte offset where applicable.
struct IoError : Error {
    using Error::Error;
};

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// One anisotropic 3D Gaussian: mean in ego/world meters, unit quaternion
/// (w,x,y,z), per-axis standard deviations in meters, opacity in [0,1] and a
/// feature embedding of the set-level dimension.
struct Gaussian {
    Vec3 mean = Vec3::Zero();
    Vec4 quat = Vec4(1, 0, 0, 0); // (w,x,y,z)
    Vec3 scale = Vec3::Ones();    // per-axis std-dev, strictly positive
    double opacity = 1.0;
    Eigen::VectorXd feature;
};

/// Columnar (structure-of-arrays) Gaussian set. The splat kernels stream one
/// field at a time, so fields live in separate contiguous arrays.
struct GaussianSet {
    std::size_t count = 0;
    int feature_dim = 0;
    std::vector<double> means;     // 3*count
    std::vector<double> quats;     // 4*count, (w,x,y,z)
    std::vector<double> scales;    // 3*count
    std::vector<double> opacities; // count
    std::vector<double> features;  // count*feature_dim

    GaussianSet() = default;
    explicit GaussianSet(int feature_dim_) : feature_dim(feature_dim_) {}

    Eigen::Map<const Vec3> mean(std::size_t i) const {
        return Eigen::Map<const Vec3>(means.data() + 3 * i);
    }
    Eigen::Map<const Vec4> quat(std::size_t i) const {
        return Eigen::Map<const Vec4>(quats.data() + 4 * i);
    }
    Eigen::Map<const Vec3> scale(std::size_t i) const {
        return Eigen::Map<const Vec3>(scales.data() + 3 * i);
    }
    const double* feature(std::size_t i) const { return features.data() + feature_dim * i; }

    void push_back(const Gaussian& g) {
        if (g.feature.size() != feature_dim)
            throw ValidationError("push_back: feature length " + std::to_string(g.feature.size()) +
                                  " != set feature_dim " + std::to_string(feature_dim));
        means.insert(means.end(), g.mean.data(), g.mean.data() + 3);
        quats.insert(quats.end(), g.quat.data(), g.quat.data() + 4);
        scales.insert(scales.end(), g.scale.data(), g.scale.data() + 3);
        opacities.push_back(g.opacity);
        features.insert(features.end(), g.feature.data(), g.feature.data() + feature_dim);
        ++count;
    }

    Gaussian get(std::size_t i) const {
        Gaussian g;
        g.mean = mean(i);
        g.quat = quat(i);
        g.scale = scale(i);
        g.opacity = opacities[i];
        g.feature = Eigen::Map<const Eigen::VectorXd>(feature(i), feature_dim);
        return g;
    }
};

// Quaternion acceptance bands. Norms within kQuatKeepTol of 1 are kept as-is
// (keeps f32 round-trips byte-stable), within kQuatRenormTol renormalized,
// beyond rejected as corrupt.
inline constexpr double kQuatKeepTol = 1e-6;
inline constexpr double kQuatRenormTol = 1e-3;

inline void normalize_quat_inplace(double* q) {
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (std::abs(n - 1.0) <= kQuatKeepTol)
        return;
    for (int k = 0; k < 4; ++k)
        q[k] /= n;
}

/// Validates all set-level invariants; renormalizes quaternions in place.
/// Throws ValidationError naming the first offending Gaussian index.
inline void validate_gaussian_set(GaussianSet& set) {
    const std::size_t n = set.count;
    if (set.feature_dim < 0)
        throw ValidationError("feature_dim must be nonnegative");
    if (set.means.size() != 3 * n || set.quats.size() != 4 * n || set.scales.size() != 3 * n ||
        set.opacities.size() != n ||
        set.features.size() != n * static_cast<std::size_t>(set.feature_dim))
        throw ValidationError("GaussianSet: array lengths inconsistent with count=" +
                              std::to_string(n));
    auto fail = [](std::size_t i, const std::string& what) {
        throw ValidationError("Gaussian " + std::to_string(i) + ": " + what);
    };
    for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            if (!std::isfinite(set.means[3 * i + k]))
                fail(i, "non-finite mean");
            if (!std::isfinite(set.scales[3 * i + k]) || set.scales[3 * i + k] <= 0.0)
                fail(i, "scale components must be finite and > 0");
        }
        double norm2 = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double q = set.quats[4 * i + k];
            if (!std::isfinite(q))
                fail(i, "non-finite quaternion");
            norm2 += q * q;
        }
        const double norm = std::sqrt(norm2);
        if (std::abs(norm - 1.0) > kQuatRenormTol)
            fail(i, "quaternion norm " + std::to_string(norm) + " outside renormalization band");
        normalize_quat_inplace(set.quats.data() + 4 * i);
        const double a = set.opacities[i];
        if (!(a >= 0.0 && a <= 1.0))
            fail(i, "opacity " + std::to_string(a) + " outside [0,1]");
        for (int c = 0; c < set.feature_dim; ++c)
            if (!std::isfinite(set.features[i * set.feature_dim + c]))
                fail(i, "non-finite feature");
    }
}

/// Axis-aligned bounded voxel grid layout. Voxels linearize x-fastest
/// (ix + iy*nx + iz*nx*ny); tiles use the same convention over the tile grid.
struct VoxelGridSpec {
    Vec3 origin = Vec3::Zero(); // min corner, meters
    std::array<int, 3> dims = {0, 0, 0};
    double voxel_size = 1.0;
    std::array<int, 3> tile_dims = {4, 4, 4};

    std::size_t num_voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::array<int, 3> tile_grid() const {
        return {(dims[0] + tile_dims[0] - 1) / tile_dims[0],
                (dims[1] + tile_dims[1] - 1) / tile_dims[1],
                (dims[2] + tile_dims[2] - 1) / tile_dims[2]};
    }
    std::size_t num_tiles() const {
        const auto t = tile_grid();
        return static_cast<std::size_t>(t[0]) * t[1] * t[2];
    }
    std::size_t voxel_index(int ix, int iy, int iz) const {
        return static_cast<std::size_t>(ix) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(iy) +
                                                    static_cast<std::size_t>(dims[1]) * iz);
    }
    Vec3 max_corner() const {
        return origin + voxel_size * Vec3(dims[0], dims[1], dims[2]);
    }
};

inline void validate_grid_spec(const VoxelGridSpec& spec) {
    for (int k = 0; k < 3; ++k) {
        if (spec.dims[k] <= 0)
            throw ValidationError("VoxelGridSpec: dims must be positive");
        if (spec.tile_dims[k] <= 0)
            throw ValidationError("VoxelGridSpec: tile_dims must be positive");
    }
    if (!(spec.voxel_size > 0.0) || !std::isfinite(spec.voxel_size))
        throw ValidationError("VoxelGridSpec: voxel_size must be positive and finite");
    if (!spec.origin.allFinite())
        throw ValidationError("VoxelGridSpec: origin must be finite");
}

/// Center of the voxel at `index`: origin + (index + 0.5)·voxel_size.
inline Vec3 voxel_center(const VoxelGridSpec& spec, const std::array<int, 3>& index) {
    for (int k = 0; k < 3; ++k)
        if (index[k] < 0 || index[k] >= spec.dims[k])
            throw std::out_of_range("voxel_center: index component " + std::to_string(index[k]) +
                                    " outside dims axis " + std::to_string(k));
    return spec.origin + spec.voxel_size * Vec3(index[0] + 0.5, index[1] + 0.5, index[2] + 0.5);
}

/// Dense voxel grid payload: per-voxel density, optional feature rows and
/// occupancy flags. Arrays are either empty or sized num_voxels (× dim).
struct VoxelGrid {
    VoxelGridSpec spec;
    int feature_dim = 0;
    std::vector<double> density;          // F_v, num_voxels
    std::vector<double> features;         // num_voxels * feature_dim (may be empty)
    std::vector<std::uint8_t> occupancy;  // num_voxels (may be empty)

    bool has_features() const { return !features.empty(); }
    bool has_occupancy() const { return !occupancy.empty(); }
};

inline void validate_voxel_grid(const VoxelGrid& grid) {
    validate_grid_spec(grid.spec);
    const std::size_t nv = grid.spec.num_voxels();
    if (grid.density.size() != nv)
        throw ValidationError("VoxelGrid: density size != num_voxels");
    if (!grid.features.empty() &&
        grid.features.size() != nv * static_cast<std::size_t>(grid.feature_dim))
        throw ValidationError("VoxelGrid: feature size != num_voxels * feature_dim");
    if (!grid.occupancy.empty() && grid.occupancy.size() != nv)
        throw ValidationError("VoxelGrid: occupancy size != num_voxels");
    for (std::size_t v = 0; v < nv; ++v)
        if (!(grid.density[v] >= 0.0))
            throw ValidationError("VoxelGrid: density must be >= 0 at voxel " + std::to_string(v));
}

/// Pinhole camera. `extrinsics` maps the target frame into camera axes
/// (the E_e2c / E_l2c of the pixel-to-frame transforms); ops state which
/// target frame they expect.
struct CameraModel {
    Mat3 intrinsics = Mat3::Identity();
    Mat4 extrinsics = Mat4::Identity();
    int width = 0;
    int height = 0;
};

inline void validate_camera(const CameraModel& cam) {
    const Mat3& K = cam.intrinsics;
    if (!(K(0, 0) > 0.0) || !(K(1, 1) > 0.0))
        throw ValidationError("CameraModel: focal entries must be positive");
    if (K(1, 0) != 0.0 || K(2, 0) != 0.0 || K(2, 1) != 0.0)
        throw ValidationError("CameraModel: K must be upper-triangular");
    if (!cam.extrinsics.allFinite() || !K.allFinite())
        throw ValidationError("CameraModel: non-finite entries");
    const Mat3 R = cam.extrinsics.topLeftCorner<3, 3>();
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
        throw ValidationError("CameraModel: rotation block not orthonormal within 1e-6");
    const Eigen::RowVector4d bottom = cam.extrinsics.row(3);
    if ((bottom - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
        throw ValidationError("CameraModel: extrinsic bottom row must be (0,0,0,1)");
    if (cam.width <= 0 || cam.height <= 0)
        throw ValidationError("CameraModel: image size must be positive");
}

/// Named grid presets used across the CLI.
///  - "nuscenes": [-40,40]² × [-1,5.4] at 0.4 m → dims (200,200,16)
///  - "custom":   [0,20] × [-10,10] × [-1,4] at 0.2 m → dims (100,100,25)
inline VoxelGridSpec grid_preset(const std::string& name) {
    VoxelGridSpec spec;
    if (name == "nuscenes") {
        spec.origin = Vec3(-40.0, -40.0, -1.0);
        spec.dims = {200, 200, 16};
        spec.voxel_size = 0.4;
    } else if (name == "custom") {
        spec.origin = Vec3(0.0, -10.0, -1.0);
        spec.dims = {100, 100, 25};
        spec.voxel_size = 0.2;
    } else {
        throw ValidationError("unknown grid preset '" + name + "' (expected nuscenes|custom)");
    }
    return spec;
}

} // namespace gsvox
