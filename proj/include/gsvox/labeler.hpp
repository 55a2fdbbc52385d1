// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/io.hpp"
#include "gsvox/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace gsvox {

/// Dense H'×W'×C feature image (row-major, channel-last). Node (i,j) maps to
/// image pixel (u,v) = (j·W/W', i·H/H'); with matching dims node (i,j) is
/// exactly pixel (j,i).
struct FeatureMap {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data; // height*width*channels

    const double* node(int iy, int ix) const {
        return data.data() + (static_cast<std::size_t>(iy) * width + ix) * channels;
    }
};

inline void validate_feature_map(const FeatureMap& fm) {
    if (fm.width <= 0 || fm.height <= 0 || fm.channels <= 0)
        throw ValidationError("FeatureMap: dims must be positive");
    if (fm.data.size() !=
        static_cast<std::size_t>(fm.width) * fm.height * fm.channels)
        throw ValidationError("FeatureMap: data size mismatch");
}

/// One posed sensor frame: points in the sensor frame, a world-from-sensor
/// rigid pose, the camera (extrinsics = camera-from-sensor) and its feature
/// image.
struct LabelFrame {
    std::vector<double> points; // M×3, sensor frame
    Mat4 pose = Mat4::Identity();
    CameraModel camera;
    FeatureMap feature_map;

    std::size_t point_count() const { return points.size() / 3; }
};

inline void validate_label_frame(const LabelFrame& frame) {
    if (frame.points.size() % 3 != 0)
        throw ValidationError("LabelFrame: point array not a multiple of 3");
    validate_camera(frame.camera);
    validate_feature_map(frame.feature_map);
    const Mat3 R = frame.pose.topLeftCorner<3, 3>();
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
        throw ValidationError("LabelFrame: pose rotation not orthonormal within 1e-6");
}

struct DecoratedPoints {
    std::vector<double> features;      // M×C; zero rows for invisible points
    std::vector<std::uint8_t> visible; // M
    std::size_t visible_count = 0;
};

namespace detail {

// Bilinear sample with border clamp; `x`,`y` in node coordinates.
inline void bilinear_sample(const FeatureMap& fm, double x, double y, double* out) {
    const double cx = std::min(std::max(x, 0.0), static_cast<double>(fm.width - 1));
    const double cy = std::min(std::max(y, 0.0), static_cast<double>(fm.height - 1));
    const int x0 = std::min(static_cast<int>(std::floor(cx)), fm.width - 1);
    const int y0 = std::min(static_cast<int>(std::floor(cy)), fm.height - 1);
    const int x1 = std::min(x0 + 1, fm.width - 1);
    const int y1 = std::min(y0 + 1, fm.height - 1);
    const double fx = cx - x0;
    const double fy = cy - y0;
    const double* n00 = fm.node(y0, x0);
    const double* n01 = fm.node(y0, x1);
    const double* n10 = fm.node(y1, x0);
    const double* n11 = fm.node(y1, x1);
    for (int c = 0; c < fm.channels; ++c)
        out[c] = (1.0 - fy) * ((1.0 - fx) * n00[c] + fx * n01[c]) +
                 fy * ((1.0 - fx) * n10[c] + fx * n11[c]);
}

} // namespace detail

/// Point-to-image decoration: each point is projected through the frame's
/// camera; visible points bilinearly sample the feature map at the projected
/// pixel (scaled into node coordinates), invisible points get zero features.
/// Nearest-neighbor sampling is available for bit-reproducing pipelines.
inline DecoratedPoints decorate_points(const LabelFrame& frame, bool nearest = false) {
    validate_label_frame(frame);
    const std::size_t m = frame.point_count();
    const int C = frame.feature_map.channels;
    DecoratedPoints out;
    out.features.assign(m * static_cast<std::size_t>(C), 0.0);
    out.visible.assign(m, 0);
    const double sx = static_cast<double>(frame.feature_map.width) / frame.camera.width;
    const double sy = static_cast<double>(frame.feature_map.height) / frame.camera.height;
    for (std::size_t i = 0; i < m; ++i) {
        const Vec3 p(frame.points[3 * i], frame.points[3 * i + 1], frame.points[3 * i + 2]);
        const Projection proj = project_point(p, frame.camera);
        if (!proj.visible)
            continue;
        out.visible[i] = 1;
        out.visible_count++;
        const double x = proj.pixel.x() * sx;
        const double y = proj.pixel.y() * sy;
        double* row = out.features.data() + i * C;
        if (nearest) {
            const int ix = std::min(std::max(static_cast<int>(std::lround(x)), 0),
                                    frame.feature_map.width - 1);
            const int iy = std::min(std::max(static_cast<int>(std::lround(y)), 0),
                                    frame.feature_map.height - 1);
            const double* n = frame.feature_map.node(iy, ix);
            for (int c = 0; c < C; ++c)
                row[c] = n[c];
        } else {
            detail::bilinear_sample(frame.feature_map, x, y, row);
        }
    }
    return out;
}

/// World-frame point cloud with per-point features.
struct DecoratedCloud {
    int feature_dim = 0;
    std::vector<double> points;   // N×3, world frame
    std::vector<double> features; // N×C

    std::size_t count() const { return points.size() / 3; }
};

/// Accumulates the visible points of every decorated frame into the world
/// frame (pose applied), concatenating in input order.
inline DecoratedCloud aggregate_frames(const std::vector<LabelFrame>& frames,
                                       const std::vector<DecoratedPoints>& decorations) {
    if (frames.size() != decorations.size())
        throw ValidationError("aggregate_frames: frame/decoration count mismatch");
    DecoratedCloud cloud;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const int C = frames[f].feature_map.channels;
        if (f == 0)
            cloud.feature_dim = C;
        else if (C != cloud.feature_dim)
            throw ValidationError("aggregate_frames: inconsistent feature dims");
        const Mat3 R = frames[f].pose.topLeftCorner<3, 3>();
        const Vec3 t = frames[f].pose.topRightCorner<3, 1>();
        const std::size_t m = frames[f].point_count();
        for (std::size_t i = 0; i < m; ++i) {
            if (!decorations[f].visible[i])
                continue;
            const Vec3 p(frames[f].points[3 * i], frames[f].points[3 * i + 1],
                         frames[f].points[3 * i + 2]);
            const Vec3 world = R * p + t;
            cloud.points.insert(cloud.points.end(), world.data(), world.data() + 3);
            const double* feat = decorations[f].features.data() + i * C;
            cloud.features.insert(cloud.features.end(), feat, feat + C);
        }
    }
    return cloud;
}

/// Voxelized pseudo labels: occupancy ô_pseudo, mean features O_pseudo,
/// camera visibility ô_vis and per-voxel point counts.
struct PseudoLabelGrid {
    VoxelGridSpec spec;
    int feature_dim = 0;
    std::vector<std::uint8_t> occupancy;  // point_count > 0
    std::vector<double> features;         // N_v×C, zero where unoccupied
    std::vector<std::uint8_t> visibility; // filled by compute_visibility_grid
    std::vector<std::uint32_t> point_counts;
    std::size_t dropped_points = 0;       // outside the grid
};

/// Per-voxel feature reduction. `mean` averages member features;
/// `majority_vote` keeps the most frequent exact feature vector (ties go to
/// the vector first seen in input order), for discrete one-hot/class labels.
enum class FeatureAggregation { mean, majority_vote };

/// Bins points by floor((p − origin)/voxel_size) and reduces member features
/// per `aggregation`. Out-of-grid points are dropped and counted.
inline PseudoLabelGrid voxelize_labels(const DecoratedCloud& cloud, const VoxelGridSpec& spec,
                                       FeatureAggregation aggregation = FeatureAggregation::mean) {
    validate_grid_spec(spec);
    const int C = cloud.feature_dim;
    const std::size_t nv = spec.num_voxels();
    PseudoLabelGrid grid;
    grid.spec = spec;
    grid.feature_dim = C;
    grid.occupancy.assign(nv, 0);
    grid.features.assign(nv * static_cast<std::size_t>(C), 0.0);
    grid.point_counts.assign(nv, 0);

    const std::size_t n = cloud.count();
    std::vector<std::vector<std::uint32_t>> members; // majority_vote only
    if (aggregation == FeatureAggregation::majority_vote)
        members.resize(nv);
    for (std::size_t i = 0; i < n; ++i) {
        int idx[3];
        bool inside = true;
        for (int k = 0; k < 3; ++k) {
            idx[k] = static_cast<int>(
                std::floor((cloud.points[3 * i + k] - spec.origin[k]) / spec.voxel_size));
            inside = inside && idx[k] >= 0 && idx[k] < spec.dims[k];
        }
        if (!inside) {
            grid.dropped_points++;
            continue;
        }
        const std::size_t v = spec.voxel_index(idx[0], idx[1], idx[2]);
        grid.point_counts[v]++;
        grid.occupancy[v] = 1;
        if (aggregation == FeatureAggregation::majority_vote) {
            members[v].push_back(static_cast<std::uint32_t>(i));
            continue;
        }
        const double* feat = cloud.features.data() + i * C;
        for (int c = 0; c < C; ++c)
            grid.features[v * C + c] += feat[c];
    }
    if (aggregation == FeatureAggregation::mean) {
        for (std::size_t v = 0; v < nv; ++v) {
            if (grid.point_counts[v] == 0)
                continue;
            const double inv = 1.0 / static_cast<double>(grid.point_counts[v]);
            for (int c = 0; c < C; ++c)
                grid.features[v * C + c] *= inv;
        }
        return grid;
    }
    for (std::size_t v = 0; v < nv; ++v) {
        if (members[v].empty())
            continue;
        std::size_t best = 0, best_count = 0;
        for (std::size_t a = 0; a < members[v].size(); ++a) {
            const double* fa = cloud.features.data() + members[v][a] * static_cast<std::size_t>(C);
            std::size_t count = 0;
            for (std::size_t b = 0; b < members[v].size(); ++b) {
                const double* fb =
                    cloud.features.data() + members[v][b] * static_cast<std::size_t>(C);
                count += std::equal(fa, fa + C, fb) ? 1 : 0;
            }
            if (count > best_count) {
                best_count = count;
                best = a;
            }
        }
        const double* win = cloud.features.data() + members[v][best] * static_cast<std::size_t>(C);
        std::copy(win, win + C, grid.features.data() + v * C);
    }
    return grid;
}

/// ô_vis: a voxel is visible iff its center projects inside any camera's
/// image with positive depth. Cameras carry camera-from-world extrinsics.
inline std::vector<std::uint8_t> compute_visibility_grid(const VoxelGridSpec& spec,
                                                         const std::vector<CameraModel>& cameras,
                                                         int num_threads = 1) {
    validate_grid_spec(spec);
    for (const auto& cam : cameras)
        validate_camera(cam);
    std::vector<std::uint8_t> vis(spec.num_voxels(), 0);
    parallel_for(static_cast<std::size_t>(spec.dims[2]), num_threads, [&](std::size_t izs) {
        const int iz = static_cast<int>(izs);
        for (int iy = 0; iy < spec.dims[1]; ++iy)
            for (int ix = 0; ix < spec.dims[0]; ++ix) {
                const Vec3 center = voxel_center(spec, {ix, iy, iz});
                for (const auto& cam : cameras) {
                    if (project_point(center, cam).visible) {
                        vis[spec.voxel_index(ix, iy, iz)] = 1;
                        break;
                    }
                }
            }
    });
    return vis;
}

/// Converts a pseudo-label grid into the VGRD container (density = point
/// count, occupancy + features present).
inline VoxelGrid pseudo_label_to_voxel_grid(const PseudoLabelGrid& grid) {
    VoxelGrid out;
    out.spec = grid.spec;
    out.feature_dim = grid.feature_dim;
    out.density.resize(grid.point_counts.size());
    for (std::size_t v = 0; v < grid.point_counts.size(); ++v)
        out.density[v] = static_cast<double>(grid.point_counts[v]);
    out.occupancy = grid.occupancy;
    out.features = grid.features;
    return out;
}

} // namespace gsvox
