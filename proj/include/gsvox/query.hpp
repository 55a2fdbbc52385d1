// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"
#include "gsvox/io.hpp"
#include "gsvox/losses.hpp"
#include "gsvox/splat.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace gsvox {

/// Class-name/embedding bank for zero-shot querying. Rows must be nonzero;
/// dim must match the Gaussian/voxel feature dimension at use sites.
struct TextEmbeddingBank {
    int num_classes = 0;
    int dim = 0;
    std::vector<double> embeddings; // num_classes × dim, row-major
    std::vector<std::string> names;

    const double* row(int c) const { return embeddings.data() + static_cast<std::size_t>(c) * dim; }
};

inline void validate_embedding_bank(const TextEmbeddingBank& bank) {
    if (bank.num_classes <= 0 || bank.dim <= 0)
        throw ValidationError("TextEmbeddingBank: num_classes and dim must be positive");
    if (bank.embeddings.size() !=
        static_cast<std::size_t>(bank.num_classes) * static_cast<std::size_t>(bank.dim))
        throw ValidationError("TextEmbeddingBank: matrix size mismatch");
    if (bank.names.size() != static_cast<std::size_t>(bank.num_classes))
        throw ValidationError("TextEmbeddingBank: name count mismatch");
    for (int c = 0; c < bank.num_classes; ++c) {
        double norm2 = 0.0;
        for (int k = 0; k < bank.dim; ++k)
            norm2 += bank.row(c)[k] * bank.row(c)[k];
        if (!(norm2 > 0.0))
            throw ValidationError("TextEmbeddingBank: zero-norm row for class '" + bank.names[c] +
                                  "'");
    }
}

// TEMB container: magic "TEMB", N_c u32, C u32, names as u32-length-prefixed
// UTF-8, matrix f32×N_c·C.
inline TextEmbeddingBank load_embedding_bank(const std::string& path) {
    auto r = detail::Reader::from_file(path);
    r.expect_magic("TEMB");
    TextEmbeddingBank bank;
    bank.num_classes = static_cast<int>(r.u32("num_classes"));
    bank.dim = static_cast<int>(r.u32("dim"));
    if (bank.num_classes <= 0 || bank.dim <= 0)
        throw IoError(path + ": nonpositive class count or dim at byte 4");
    bank.names.reserve(bank.num_classes);
    for (int c = 0; c < bank.num_classes; ++c) {
        const std::uint32_t len = r.u32("name length");
        bank.names.push_back(r.str(len, "name"));
    }
    r.f32_array(bank.embeddings,
                static_cast<std::size_t>(bank.num_classes) * static_cast<std::size_t>(bank.dim),
                "embedding");
    r.expect_eof();
    validate_embedding_bank(bank);
    return bank;
}

inline void save_embedding_bank(const TextEmbeddingBank& bank, const std::string& path) {
    validate_embedding_bank(bank);
    detail::Writer w(path);
    w.magic("TEMB");
    w.u32(static_cast<std::uint32_t>(bank.num_classes));
    w.u32(static_cast<std::uint32_t>(bank.dim));
    for (const auto& name : bank.names) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.str(name);
    }
    w.f32_array(bank.embeddings);
    w.close();
}

struct SemanticLogits {
    std::size_t rows = 0;
    int num_classes = 0;
    std::vector<double> probabilities; // rows × num_classes, rows sum to 1
    std::size_t zero_norm_rows = 0;    // rows that fell back to uniform
};

/// s = softmax(cos(f, f_txt)/T): both sides are L2-normalized before the
/// inner product, then a row softmax with temperature is applied. Zero-norm
/// feature rows get the uniform distribution (counted as warnings).
inline SemanticLogits semantic_logits(const std::vector<double>& features, int dim,
                                      const TextEmbeddingBank& bank, double temperature = 1.0) {
    validate_embedding_bank(bank);
    if (dim != bank.dim)
        throw ValidationError("semantic_logits: feature dim != bank dim");
    if (features.size() % static_cast<std::size_t>(dim) != 0)
        throw ValidationError("semantic_logits: feature array not a multiple of dim");
    if (!(temperature > 0.0))
        throw ValidationError("semantic_logits: temperature must be > 0");
    const std::size_t rows = features.size() / dim;
    const int nc = bank.num_classes;

    std::vector<double> bank_norm(nc);
    for (int c = 0; c < nc; ++c) {
        double n2 = 0.0;
        for (int k = 0; k < dim; ++k)
            n2 += bank.row(c)[k] * bank.row(c)[k];
        bank_norm[c] = std::sqrt(n2);
    }

    SemanticLogits out;
    out.rows = rows;
    out.num_classes = nc;
    out.probabilities.assign(rows * static_cast<std::size_t>(nc), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* f = features.data() + i * dim;
        double fn2 = 0.0;
        for (int k = 0; k < dim; ++k)
            fn2 += f[k] * f[k];
        const double fn = std::sqrt(fn2);
        double* p = out.probabilities.data() + i * nc;
        if (fn <= kZeroNormThreshold) {
            out.zero_norm_rows++;
            for (int c = 0; c < nc; ++c)
                p[c] = 1.0 / nc;
            continue;
        }
        double max_logit = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < nc; ++c) {
            double dot = 0.0;
            for (int k = 0; k < dim; ++k)
                dot += f[k] * bank.row(c)[k];
            p[c] = dot / (fn * bank_norm[c]) / temperature;
            max_logit = std::max(max_logit, p[c]);
        }
        double z = 0.0;
        for (int c = 0; c < nc; ++c) {
            p[c] = std::exp(p[c] - max_logit);
            z += p[c];
        }
        for (int c = 0; c < nc; ++c)
            p[c] /= z;
    }
    return out;
}

/// Semantic occupancy grid: class_id per voxel, -1 where empty.
struct SemanticGrid {
    VoxelGridSpec spec;
    int num_classes = 0;
    std::vector<std::int32_t> class_id;

    std::size_t occupied() const {
        std::size_t n = 0;
        for (auto c : class_id)
            n += c >= 0 ? 1 : 0;
        return n;
    }
};

/// Classifies an already-splatted feature grid: voxels passing the occupancy
/// head get the argmax class of their normalized feature, the rest are empty.
inline SemanticGrid classify_grid(const VoxelGrid& grid, const TextEmbeddingBank& bank,
                                  const OccupancyHeadConfig& head, double temperature = 1.0) {
    if (!grid.has_features())
        throw ValidationError("classify_grid: grid has no features");
    if (grid.feature_dim != bank.dim)
        throw ValidationError("classify_grid: feature dim != bank dim");
    const auto mask = occupancy_mask(grid, head);
    SemanticGrid sem;
    sem.spec = grid.spec;
    sem.num_classes = bank.num_classes;
    sem.class_id.assign(grid.spec.num_voxels(), -1);
    const auto logits = semantic_logits(grid.features, grid.feature_dim, bank, temperature);
    for (std::size_t v = 0; v < mask.size(); ++v) {
        if (!mask[v])
            continue;
        const double* p = logits.probabilities.data() + v * bank.num_classes;
        int best = 0;
        for (int c = 1; c < bank.num_classes; ++c)
            if (p[c] > p[best])
                best = c;
        sem.class_id[v] = best;
    }
    return sem;
}

/// Zero-shot semantic occupancy: splat → occupancy mask → per-voxel argmax
/// over cosine logits of G_v against the bank.
inline SemanticGrid semantic_occupancy(const GaussianSet& set, const TextEmbeddingBank& bank,
                                       const VoxelGridSpec& spec, const OccupancyHeadConfig& head,
                                       double radius_sigmas = 3.0, double temperature = 1.0,
                                       int num_threads = 1) {
    if (set.feature_dim != bank.dim)
        throw ValidationError("semantic_occupancy: feature dim != bank dim");
    const auto covs = build_covariances(set, num_threads);
    const DualCsr csr = build_dual_csr(set, covs, spec, radius_sigmas, num_threads);
    const SplatOutput splat = splat_forward(set, covs, csr, spec, num_threads);
    return classify_grid(splat.grid, bank, head, temperature);
}

struct IouReport {
    double binary_iou = 1.0;              // occupancy IoU (1 when both empty)
    std::vector<double> per_class;        // NaN where the class is absent
    double miou = 0.0;
    std::size_t classes_counted = 0;
};

/// Binary occupancy IoU plus per-class semantic IoU over an optional eval
/// mask. mIoU averages classes present in gt ∪ pred by default, or all
/// classes (absent ones scoring 0) when all_classes is set.
inline IouReport iou_miou(const SemanticGrid& pred, const SemanticGrid& gt,
                          const std::vector<std::uint8_t>& eval_mask = {},
                          bool all_classes = false) {
    if (pred.spec.dims != gt.spec.dims || pred.class_id.size() != gt.class_id.size())
        throw ValidationError("iou_miou: grid spec mismatch");
    if (!eval_mask.empty() && eval_mask.size() != pred.class_id.size())
        throw ValidationError("iou_miou: eval mask length mismatch");
    const int nc = std::max(pred.num_classes, gt.num_classes);
    std::vector<std::size_t> inter(nc, 0), uni(nc, 0);
    std::size_t occ_inter = 0, occ_union = 0;
    for (std::size_t v = 0; v < pred.class_id.size(); ++v) {
        if (!eval_mask.empty() && !eval_mask[v])
            continue;
        const bool po = pred.class_id[v] >= 0;
        const bool go = gt.class_id[v] >= 0;
        occ_inter += (po && go) ? 1 : 0;
        occ_union += (po || go) ? 1 : 0;
        for (int c = 0; c < nc; ++c) {
            const bool pc = po && pred.class_id[v] == c;
            const bool gc = go && gt.class_id[v] == c;
            inter[c] += (pc && gc) ? 1 : 0;
            uni[c] += (pc || gc) ? 1 : 0;
        }
    }
    IouReport report;
    report.binary_iou =
        occ_union == 0 ? 1.0 : static_cast<double>(occ_inter) / static_cast<double>(occ_union);
    report.per_class.assign(nc, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    std::size_t counted = 0;
    for (int c = 0; c < nc; ++c) {
        if (uni[c] > 0) {
            report.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
            sum += report.per_class[c];
            ++counted;
        } else if (all_classes) {
            report.per_class[c] = 0.0;
            ++counted;
        }
    }
    report.classes_counted = counted;
    report.miou = counted == 0 ? 0.0 : sum / static_cast<double>(counted);
    return report;
}

/// Rectangular ego footprint (meters) rasterized around each waypoint for
/// collision checks; axis-aligned in the BEV grid frame.
struct EgoFootprint {
    double length = 4.1;
    double width = 1.7;
};

struct TrajectoryMetrics {
    std::vector<double> l2_per_horizon; // cumulative mean distance up to t
    double l2_avg = 0.0;
    double collision_rate = 0.0;        // fraction of colliding waypoints
    std::size_t off_grid_waypoints = 0; // flagged, not counted as collisions
};

/// L2: per-horizon cumulative mean Euclidean distance between predicted and
/// ground-truth waypoints. CR: fraction of waypoints whose ego footprint
/// overlaps an obstacle cell of the BEV grid (occupancy or density > 0).
inline TrajectoryMetrics trajectory_metrics(const std::vector<Vec2>& pred,
                                            const std::vector<Vec2>& gt,
                                            const VoxelGrid& obstacle_bev,
                                            const EgoFootprint& footprint = {}) {
    if (pred.size() != gt.size())
        throw ValidationError("trajectory_metrics: waypoint count mismatch");
    if (obstacle_bev.spec.dims[2] != 1)
        throw ValidationError("trajectory_metrics: obstacle grid must be BEV (nz = 1)");
    TrajectoryMetrics out;
    if (pred.empty())
        return out;

    double cum = 0.0;
    out.l2_per_horizon.resize(pred.size());
    for (std::size_t t = 0; t < pred.size(); ++t) {
        cum += (pred[t] - gt[t]).norm();
        out.l2_per_horizon[t] = cum / static_cast<double>(t + 1);
    }
    for (double v : out.l2_per_horizon)
        out.l2_avg += v;
    out.l2_avg /= static_cast<double>(out.l2_per_horizon.size());

    const auto& spec = obstacle_bev.spec;
    auto occupied = [&](int ix, int iy) {
        const std::size_t v = spec.voxel_index(ix, iy, 0);
        if (obstacle_bev.has_occupancy())
            return obstacle_bev.occupancy[v] != 0;
        return obstacle_bev.density[v] > 0.0;
    };
    std::size_t collisions = 0;
    for (const Vec2& w : pred) {
        const double cx = (w.x() - spec.origin[0]) / spec.voxel_size;
        const double cy = (w.y() - spec.origin[1]) / spec.voxel_size;
        if (cx < 0.0 || cy < 0.0 || cx >= spec.dims[0] || cy >= spec.dims[1]) {
            out.off_grid_waypoints++;
            continue;
        }
        const double hx = 0.5 * footprint.length / spec.voxel_size;
        const double hy = 0.5 * footprint.width / spec.voxel_size;
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - hx)));
        const int x1 = std::min(spec.dims[0] - 1, static_cast<int>(std::floor(cx + hx)));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - hy)));
        const int y1 = std::min(spec.dims[1] - 1, static_cast<int>(std::floor(cy + hy)));
        bool hit = false;
        for (int iy = y0; iy <= y1 && !hit; ++iy)
            for (int ix = x0; ix <= x1 && !hit; ++ix)
                hit = occupied(ix, iy);
        collisions += hit ? 1 : 0;
    }
    out.collision_rate = static_cast<double>(collisions) / static_cast<double>(pred.size());
    return out;
}

} // namespace gsvox
