// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#include "gsvox/query.hpp"
#include "gsvox/synthetic.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace gsvox;

namespace {

TextEmbeddingBank orthogonal_bank(int nc, int dim) {
    TextEmbeddingBank bank;
    bank.num_classes = nc;
    bank.dim = dim;
    bank.embeddings.assign(static_cast<std::size_t>(nc) * dim, 0.0);
    for (int c = 0; c < nc; ++c) {
        bank.embeddings[static_cast<std::size_t>(c) * dim + c] = 1.0;
        bank.names.push_back("class" + std::to_string(c));
    }
    return bank;
}

TextEmbeddingBank random_bank(int nc, int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    TextEmbeddingBank bank;
    bank.num_classes = nc;
    bank.dim = dim;
    bank.embeddings.resize(static_cast<std::size_t>(nc) * dim);
    for (auto& e : bank.embeddings)
        e = n(rng);
    for (int c = 0; c < nc; ++c)
        bank.names.push_back("c" + std::to_string(c));
    return bank;
}

} // namespace

TEST(EmbeddingBank, RoundTripAndGoldenBytes) {
    const auto dir = testutil::temp_dir("query");
    auto bank = orthogonal_bank(2, 2);
    bank.names = {"ab", "c"};
    const auto path = (dir / "bank.temb").string();
    save_embedding_bank(bank, path);
    const auto loaded = load_embedding_bank(path);
    EXPECT_EQ(loaded.num_classes, 2);
    EXPECT_EQ(loaded.dim, 2);
    EXPECT_EQ(loaded.names, bank.names);
    EXPECT_EQ(loaded.embeddings, bank.embeddings);

    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string expect = "TEMB";
    auto push_u32 = [&expect](std::uint32_t v) {
        expect.append(reinterpret_cast<const char*>(&v), 4);
    };
    auto push_f32 = [&expect](float v) { expect.append(reinterpret_cast<const char*>(&v), 4); };
    push_u32(2);
    push_u32(2);
    push_u32(2);
    expect += "ab";
    push_u32(1);
    expect += "c";
    push_f32(1.0f);
    push_f32(0.0f);
    push_f32(0.0f);
    push_f32(1.0f);
    EXPECT_EQ(ss.str(), expect);
}

TEST(SemanticLogits, AlignedFeatureWinsArgmax) {
    const auto bank = orthogonal_bank(4, 4);
    std::vector<double> features(4, 0.0);
    features[2] = 5.0; // aligned with class 2, orthogonal to the rest
    const auto logits = semantic_logits(features, 4, bank);
    const double* p = logits.probabilities.data();
    int best = 0;
    for (int c = 1; c < 4; ++c)
        if (p[c] > p[best])
            best = c;
    EXPECT_EQ(best, 2);
}

TEST(SemanticLogits, RowsSumToOne) {
    const auto bank = random_bank(7, 5, 3);
    const auto features = random_upstream(20 * 5, 4);
    const auto logits = semantic_logits(features, 5, bank);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 7; ++c)
            sum += logits.probabilities[r * 7 + c];
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(SemanticLogits, ArgmaxAgreesWithBruteForceCosineRanking) {
    const auto bank = random_bank(9, 6, 5);
    const auto features = random_upstream(50 * 6, 6);
    const auto logits = semantic_logits(features, 6, bank);
    for (std::size_t r = 0; r < 50; ++r) {
        int got = 0;
        for (int c = 1; c < 9; ++c)
            if (logits.probabilities[r * 9 + c] > logits.probabilities[r * 9 + got])
                got = c;
        // Brute-force cosine ranking.
        int expect = 0;
        double best = -2.0;
        for (int c = 0; c < 9; ++c) {
            double dot = 0, fn = 0, bn = 0;
            for (int k = 0; k < 6; ++k) {
                dot += features[r * 6 + k] * bank.row(c)[k];
                fn += features[r * 6 + k] * features[r * 6 + k];
                bn += bank.row(c)[k] * bank.row(c)[k];
            }
            const double cosv = dot / std::sqrt(fn * bn);
            if (cosv > best) {
                best = cosv;
                expect = c;
            }
        }
        EXPECT_EQ(got, expect) << "row " << r;
    }
}

TEST(SemanticLogits, ArgmaxInvariantToPositiveRescaling) {
    const auto bank = random_bank(5, 4, 7);
    auto features = random_upstream(10 * 4, 8);
    const auto base = semantic_logits(features, 4, bank);
    for (std::size_t r = 0; r < 10; ++r)
        for (int k = 0; k < 4; ++k)
            features[r * 4 + k] *= 1000.0;
    const auto scaled = semantic_logits(features, 4, bank);
    for (std::size_t r = 0; r < 10; ++r) {
        auto argmax = [&](const SemanticLogits& l) {
            int best = 0;
            for (int c = 1; c < 5; ++c)
                if (l.probabilities[r * 5 + c] > l.probabilities[r * 5 + best])
                    best = c;
            return best;
        };
        EXPECT_EQ(argmax(base), argmax(scaled));
    }
}

TEST(SemanticLogits, ZeroNormRowGetsUniform) {
    const auto bank = orthogonal_bank(4, 4);
    const std::vector<double> features(4, 0.0);
    const auto logits = semantic_logits(features, 4, bank);
    EXPECT_EQ(logits.zero_norm_rows, 1u);
    for (int c = 0; c < 4; ++c)
        EXPECT_DOUBLE_EQ(logits.probabilities[c], 0.25);
}

TEST(SemanticOccupancy, OneGaussianLabelsItsVoxel) {
    VoxelGridSpec spec;
    spec.dims = {8, 8, 8};
    spec.origin = Vec3(-4, -4, -4);
    spec.voxel_size = 1.0;
    const auto bank = orthogonal_bank(4, 4);
    GaussianSet set(4);
    Gaussian g;
    g.mean = voxel_center(spec, {2, 3, 4});
    g.scale = Vec3(0.3, 0.3, 0.3);
    g.feature = Eigen::Vector4d(0, 0, 3.0, 0); // class 2
    set.push_back(g);
    OccupancyHeadConfig head;
    head.tau = 0.3;
    const auto sem = semantic_occupancy(set, bank, spec, head);
    EXPECT_EQ(sem.class_id[spec.voxel_index(2, 3, 4)], 2);
}

TEST(SemanticOccupancy, EmptySetAllEmpty) {
    VoxelGridSpec spec;
    spec.dims = {4, 4, 4};
    spec.voxel_size = 1.0;
    const auto bank = orthogonal_bank(3, 3);
    const GaussianSet set(3);
    OccupancyHeadConfig head;
    const auto sem = semantic_occupancy(set, bank, spec, head);
    for (auto c : sem.class_id)
        EXPECT_EQ(c, -1);
    EXPECT_EQ(sem.occupied(), 0u);
}

TEST(SemanticOccupancy, TwoClassSceneMatchesDensityWeightedOracle) {
    VoxelGridSpec spec;
    spec.dims = {12, 12, 8};
    spec.origin = Vec3(-6, -6, -4);
    spec.voxel_size = 1.0;
    const auto bank = orthogonal_bank(2, 2);
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    GaussianSet set(2);
    for (int i = 0; i < 40; ++i) {
        Gaussian g;
        g.mean = Vec3(u(rng), u(rng), u(rng) * 0.6);
        g.scale = Vec3(0.5, 0.5, 0.5);
        g.opacity = 0.8;
        g.feature = i % 2 ? Eigen::Vector2d(1.0, 0.0) : Eigen::Vector2d(0.0, 1.0);
        set.push_back(g);
    }
    OccupancyHeadConfig head;
    head.tau = 0.05;
    const auto sem = semantic_occupancy(set, bank, spec, head);

    // Oracle: density-weighted feature mean per voxel, argmax by cosine.
    const auto covs = build_covariances(set);
    for (int iz = 0; iz < spec.dims[2]; ++iz)
        for (int iy = 0; iy < spec.dims[1]; ++iy)
            for (int ix = 0; ix < spec.dims[0]; ++ix) {
                const Vec3 x = voxel_center(spec, {ix, iy, iz});
                double f0 = 0, f1 = 0, F = 0;
                for (std::size_t g = 0; g < set.count; ++g) {
                    // Same support rule as the splat path.
                    const Aabb box = gaussian_aabb(set.mean(g), covs[g], 3.0);
                    bool inside = true;
                    for (int k = 0; k < 3; ++k) {
                        const int l = static_cast<int>(
                            std::floor((box.lo[k] - spec.origin[k]) / spec.voxel_size));
                        const int h = static_cast<int>(
                            std::floor((box.hi[k] - spec.origin[k]) / spec.voxel_size));
                        const int lo = std::max(l, 0), hi = std::min(h, spec.dims[k] - 1);
                        const int t = (k == 0 ? ix : (k == 1 ? iy : iz)) / spec.tile_dims[k];
                        if (h < 0 || l >= spec.dims[k] || t < lo / spec.tile_dims[k] ||
                            t > hi / spec.tile_dims[k])
                            inside = false;
                    }
                    if (!inside)
                        continue;
                    const double w = gaussian_density(set.mean(g), covs[g], set.opacities[g], x);
                    F += w;
                    f0 += w * set.feature(g)[0];
                    f1 += w * set.feature(g)[1];
                }
                const std::size_t v = spec.voxel_index(ix, iy, iz);
                if (F <= head.tau) {
                    EXPECT_EQ(sem.class_id[v], -1);
                } else if (std::abs(f0 - f1) > 1e-9 * (std::abs(f0) + std::abs(f1))) {
                    EXPECT_EQ(sem.class_id[v], f0 > f1 ? 0 : 1) << "voxel " << v;
                }
            }
}

TEST(IouMiou, ClosedFormCases) {
    VoxelGridSpec spec;
    spec.dims = {4, 4, 4};
    spec.voxel_size = 1.0;
    SemanticGrid a;
    a.spec = spec;
    a.num_classes = 3;
    a.class_id.assign(64, -1);
    for (int i = 0; i < 10; ++i)
        a.class_id[i] = i % 3;
    const auto same = iou_miou(a, a);
    EXPECT_DOUBLE_EQ(same.binary_iou, 1.0);
    EXPECT_DOUBLE_EQ(same.miou, 1.0);

    SemanticGrid b = a;
    b.class_id.assign(64, -1);
    for (int i = 10; i < 20; ++i)
        b.class_id[i] = i % 3;
    EXPECT_DOUBLE_EQ(iou_miou(a, b).binary_iou, 0.0);
}

TEST(IouMiou, MatchesSetArithmeticOracle) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        VoxelGridSpec spec;
        spec.dims = {4, 3, 2};
        spec.voxel_size = 1.0;
        const int nc = 1 + static_cast<int>(rng() % 4);
        SemanticGrid a, b;
        a.spec = b.spec = spec;
        a.num_classes = b.num_classes = nc;
        a.class_id.resize(24);
        b.class_id.resize(24);
        for (int i = 0; i < 24; ++i) {
            a.class_id[i] = static_cast<int>(rng() % (nc + 1)) - 1;
            b.class_id[i] = static_cast<int>(rng() % (nc + 1)) - 1;
        }
        const auto report = iou_miou(a, b);

        std::size_t oi = 0, ou = 0;
        for (int i = 0; i < 24; ++i) {
            oi += (a.class_id[i] >= 0 && b.class_id[i] >= 0) ? 1 : 0;
            ou += (a.class_id[i] >= 0 || b.class_id[i] >= 0) ? 1 : 0;
        }
        if (ou)
            EXPECT_DOUBLE_EQ(report.binary_iou, static_cast<double>(oi) / ou);
        double sum = 0.0;
        std::size_t counted = 0;
        for (int c = 0; c < nc; ++c) {
            std::size_t inter = 0, uni = 0;
            for (int i = 0; i < 24; ++i) {
                inter += (a.class_id[i] == c && b.class_id[i] == c) ? 1 : 0;
                uni += (a.class_id[i] == c || b.class_id[i] == c) ? 1 : 0;
            }
            if (uni) {
                EXPECT_DOUBLE_EQ(report.per_class[c], static_cast<double>(inter) / uni);
                sum += static_cast<double>(inter) / uni;
                ++counted;
            } else {
                EXPECT_TRUE(std::isnan(report.per_class[c]));
            }
        }
        if (counted)
            EXPECT_NEAR(report.miou, sum / counted, 1e-15);

        // Binary IoU is symmetric.
        EXPECT_DOUBLE_EQ(iou_miou(b, a).binary_iou, report.binary_iou);
    }
}

TEST(IouMiou, SingleClassEqualsItsIou) {
    VoxelGridSpec spec;
    spec.dims = {4, 2, 2};
    spec.voxel_size = 1.0;
    SemanticGrid a, b;
    a.spec = b.spec = spec;
    a.num_classes = b.num_classes = 1;
    a.class_id = {0, 0, -1, -1, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1};
    b.class_id = {0, -1, 0, -1, 0, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1};
    const auto report = iou_miou(a, b);
    EXPECT_DOUBLE_EQ(report.miou, report.per_class[0]);
    EXPECT_DOUBLE_EQ(report.per_class[0], 2.0 / 4.0);
}

TEST(Trajectory, ClosedFormsAndOffsets) {
    VoxelGrid bev;
    bev.spec.dims = {20, 20, 1};
    bev.spec.tile_dims = {4, 4, 1};
    bev.spec.origin = Vec3(-10, -10, 0);
    bev.spec.voxel_size = 1.0;
    bev.density.assign(400, 0.0);

    std::vector<Vec2> gt;
    for (int t = 0; t < 6; ++t)
        gt.emplace_back(0.2 * t, 0.1 * t);
    const auto same = trajectory_metrics(gt, gt, bev);
    for (double v : same.l2_per_horizon)
        EXPECT_DOUBLE_EQ(v, 0.0);
    EXPECT_DOUBLE_EQ(same.collision_rate, 0.0);

    std::vector<Vec2> offset;
    for (const auto& w : gt)
        offset.emplace_back(w.x() + 1.0, w.y());
    const auto shifted = trajectory_metrics(offset, gt, bev);
    for (double v : shifted.l2_per_horizon)
        EXPECT_NEAR(v, 1.0, 1e-12);
    EXPECT_NEAR(shifted.l2_avg, 1.0, 1e-12);
}

TEST(Trajectory, CollisionRateGeometricOracle) {
    VoxelGrid bev;
    bev.spec.dims = {20, 20, 1};
    bev.spec.tile_dims = {4, 4, 1};
    bev.spec.origin = Vec3(0, 0, 0);
    bev.spec.voxel_size = 1.0;
    bev.density.assign(400, 0.0);
    // Obstacle block on x in [8,12), y in [8,12).
    for (int iy = 8; iy < 12; ++iy)
        for (int ix = 8; ix < 12; ++ix)
            bev.density[bev.spec.voxel_index(ix, iy, 0)] = 1.0;

    // Straight line through the block at y = 10: footprint 2x1 m.
    std::vector<Vec2> traj, gt;
    for (int t = 0; t < 10; ++t) {
        traj.emplace_back(2.0 * t + 1.0, 10.0);
        gt.emplace_back(2.0 * t + 1.0, 10.0);
    }
    EgoFootprint fp{2.0, 1.0};
    const auto metrics = trajectory_metrics(traj, gt, bev, fp);
    // Hand count: waypoints sit at x = 1,3,...,19; a length-2 footprint
    // reaches cells floor(x-1)..floor(x+1) and the obstacle occupies x-cells
    // 8..11. Only x = 7 (reaches 8), x = 9 and x = 11 hit: 3 of 10.
    EXPECT_NEAR(metrics.collision_rate, 0.3, 1e-15);
}

TEST(Trajectory, OffGridWaypointsFlaggedNotCollisions) {
    VoxelGrid bev;
    bev.spec.dims = {4, 4, 1};
    bev.spec.tile_dims = {4, 4, 1};
    bev.spec.origin = Vec3(0, 0, 0);
    bev.spec.voxel_size = 1.0;
    bev.density.assign(16, 1.0); // everything an obstacle
    const std::vector<Vec2> pred{{100.0, 100.0}, {1.0, 1.0}};
    const std::vector<Vec2> gt{{100.0, 100.0}, {1.0, 1.0}};
    const auto metrics = trajectory_metrics(pred, gt, bev);
    EXPECT_EQ(metrics.off_grid_waypoints, 1u);
    EXPECT_DOUBLE_EQ(metrics.collision_rate, 0.5);
}
