// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#include "gsvox/binning.hpp"
#include "gsvox/synthetic.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace gsvox;

namespace {

GaussianSet tight_gaussian_at(const Vec3& mean, double sigma = 0.2) {
    GaussianSet set(1);
    Gaussian g;
    g.mean = mean;
    g.scale = Vec3(sigma, sigma, sigma);
    g.feature = Eigen::VectorXd::Zero(1);
    set.push_back(g);
    return set;
}

} // namespace

TEST(TileVoxelRange, FullAndClippedTiles) {
    VoxelGridSpec spec;
    spec.dims = {8, 8, 8};
    const VoxelBox t0 = tile_voxel_range(spec, 0);
    EXPECT_EQ(t0.lo, (std::array<int, 3>{0, 0, 0}));
    EXPECT_EQ(t0.hi, (std::array<int, 3>{4, 4, 4}));

    VoxelGridSpec clipped;
    clipped.dims = {6, 4, 4};
    // Tile grid (2,1,1); tile 1 covers the clipped x range [4,6).
    const VoxelBox t1 = tile_voxel_range(clipped, 1);
    EXPECT_EQ(t1.lo, (std::array<int, 3>{4, 0, 0}));
    EXPECT_EQ(t1.hi, (std::array<int, 3>{6, 4, 4}));

    EXPECT_THROW(tile_voxel_range(clipped, 2), std::out_of_range);
}

TEST(TileVoxelRange, TilesPartitionTheGrid) {
    for (const auto dims : {std::array<int, 3>{8, 8, 8}, {6, 4, 4}, {5, 7, 3}, {1, 1, 9}}) {
        VoxelGridSpec spec;
        spec.dims = dims;
        std::vector<int> covered(spec.num_voxels(), 0);
        for (std::size_t t = 0; t < spec.num_tiles(); ++t) {
            const VoxelBox box = tile_voxel_range(spec, t);
            for (int iz = box.lo[2]; iz < box.hi[2]; ++iz)
                for (int iy = box.lo[1]; iy < box.hi[1]; ++iy)
                    for (int ix = box.lo[0]; ix < box.hi[0]; ++ix)
                        covered[spec.voxel_index(ix, iy, iz)]++;
        }
        for (int c : covered)
            EXPECT_EQ(c, 1); // union is everything, pairwise disjoint
    }
}

TEST(DualCsr, MinimalTwoTileStructure) {
    // Tile 0 spans x in [0,4), tile 1 x in [4,8). Gaussian 0 straddles both,
    // Gaussian 1 sits inside tile 1.
    VoxelGridSpec spec;
    spec.dims = {8, 4, 4};
    spec.voxel_size = 1.0;
    GaussianSet set(1);
    Gaussian g0;
    g0.mean = Vec3(4.0, 2.0, 2.0);
    g0.scale = Vec3(0.5, 0.5, 0.5); // 3σ box [2.5, 5.5] spans both tiles
    g0.feature = Eigen::VectorXd::Zero(1);
    set.push_back(g0);
    Gaussian g1;
    g1.mean = Vec3(6.0, 2.0, 2.0);
    g1.scale = Vec3(0.3, 0.3, 0.3);
    g1.feature = Eigen::VectorXd::Zero(1);
    set.push_back(g1);

    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    EXPECT_EQ(csr.pair_count, 3u);
    EXPECT_EQ(csr.g2t_indptr, (std::vector<std::size_t>{0, 2, 3}));
    EXPECT_EQ(csr.g2t_indices, (std::vector<std::uint32_t>{0, 1, 1}));
    EXPECT_EQ(csr.t2g_indptr, (std::vector<std::size_t>{0, 1, 3}));
    EXPECT_EQ(csr.t2g_indices, (std::vector<std::uint32_t>{0, 0, 1}));
}

TEST(DualCsr, TightGaussianSinglePair) {
    VoxelGridSpec spec;
    spec.dims = {8, 8, 8};
    spec.voxel_size = 1.0;
    // Center of tile 0's voxel block, support well inside it.
    const auto set = tight_gaussian_at(Vec3(2.0, 2.0, 2.0), 0.2);
    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    EXPECT_EQ(csr.pair_count, 1u);
    EXPECT_EQ(csr.g2t_indices, (std::vector<std::uint32_t>{0}));
}

TEST(DualCsr, NoOverlapYieldsAllZeroIndptr) {
    VoxelGridSpec spec;
    spec.dims = {4, 4, 4};
    spec.voxel_size = 1.0;
    const auto set = tight_gaussian_at(Vec3(100.0, 100.0, 100.0));
    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    EXPECT_EQ(csr.pair_count, 0u);
    for (auto v : csr.g2t_indptr)
        EXPECT_EQ(v, 0u);
    for (auto v : csr.t2g_indptr)
        EXPECT_EQ(v, 0u);
}

TEST(DualCsr, MatchesBruteForceOracleOnRandomScene) {
    VoxelGridSpec spec;
    spec.origin = Vec3(-8, -8, -8);
    spec.dims = {32, 32, 32};
    spec.voxel_size = 0.5;
    SceneConfig cfg;
    cfg.count = 1000;
    cfg.feature_dim = 2;
    cfg.outside_fraction = 0.1;
    cfg.seed = 99;
    const auto set = random_gaussian_set(spec, cfg);
    const auto covs = build_covariances(set);
    const DualCsr csr = build_dual_csr(set, covs, spec, 3.0);
    validate_dual_csr(csr, set.count, spec.num_tiles());
    EXPECT_EQ(testutil::pairs_of(csr, set.count), testutil::pair_oracle(set, covs, spec, 3.0));
}

TEST(DualCsr, DualConsistencyInvariant) {
    VoxelGridSpec spec;
    spec.origin = Vec3(-4, -4, -4);
    spec.dims = {16, 16, 16};
    spec.voxel_size = 0.5;
    SceneConfig cfg;
    cfg.count = 200;
    cfg.feature_dim = 1;
    cfg.seed = 5;
    const auto set = random_gaussian_set(spec, cfg);
    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    EXPECT_NO_THROW(validate_dual_csr(csr, set.count, spec.num_tiles()));
    // Within each tile the Gaussian list ascends.
    for (std::size_t t = 0; t < spec.num_tiles(); ++t)
        for (std::size_t p = csr.t2g_indptr[t]; p + 1 < csr.t2g_indptr[t + 1]; ++p)
            EXPECT_LT(csr.t2g_indices[p], csr.t2g_indices[p + 1]);
}

TEST(DualCsr, MonotoneInRadius) {
    VoxelGridSpec spec;
    spec.origin = Vec3(-4, -4, -4);
    spec.dims = {16, 16, 16};
    spec.voxel_size = 0.5;
    SceneConfig cfg;
    cfg.count = 150;
    cfg.feature_dim = 1;
    cfg.outside_fraction = 0.2;
    cfg.seed = 31;
    const auto set = random_gaussian_set(spec, cfg);
    const auto covs = build_covariances(set);
    auto prev = testutil::pairs_of(build_dual_csr(set, covs, spec, 1.0), set.count);
    for (double r : {2.0, 3.0, 4.5}) {
        auto cur = testutil::pairs_of(build_dual_csr(set, covs, spec, r), set.count);
        for (const auto& p : prev)
            EXPECT_TRUE(cur.count(p)) << "pair lost when enlarging radius";
        prev = std::move(cur);
    }
}

TEST(DualCsr, DeterministicAcrossWorkerCounts) {
    VoxelGridSpec spec;
    spec.origin = Vec3(-8, -8, -2);
    spec.dims = {24, 24, 8};
    spec.voxel_size = 0.5;
    SceneConfig cfg;
    cfg.count = 500;
    cfg.feature_dim = 1;
    cfg.outside_fraction = 0.1;
    cfg.seed = 77;
    const auto set = random_gaussian_set(spec, cfg);
    const auto covs = build_covariances(set);
    const DualCsr ref = build_dual_csr(set, covs, spec, 3.0, 1);
    for (int threads : {2, 3, 8}) {
        const DualCsr got = build_dual_csr(set, covs, spec, 3.0, threads);
        EXPECT_EQ(got.g2t_indptr, ref.g2t_indptr);
        EXPECT_EQ(got.g2t_indices, ref.g2t_indices);
        EXPECT_EQ(got.t2g_indptr, ref.t2g_indptr);
        EXPECT_EQ(got.t2g_indices, ref.t2g_indices);
    }
}

TEST(DualCsr, OutsideGaussianStillPairs) {
    VoxelGridSpec spec;
    spec.dims = {8, 8, 8};
    spec.voxel_size = 1.0;
    // Mean outside the grid; 3σ box reaches back in.
    const auto set = tight_gaussian_at(Vec3(-1.0, 4.0, 4.0), 0.6);
    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    EXPECT_GT(csr.pair_count, 0u);
}

TEST(DualCsr, DebugDumpFormat) {
    const auto dir = testutil::temp_dir("binning");
    VoxelGridSpec spec;
    spec.dims = {8, 4, 4};
    spec.voxel_size = 1.0;
    const auto set = tight_gaussian_at(Vec3(2.0, 2.0, 2.0), 0.2);
    const DualCsr csr = build_dual_csr(set, spec, 3.0);
    const auto path = (dir / "csr.txt").string();
    dump_dual_csr(csr, path);
    std::ifstream in(path);
    std::string l1, l2, l3, l4, extra;
    ASSERT_TRUE(std::getline(in, l1));
    ASSERT_TRUE(std::getline(in, l2));
    ASSERT_TRUE(std::getline(in, l3));
    ASSERT_TRUE(std::getline(in, l4));
    EXPECT_FALSE(std::getline(in, extra));
    EXPECT_EQ(l1, "0 1");
    EXPECT_EQ(l2, "0");
    EXPECT_EQ(l3, "0 1 1");
    EXPECT_EQ(l4, "0");
}
