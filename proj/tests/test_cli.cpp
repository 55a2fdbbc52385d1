// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0
//
// Subprocess tests of the gsvox binary: exit codes, file outputs and the
// per-subcommand determinism contract across worker counts.

#include "gsvox/gsvox.hpp"

#include "oracles.hpp"

#include <json.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace gsvox;

namespace {

const char* cli_path() { return GSVOX_CLI_PATH; }

struct RunResult {
    int exit_code;
    std::string stdout_text;
};

RunResult run_cli(const std::string& args, const fs::path& dir) {
    const auto out_file = dir / "stdout.txt";
    const std::string cmd = std::string(cli_path()) + " " + args + " > " + out_file.string() +
                            " 2> " + (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    RunResult result;
    result.exit_code = WEXITSTATUS(status);
    std::ifstream in(out_file);
    std::ostringstream ss;
    ss << in.rdbuf();
    result.stdout_text = ss.str();
    return result;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path write_demo_set(const fs::path& dir, std::size_t count = 300, int C = 4) {
    VoxelGridSpec spec = grid_preset("nuscenes");
    SceneConfig cfg;
    cfg.count = count;
    cfg.feature_dim = C;
    cfg.outside_fraction = 0.05;
    cfg.seed = 7;
    auto set = random_gaussian_set(spec, cfg);
    const auto path = dir / "scene.gset";
    save_gaussian_set(set, path.string());
    return path;
}

} // namespace

TEST(Cli, UsageAndErrorExitCodes) {
    const auto dir = testutil::temp_dir("cli");
    EXPECT_EQ(run_cli("--no-such-flag", dir).exit_code, 64);
    EXPECT_EQ(run_cli("splat --bogus", dir).exit_code, 64);
    EXPECT_EQ(run_cli("--help", dir).exit_code, 0);
    EXPECT_EQ(run_cli("splat --help", dir).exit_code, 0);
    // Missing input file: validation/I-O error.
    EXPECT_EQ(run_cli("splat --set missing.gset --grid-preset nuscenes --out x.vgrd", dir)
                  .exit_code,
              1);
}

TEST(Cli, SplatWritesLoadableGridDeterministically) {
    const auto dir = testutil::temp_dir("cli");
    const auto set_path = write_demo_set(dir);
    std::string ref_bytes;
    for (int threads : {1, 2, 8}) {
        const auto out_path = dir / ("grid_t" + std::to_string(threads) + ".vgrd");
        const auto result = run_cli("splat --set " + set_path.string() +
                                        " --grid-preset nuscenes --out " + out_path.string() +
                                        " --threads " + std::to_string(threads),
                                    dir);
        ASSERT_EQ(result.exit_code, 0) << result.stdout_text;
        const auto bytes = file_bytes(out_path);
        if (threads == 1) {
            ref_bytes = bytes;
            const auto grid = load_voxel_grid(out_path.string());
            EXPECT_EQ(grid.spec.dims, (std::array<int, 3>{200, 200, 16}));
            EXPECT_TRUE(grid.has_features());
            EXPECT_TRUE(grid.has_occupancy());
        } else {
            EXPECT_EQ(bytes, ref_bytes) << "splat output differs at " << threads << " threads";
        }
    }
}

TEST(Cli, BevSplatAndJsonRecord) {
    const auto dir = testutil::temp_dir("cli");
    const auto set_path = write_demo_set(dir, 100);
    const auto out_path = dir / "bev.vgrd";
    const auto result = run_cli("splat --set " + set_path.string() +
                                    " --grid-preset nuscenes --bev --out " + out_path.string(),
                                dir);
    ASSERT_EQ(result.exit_code, 0);
    const auto grid = load_voxel_grid(out_path.string());
    EXPECT_EQ(grid.spec.dims[2], 1);
    const auto rec = nlohmann::json::parse(result.stdout_text);
    EXPECT_EQ(rec.at("cmd"), "splat");
    EXPECT_TRUE(rec.at("bev").get<bool>());
    EXPECT_EQ(rec.at("voxels").get<std::size_t>(), grid.spec.num_voxels());
}

TEST(Cli, BinDumpDeterministicAcrossThreads) {
    const auto dir = testutil::temp_dir("cli");
    const auto set_path = write_demo_set(dir, 500);
    std::string ref;
    for (int threads : {1, 2, 8}) {
        const auto dump = dir / ("csr_t" + std::to_string(threads) + ".txt");
        const auto result =
            run_cli("bin --set " + set_path.string() + " --grid-preset nuscenes --dump " +
                        dump.string() + " --threads " + std::to_string(threads),
                    dir);
        ASSERT_EQ(result.exit_code, 0);
        const auto bytes = file_bytes(dump);
        if (threads == 1)
            ref = bytes;
        else
            EXPECT_EQ(bytes, ref);
    }
}

TEST(Cli, GradcheckPassesAndReportsTable) {
    const auto dir = testutil::temp_dir("cli");
    const auto result = run_cli("gradcheck --seed 7 --n 4 --max-gaussians 4 --threads 2", dir);
    EXPECT_EQ(result.exit_code, 0);
    const auto rec = nlohmann::json::parse(result.stdout_text);
    EXPECT_TRUE(rec.at("passed").get<bool>());
    EXPECT_GT(rec.at("checked").at("covariance").get<std::size_t>(), 0u);
    const auto table = file_bytes(dir / "stderr.txt");
    EXPECT_NE(table.find("max rel err"), std::string::npos);
}

TEST(Cli, BenchSmallSceneHashesStableAcrossThreads) {
    const auto dir = testutil::temp_dir("cli");
    std::string grid_hash, grad_hash;
    for (int threads : {1, 2, 8}) {
        const auto result = run_cli(
            "bench --gaussians 200 --feature-dim 4 --grid-origin -8 -8 -2 --grid-dims 32 32 8 "
            "--grid-voxel-size 0.5 --reps 1 --seed 3 --threads " +
                std::to_string(threads),
            dir);
        ASSERT_EQ(result.exit_code, 0) << result.stdout_text;
        const auto rec = nlohmann::json::parse(result.stdout_text);
        EXPECT_TRUE(rec.at("agree_fw").get<bool>());
        EXPECT_TRUE(rec.at("agree_bw").get<bool>());
        if (threads == 1) {
            grid_hash = rec.at("grid_hash").get<std::string>();
            grad_hash = rec.at("grad_hash").get<std::string>();
        } else {
            EXPECT_EQ(rec.at("grid_hash").get<std::string>(), grid_hash);
            EXPECT_EQ(rec.at("grad_hash").get<std::string>(), grad_hash);
        }
    }
}

TEST(Cli, RenderLabelQueryEvalPipeline) {
    const auto dir = testutil::temp_dir("cli");

    // Camera for both rendering and labeling.
    auto cam = testutil::simple_camera(64, 48, 40.0, 32.0, 24.0);
    const auto cam_path = dir / "cam.txt";
    save_camera(cam, cam_path.string());

    // A small set in front of the camera (+z).
    GaussianSet set(3);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        Gaussian g;
        g.mean = Vec3(u(rng), u(rng), 4.0 + u(rng));
        g.scale = Vec3(0.3, 0.3, 0.3);
        g.opacity = 0.7;
        g.feature = Eigen::Vector3d(u(rng), u(rng), u(rng));
        set.push_back(g);
    }
    const auto set_path = dir / "front.gset";
    save_gaussian_set(set, set_path.string());

    // render: deterministic across threads, writes all three outputs.
    std::string feat_ref;
    for (int threads : {1, 2, 8}) {
        const auto feat = dir / ("feat_t" + std::to_string(threads) + ".vgrd");
        const auto result = run_cli("render --set " + set_path.string() + " --camera " +
                                        cam_path.string() + " --out-features " + feat.string() +
                                        " --out-depth " + (dir / "d.pgm").string() +
                                        " --out-preview " + (dir / "p.ppm").string() +
                                        " --threads " + std::to_string(threads),
                                    dir);
        ASSERT_EQ(result.exit_code, 0);
        if (threads == 1)
            feat_ref = file_bytes(feat);
        else
            EXPECT_EQ(file_bytes(feat), feat_ref);
    }
    EXPECT_TRUE(fs::exists(dir / "d.pgm"));
    EXPECT_TRUE(fs::exists(dir / "p.ppm"));
    // PGM header sanity.
    EXPECT_EQ(file_bytes(dir / "d.pgm").substr(0, 2), "P5");
    EXPECT_EQ(file_bytes(dir / "p.ppm").substr(0, 2), "P6");

    // label: one synthetic frame looking down +z with a constant feature map.
    PointCloud pc;
    pc.count = 0;
    pc.feature_dim = 0;
    std::uniform_real_distribution<double> pu(-2.0, 2.0);
    for (int i = 0; i < 400; ++i) {
        pc.xyz.insert(pc.xyz.end(), {pu(rng), pu(rng), 3.0 + pu(rng)});
        pc.count++;
    }
    const auto pc_path = dir / "frame0.pnts";
    save_point_cloud(pc, pc_path.string());
    const auto pose_path = dir / "pose0.txt";
    save_pose(Mat4::Identity(), pose_path.string());
    VoxelGrid fmap;
    fmap.spec.dims = {16, 12, 1};
    fmap.spec.voxel_size = 1.0;
    fmap.feature_dim = 3;
    fmap.density.assign(16 * 12, 0.0);
    fmap.features.assign(16 * 12 * 3, 0.25);
    const auto fmap_path = dir / "feat0.vgrd";
    save_voxel_grid(fmap, fmap_path.string());
    {
        std::ofstream manifest(dir / "frames.txt");
        manifest << "frame0.pnts pose0.txt cam.txt feat0.vgrd\n";
    }
    std::string label_ref;
    for (int threads : {1, 2, 8}) {
        const auto out = dir / ("labels_t" + std::to_string(threads) + ".vgrd");
        const auto result =
            run_cli("label --frames " + (dir / "frames.txt").string() +
                        " --grid-origin -4 -4 0 --grid-dims 16 16 12 --grid-voxel-size 0.5 "
                        "--out " +
                        out.string() + " --threads " + std::to_string(threads),
                    dir);
        ASSERT_EQ(result.exit_code, 0) << result.stdout_text;
        if (threads == 1)
            label_ref = file_bytes(out);
        else
            EXPECT_EQ(file_bytes(out), label_ref);
    }

    // query: classify the pseudo labels against an orthogonal bank.
    TextEmbeddingBank bank;
    bank.num_classes = 3;
    bank.dim = 3;
    bank.embeddings = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    bank.names = {"a", "b", "c"};
    const auto bank_path = dir / "bank.temb";
    save_embedding_bank(bank, bank_path.string());
    const auto qres = run_cli("query --grid " + (dir / "labels_t1.vgrd").string() +
                                  " --classes " + bank_path.string() + " --gt " +
                                  (dir / "labels_t1.vgrd").string() + " --tau 0.5",
                              dir);
    ASSERT_EQ(qres.exit_code, 0) << qres.stdout_text;
    const auto qrec = nlohmann::json::parse(qres.stdout_text);
    EXPECT_DOUBLE_EQ(qrec.at("iou").get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(qrec.at("miou").get<double>(), 1.0);

    // eval: losses of the label grid against itself are zero.
    const auto eres = run_cli("eval --losses --pred-feat " + (dir / "labels_t1.vgrd").string() +
                                  " --target-feat " + (dir / "labels_t1.vgrd").string() +
                                  " --mask " + (dir / "labels_t1.vgrd").string() +
                                  " --weights ablation",
                              dir);
    ASSERT_EQ(eres.exit_code, 0) << eres.stdout_text;
    const auto erec = nlohmann::json::parse(eres.stdout_text);
    EXPECT_NEAR(erec.at("losses").at("feat3d").get<double>(), 0.0, 1e-12);
    EXPECT_NEAR(erec.at("losses").at("total").get<double>(), 0.0, 1e-12);
}

TEST(Cli, ConfigFileDefaultsAndFlagOverride) {
    const auto dir = testutil::temp_dir("cli");
    const auto set_path = write_demo_set(dir, 50);
    {
        std::ofstream cfg(dir / "gsvox.cfg");
        cfg << "[splat]\n";
        cfg << "grid-preset = nuscenes\n";
        cfg << "tau = 1000000.0\n"; // absurd threshold: nothing occupied
    }
    const auto out1 = dir / "cfg1.vgrd";
    const auto r1 = run_cli("--config " + (dir / "gsvox.cfg").string() + " splat --set " +
                                set_path.string() + " --out " + out1.string(),
                            dir);
    ASSERT_EQ(r1.exit_code, 0) << r1.stdout_text;
    const auto rec1 = nlohmann::json::parse(r1.stdout_text);
    EXPECT_EQ(rec1.at("occupied").get<std::size_t>(), 0u);

    // The explicit flag wins over the config value.
    const auto out2 = dir / "cfg2.vgrd";
    const auto r2 = run_cli("--config " + (dir / "gsvox.cfg").string() + " splat --set " +
                                set_path.string() + " --out " + out2.string() + " --tau -1e30",
                            dir);
    ASSERT_EQ(r2.exit_code, 0) << r2.stdout_text;
    const auto rec2 = nlohmann::json::parse(r2.stdout_text);
    EXPECT_EQ(rec2.at("occupied").get<std::size_t>(),
              load_voxel_grid(out2.string()).spec.num_voxels());
}

TEST(Cli, PrettyModeSuppressesJson) {
    const auto dir = testutil::temp_dir("cli");
    const auto set_path = write_demo_set(dir, 20);
    const auto result = run_cli("--pretty bin --set " + set_path.string() +
                                    " --grid-preset nuscenes",
                                dir);
    ASSERT_EQ(result.exit_code, 0);
    EXPECT_EQ(result.stdout_text.find('{'), std::string::npos);
    EXPECT_NE(result.stdout_text.find("pairs"), std::string::npos);
}
