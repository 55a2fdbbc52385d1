// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0
//
// gsvox CLI: bin | splat | render | gradcheck | bench | label | query | eval.
// Machine-readable output is JSON-lines on stdout; human tables go to stderr
// (or to stdout under --pretty, which suppresses the JSON). Exit codes:
// 0 success, 1 validation/I-O error, 2 check failure, 64 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include "gsvox/gsvox.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OutputMode {
    bool pretty = false;

    void emit(const json& record, const std::string& table) const {
        if (pretty) {
            std::cout << table;
        } else {
            std::cout << record.dump() << "\n";
            if (!table.empty())
                std::cerr << table;
        }
    }
};

std::string hex64(std::uint64_t h) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Grid selection shared by the grid-consuming subcommands.
struct GridOptions {
    std::string preset;
    std::vector<double> origin;
    std::vector<int> dims;
    double voxel_size = 0.0;
    std::vector<int> tile_dims;

    void attach(CLI::App* cmd) {
        cmd->add_option("--grid-preset", preset, "Grid preset: nuscenes | custom");
        cmd->add_option("--grid-origin", origin, "Grid min corner (3 floats)")->expected(3);
        cmd->add_option("--grid-dims", dims, "Grid dims nx ny nz")->expected(3);
        cmd->add_option("--grid-voxel-size", voxel_size, "Voxel edge length (m)");
        cmd->add_option("--tile-dims", tile_dims, "Tile dims (default 4 4 4)")->expected(3);
    }

    gsvox::VoxelGridSpec resolve() const {
        gsvox::VoxelGridSpec spec;
        if (!preset.empty()) {
            spec = gsvox::grid_preset(preset);
        } else {
            if (origin.size() != 3 || dims.size() != 3 || !(voxel_size > 0.0))
                throw gsvox::ValidationError(
                    "grid: give --grid-preset or all of --grid-origin/--grid-dims/--grid-voxel-size");
            spec.origin = gsvox::Vec3(origin[0], origin[1], origin[2]);
            spec.dims = {dims[0], dims[1], dims[2]};
            spec.voxel_size = voxel_size;
        }
        if (tile_dims.size() == 3)
            spec.tile_dims = {tile_dims[0], tile_dims[1], tile_dims[2]};
        gsvox::validate_grid_spec(spec);
        return spec;
    }

    gsvox::VoxelGridSpec resolve_bev() const {
        gsvox::VoxelGridSpec spec = resolve();
        spec.dims[2] = 1;
        spec.tile_dims[2] = 1;
        return spec;
    }
};

gsvox::OccupancyHeadConfig head_from_flags(const std::string& mode, double tau, double a,
                                           double b) {
    gsvox::OccupancyHeadConfig head;
    head.tau = tau;
    head.a = a;
    head.b = b;
    if (mode == "identity")
        head.mode = gsvox::OccupancyHeadConfig::Mode::identity;
    else if (mode == "logistic")
        head.mode = gsvox::OccupancyHeadConfig::Mode::affine_logistic;
    else
        throw gsvox::ValidationError("unknown occupancy head '" + mode +
                                     "' (expected identity|logistic)");
    return head;
}

std::uint64_t hash_grid(const gsvox::VoxelGrid& grid) {
    std::uint64_t h = gsvox::hash_doubles(grid.density);
    h = gsvox::hash_doubles(grid.features, h);
    if (!grid.occupancy.empty())
        h = gsvox::fnv1a64(grid.occupancy.data(), grid.occupancy.size(), h);
    return h;
}

// ---- bin ----

int cmd_bin(const std::string& set_path, const GridOptions& grid_opts, double radius_sigmas,
            int threads, const std::string& dump_path, const OutputMode& out) {
    const auto set = gsvox::load_gaussian_set(set_path);
    const auto spec = grid_opts.resolve();
    const auto csr = gsvox::build_dual_csr(set, spec, radius_sigmas, threads);
    if (!dump_path.empty())
        gsvox::dump_dual_csr(csr, dump_path);
    std::uint64_t h = gsvox::fnv1a64(csr.g2t_indices.data(),
                                     csr.g2t_indices.size() * sizeof(std::uint32_t));
    h = gsvox::fnv1a64(csr.t2g_indices.data(), csr.t2g_indices.size() * sizeof(std::uint32_t), h);
    json rec{{"cmd", "bin"},
             {"gaussians", set.count},
             {"tiles", spec.num_tiles()},
             {"pairs", csr.pair_count},
             {"csr_hash", hex64(h)}};
    std::ostringstream table;
    table << "bin: " << set.count << " gaussians x " << spec.num_tiles() << " tiles -> "
          << csr.pair_count << " pairs\n";
    out.emit(rec, table.str());
    return 0;
}

// ---- splat ----

int cmd_splat(const std::string& set_path, const GridOptions& grid_opts, const std::string& out_path,
              bool bev, const gsvox::OccupancyHeadConfig& head, double radius_sigmas, int threads,
              const OutputMode& out) {
    const auto set = gsvox::load_gaussian_set(set_path);
    gsvox::SplatOutput splat;
    gsvox::VoxelGridSpec spec;
    if (bev) {
        spec = grid_opts.resolve_bev();
        splat = gsvox::splat_bev_forward(set, spec, radius_sigmas, threads);
    } else {
        spec = grid_opts.resolve();
        const auto covs = gsvox::build_covariances(set, threads);
        const auto csr = gsvox::build_dual_csr(set, covs, spec, radius_sigmas, threads);
        splat = gsvox::splat_forward(set, covs, csr, spec, threads);
    }
    splat.grid.occupancy = gsvox::occupancy_mask(splat.grid, head);
    gsvox::save_voxel_grid(splat.grid, out_path);
    std::size_t occupied = 0;
    for (auto m : splat.grid.occupancy)
        occupied += m;
    json rec{{"cmd", "splat"},          {"bev", bev},
             {"voxels", splat.grid.density.size()}, {"occupied", occupied},
             {"out", out_path},         {"grid_hash", hex64(hash_grid(splat.grid))}};
    std::ostringstream table;
    table << "splat: " << splat.grid.density.size() << " voxels, " << occupied
          << " occupied -> " << out_path << "\n";
    out.emit(rec, table.str());
    return 0;
}

// ---- render ----

int cmd_render(const std::string& set_path, const std::string& camera_path,
               const std::string& out_features, const std::string& out_depth,
               const std::string& out_preview, double max_depth, int threads,
               const OutputMode& out) {
    const auto set = gsvox::load_gaussian_set(set_path);
    const auto cam = gsvox::load_camera(camera_path);
    const auto target = gsvox::render(set, cam, threads);

    // Feature map as a 2D VGRD container: dims (W, H, 1), density = alpha_sum.
    gsvox::VoxelGrid grid;
    grid.spec.origin = gsvox::Vec3::Zero();
    grid.spec.dims = {target.width, target.height, 1};
    grid.spec.voxel_size = 1.0;
    grid.spec.tile_dims = {4, 4, 1};
    grid.feature_dim = target.feature_dim;
    grid.density = target.alpha_sum;
    grid.features = target.features;
    if (!out_features.empty())
        gsvox::save_voxel_grid(grid, out_features);
    if (!out_depth.empty())
        gsvox::save_pgm16(target.depth, target.width, target.height, max_depth, out_depth);
    if (!out_preview.empty())
        gsvox::save_ppm_feature_preview(target.features, target.width, target.height,
                                        target.feature_dim, out_preview);
    json rec{{"cmd", "render"},
             {"width", target.width},
             {"height", target.height},
             {"feature_dim", target.feature_dim},
             {"features_hash", hex64(gsvox::hash_doubles(target.features))},
             {"depth_hash", hex64(gsvox::hash_doubles(target.depth))}};
    std::ostringstream table;
    table << "render: " << target.width << "x" << target.height << "x" << target.feature_dim
          << "\n";
    out.emit(rec, table.str());
    return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(std::uint64_t seed, int n_configs, double step, std::size_t max_gaussians,
                  int threads, const OutputMode& out) {
    std::mt19937_64 seeder(seed);
    gsvox::GradCheckReport total;
    int configs_run = 0;

    auto merge = [&total](const gsvox::GradCheckReport& r) {
        for (int k = 0; k < 4; ++k) {
            total.max_rel_err[k] = std::max(total.max_rel_err[k], r.max_rel_err[k]);
            total.checked[k] += r.checked[k];
        }
        total.skipped_unstable_pairing += r.skipped_unstable_pairing;
        total.failures += r.failures;
    };

    for (int i = 0; i < n_configs; ++i) {
        const std::uint64_t s = seeder();
        std::mt19937_64 rng(s);
        gsvox::VoxelGridSpec spec;
        const int d = 6 + static_cast<int>(rng() % 11); // 6..16 per axis
        spec.dims = {d, d, std::max(4, d / 2)};
        spec.origin = gsvox::Vec3(-0.5 * d, -0.5 * d, -0.25 * d);
        spec.voxel_size = 1.0;
        gsvox::SceneConfig scene;
        scene.count = 5 + rng() % 96; // 5..100
        scene.feature_dim = 1 + static_cast<int>(rng() % 8);
        scene.scale_min = 0.4;
        scene.scale_max = 1.2;
        scene.outside_fraction = (i % 4 == 0) ? 0.2 : 0.0;
        scene.seed = s ^ 0x5bd1e995u;
        const auto set = gsvox::random_gaussian_set(spec, scene);
        const auto upstream = gsvox::random_upstream(
            spec.num_voxels() * static_cast<std::size_t>(scene.feature_dim), s ^ 0x2545f491u);
        gsvox::GradCheckConfig cfg;
        cfg.step = step;
        cfg.opacity_step = step;
        cfg.max_gaussians = max_gaussians;
        cfg.num_threads = threads;
        merge(gsvox::gradcheck_scene(set, spec, upstream, 3.0, cfg));
        ++configs_run;
    }

    // Dedicated ε-branch scenes: opacities so small that every voxel stays in
    // the F_v ≤ ε regime. The opacity step shrinks with the opacities so the
    // perturbation cannot cross the branch.
    for (int i = 0; i < std::max(1, n_configs / 10); ++i) {
        const std::uint64_t s = seeder();
        gsvox::VoxelGridSpec spec;
        spec.dims = {8, 8, 8};
        spec.origin = gsvox::Vec3(-4, -4, -4);
        spec.voxel_size = 1.0;
        gsvox::SceneConfig scene;
        scene.count = 20;
        scene.feature_dim = 4;
        scene.scale_min = 0.5;
        scene.scale_max = 1.5;
        scene.opacity_min = 1e-9;
        scene.opacity_max = 1e-8;
        scene.seed = s;
        const auto set = gsvox::random_gaussian_set(spec, scene);
        const auto upstream = gsvox::random_upstream(spec.num_voxels() * 4, s ^ 0x9e3779b9u);
        gsvox::GradCheckConfig cfg;
        cfg.step = step;
        cfg.opacity_step = 1e-10;
        cfg.max_gaussians = max_gaussians;
        cfg.num_threads = threads;
        merge(gsvox::gradcheck_scene(set, spec, upstream, 3.0, cfg));
        ++configs_run;
    }

    std::ostringstream table;
    table << "gradcheck: " << configs_run << " configs, seed " << seed << "\n";
    table << std::left << std::setw(12) << "parameter" << std::setw(14) << "checked"
          << std::setw(16) << "max rel err" << "\n";
    for (int k = 0; k < 4; ++k)
        table << std::left << std::setw(12) << gsvox::GradCheckReport::kind_name(k)
              << std::setw(14) << total.checked[k] << std::scientific << std::setprecision(3)
              << total.max_rel_err[k] << std::defaultfloat << "\n";
    table << "skipped (pairing unstable): " << total.skipped_unstable_pairing << "\n";
    table << (total.passed() ? "PASS" : "FAIL") << "\n";

    json rec{{"cmd", "gradcheck"},
             {"seed", seed},
             {"configs", configs_run},
             {"checked",
              {{"mean", total.checked[0]},
               {"opacity", total.checked[1]},
               {"feature", total.checked[2]},
               {"covariance", total.checked[3]}}},
             {"max_rel_err",
              {{"mean", total.max_rel_err[0]},
               {"opacity", total.max_rel_err[1]},
               {"feature", total.max_rel_err[2]},
               {"covariance", total.max_rel_err[3]}}},
             {"skipped_unstable", total.skipped_unstable_pairing},
             {"failures", total.failures},
             {"passed", total.passed()}};
    out.emit(rec, table.str());
    if (!total.passed())
        throw CheckFailure("gradcheck: " + std::to_string(total.failures) +
                           " gradient entries out of tolerance");
    return 0;
}

// ---- bench ----

int cmd_bench(std::size_t gaussians, int feature_dim, const GridOptions& grid_opts, int reps,
              std::uint64_t seed, double radius_sigmas, int threads, const OutputMode& out) {
    if (gaussians == 0 || reps < 1)
        throw gsvox::ValidationError("bench: gaussians and reps must be positive");
    const auto spec = grid_opts.resolve();
    gsvox::SceneConfig scene;
    scene.count = gaussians;
    scene.feature_dim = feature_dim;
    scene.outside_fraction = 0.05;
    scene.seed = seed;
    const auto set = gsvox::random_gaussian_set(spec, scene);
    const auto covs = gsvox::build_covariances(set, threads);
    const std::size_t nv = spec.num_voxels();
    const auto upstream = gsvox::random_upstream(nv * static_cast<std::size_t>(feature_dim),
                                                 seed ^ 0x6a09e667f3bcc908ull);

    auto t0 = std::chrono::steady_clock::now();
    const auto csr = gsvox::build_dual_csr(set, covs, spec, radius_sigmas, threads);
    const double bin_s = seconds_since(t0);

    std::vector<double> fw_csr_s, fw_naive_s, bw_csr_s, bw_naive_s;
    gsvox::SplatOutput out_csr, out_naive;
    gsvox::GradientBuffers grad_csr, grad_naive;
    for (int r = 0; r < reps; ++r) {
        t0 = std::chrono::steady_clock::now();
        out_csr = gsvox::splat_forward(set, covs, csr, spec, threads);
        fw_csr_s.push_back(seconds_since(t0));

        t0 = std::chrono::steady_clock::now();
        out_naive = gsvox::splat_forward_naive(set, covs, spec, radius_sigmas, threads);
        fw_naive_s.push_back(seconds_since(t0));

        t0 = std::chrono::steady_clock::now();
        grad_csr = gsvox::splat_backward(set, covs, csr, spec, out_csr, upstream, threads);
        bw_csr_s.push_back(seconds_since(t0));

        t0 = std::chrono::steady_clock::now();
        grad_naive = gsvox::splat_backward_naive(set, covs, spec, out_naive, upstream,
                                                 radius_sigmas, threads);
        bw_naive_s.push_back(seconds_since(t0));
    }

    // Equivalence gate: never report timings for disagreeing paths.
    double fw_max_rel = 0.0;
    for (std::size_t v = 0; v < nv; ++v) {
        const double d = std::abs(out_csr.grid.density[v] - out_naive.grid.density[v]);
        const double ref = std::max(std::abs(out_naive.grid.density[v]), 1e-300);
        fw_max_rel = std::max(fw_max_rel, d / ref);
    }
    for (std::size_t i = 0; i < out_csr.grid.features.size(); ++i) {
        const double d = std::abs(out_csr.grid.features[i] - out_naive.grid.features[i]);
        const double ref = std::max({std::abs(out_naive.grid.features[i]),
                                     std::abs(out_csr.grid.features[i]), 1e-12});
        fw_max_rel = std::max(fw_max_rel, d / ref);
    }
    // Backward sums run in different orders (tile-major vs global voxel
    // order), so per-entry relative error is unbounded under cancellation;
    // compare against each buffer's dynamic range instead.
    double bw_max_rel = 0.0;
    auto diff_buffers = [&bw_max_rel](const std::vector<double>& a, const std::vector<double>& b) {
        double scale = 1e-300, max_abs = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
            max_abs = std::max(max_abs, std::abs(a[i] - b[i]));
        }
        bw_max_rel = std::max(bw_max_rel, max_abs / scale);
    };
    diff_buffers(grad_csr.d_mean, grad_naive.d_mean);
    diff_buffers(grad_csr.d_cov, grad_naive.d_cov);
    diff_buffers(grad_csr.d_opacity, grad_naive.d_opacity);
    diff_buffers(grad_csr.d_feature, grad_naive.d_feature);
    const bool agree_fw = fw_max_rel <= 1e-12;
    const bool agree_bw = bw_max_rel <= 1e-10;

    const double working_set_mb =
        (set.features.size() + set.means.size() + set.quats.size() + set.scales.size() +
         set.opacities.size() + 2.0 * (out_csr.grid.density.size() + out_csr.grid.features.size() +
                                       out_csr.denominators.size()) +
         upstream.size() + 2.0 * (grad_csr.d_mean.size() + grad_csr.d_cov.size() +
                                  grad_csr.d_opacity.size() + grad_csr.d_feature.size())) *
            8.0 / (1024.0 * 1024.0) +
        (csr.g2t_indices.size() + csr.t2g_indices.size()) * 4.0 / (1024.0 * 1024.0);

    std::uint64_t grad_hash = gsvox::hash_doubles(grad_csr.d_mean);
    grad_hash = gsvox::hash_doubles(grad_csr.d_cov, grad_hash);
    grad_hash = gsvox::hash_doubles(grad_csr.d_opacity, grad_hash);
    grad_hash = gsvox::hash_doubles(grad_csr.d_feature, grad_hash);

    json rec{{"cmd", "bench"},
             {"gaussians", gaussians},
             {"feature_dim", feature_dim},
             {"voxels", nv},
             {"tiles", spec.num_tiles()},
             {"pairs", csr.pair_count},
             {"reps", reps},
             {"threads", gsvox::resolve_threads(threads)},
             {"scene_hash", hex64(gsvox::hash_gaussian_set(set))},
             {"agree_fw", agree_fw},
             {"agree_bw", agree_bw},
             {"fw_max_rel", fw_max_rel},
             {"bw_max_rel", bw_max_rel},
             {"bin_s", bin_s},
             {"fw_csr_s", median(fw_csr_s)},
             {"fw_naive_s", median(fw_naive_s)},
             {"bw_csr_s", median(bw_csr_s)},
             {"bw_naive_s", median(bw_naive_s)},
             {"speedup_fw", median(fw_naive_s) / median(fw_csr_s)},
             {"speedup_bw", median(bw_naive_s) / median(bw_csr_s)},
             {"working_set_mb", working_set_mb},
             {"grid_hash", hex64(hash_grid(out_csr.grid))},
             {"grad_hash", hex64(grad_hash)}};

    std::ostringstream table;
    table << "bench: " << gaussians << " gaussians, C=" << feature_dim << ", " << nv
          << " voxels, " << csr.pair_count << " pairs, threads="
          << gsvox::resolve_threads(threads) << "\n";
    table << "  forward:  csr " << median(fw_csr_s) << " s | naive " << median(fw_naive_s)
          << " s | speedup " << median(fw_naive_s) / median(fw_csr_s) << "x\n";
    table << "  backward: csr " << median(bw_csr_s) << " s | naive " << median(bw_naive_s)
          << " s | speedup " << median(bw_naive_s) / median(bw_csr_s) << "x\n";
    table << "  working set ~" << working_set_mb << " MB\n";

    if (!agree_fw || !agree_bw) {
        // Never publish timings for disagreeing paths.
        for (const char* key : {"bin_s", "fw_csr_s", "fw_naive_s", "bw_csr_s", "bw_naive_s",
                                "speedup_fw", "speedup_bw"})
            rec.erase(key);
        std::ostringstream diff;
        diff << std::scientific << "bench: path disagreement (fw_max_rel=" << fw_max_rel
             << ", bw_max_rel=" << bw_max_rel << "); timings withheld";
        out.emit(rec, diff.str() + "\n");
        throw CheckFailure(diff.str());
    }
    out.emit(rec, table.str());
    return 0;
}

// ---- label ----

gsvox::FeatureMap feature_map_from_grid(const gsvox::VoxelGrid& grid) {
    if (!grid.has_features() || grid.spec.dims[2] != 1)
        throw gsvox::ValidationError("feature map container must be a 2D VGRD with features");
    gsvox::FeatureMap fm;
    fm.width = grid.spec.dims[0];
    fm.height = grid.spec.dims[1];
    fm.channels = grid.feature_dim;
    fm.data = grid.features;
    return fm;
}

int cmd_label(const std::string& manifest_path, const GridOptions& grid_opts,
              const std::string& out_path, const std::string& out_vis_path, bool nearest,
              const std::string& aggregate, int keyframe_stride, int threads,
              const OutputMode& out) {
    if (keyframe_stride < 1)
        throw gsvox::ValidationError("label: --keyframe-stride must be >= 1");
    gsvox::FeatureAggregation aggregation;
    if (aggregate == "mean")
        aggregation = gsvox::FeatureAggregation::mean;
    else if (aggregate == "majority")
        aggregation = gsvox::FeatureAggregation::majority_vote;
    else
        throw gsvox::ValidationError("label: --aggregate must be mean|majority");
    std::ifstream manifest(manifest_path);
    if (!manifest)
        throw gsvox::IoError(manifest_path + ": cannot open for reading");
    const fs::path base = fs::path(manifest_path).parent_path();

    std::vector<gsvox::LabelFrame> frames;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::string pnts, pose, camera, feat;
        if (!(ls >> pnts))
            continue;
        if (!(ls >> pose >> camera >> feat))
            throw gsvox::IoError(manifest_path + ": manifest line " + std::to_string(line_no) +
                                 " needs `points pose camera features`");
        if (line_no++ % keyframe_stride != 0)
            continue;
        auto resolve = [&base](const std::string& p) {
            const fs::path fp(p);
            return fp.is_absolute() ? fp.string() : (base / fp).string();
        };
        gsvox::LabelFrame frame;
        const auto cloud = gsvox::load_point_cloud(resolve(pnts));
        frame.points = cloud.xyz;
        frame.pose = gsvox::load_pose(resolve(pose));
        frame.camera = gsvox::load_camera(resolve(camera));
        frame.feature_map = feature_map_from_grid(gsvox::load_voxel_grid(resolve(feat)));
        frames.push_back(std::move(frame));
    }
    if (frames.empty())
        throw gsvox::ValidationError(manifest_path + ": no frames selected");

    std::vector<gsvox::DecoratedPoints> decorations(frames.size());
    gsvox::parallel_for(frames.size(), threads, [&](std::size_t f) {
        decorations[f] = gsvox::decorate_points(frames[f], nearest);
    });
    const auto cloud = gsvox::aggregate_frames(frames, decorations);
    const auto spec = grid_opts.resolve();
    auto grid = gsvox::voxelize_labels(cloud, spec, aggregation);

    // Visibility from the frame cameras posed in the world frame.
    std::vector<gsvox::CameraModel> world_cams;
    world_cams.reserve(frames.size());
    for (const auto& f : frames) {
        gsvox::CameraModel cam = f.camera;
        cam.extrinsics = f.camera.extrinsics * f.pose.inverse();
        world_cams.push_back(cam);
    }
    grid.visibility = gsvox::compute_visibility_grid(spec, world_cams, threads);

    const auto vgrd = gsvox::pseudo_label_to_voxel_grid(grid);
    gsvox::save_voxel_grid(vgrd, out_path);
    if (!out_vis_path.empty()) {
        gsvox::VoxelGrid vis;
        vis.spec = spec;
        vis.feature_dim = 0;
        vis.density.assign(spec.num_voxels(), 0.0);
        vis.occupancy = grid.visibility;
        gsvox::save_voxel_grid(vis, out_vis_path);
    }

    std::size_t occupied = 0;
    for (auto o : grid.occupancy)
        occupied += o;
    json rec{{"cmd", "label"},
             {"frames", frames.size()},
             {"aggregated_points", cloud.count()},
             {"dropped_points", grid.dropped_points},
             {"occupied", occupied},
             {"out", out_path},
             {"grid_hash", hex64(hash_grid(vgrd))}};
    std::ostringstream table;
    table << "label: " << frames.size() << " frames -> " << cloud.count() << " points, "
          << occupied << " occupied voxels (" << grid.dropped_points << " dropped) -> "
          << out_path << "\n";
    out.emit(rec, table.str());
    return 0;
}

// ---- query ----

int cmd_query(const std::string& grid_path, const std::string& classes_path,
              const std::string& gt_path, const gsvox::OccupancyHeadConfig& head,
              double temperature, bool all_classes, const OutputMode& out) {
    const auto grid = gsvox::load_voxel_grid(grid_path);
    const auto bank = gsvox::load_embedding_bank(classes_path);
    const auto pred = gsvox::classify_grid(grid, bank, head, temperature);

    json rec{{"cmd", "query"}, {"grid", grid_path}, {"classes", bank.num_classes}};
    std::ostringstream table;
    std::vector<std::size_t> histogram(bank.num_classes, 0);
    for (auto c : pred.class_id)
        if (c >= 0)
            histogram[c]++;
    json hist = json::object();
    for (int c = 0; c < bank.num_classes; ++c)
        hist[bank.names[c]] = histogram[c];
    rec["occupied"] = pred.occupied();
    rec["histogram"] = hist;

    if (!gt_path.empty()) {
        const auto gt_grid = gsvox::load_voxel_grid(gt_path);
        gsvox::SemanticGrid gt;
        if (gt_grid.has_features()) {
            // Classify ground truth with the same bank; occupancy comes from
            // its stored mask when present, else the same head.
            gsvox::OccupancyHeadConfig gt_head = head;
            gt = gsvox::classify_grid(gt_grid, bank, gt_head, temperature);
            if (gt_grid.has_occupancy())
                for (std::size_t v = 0; v < gt_grid.occupancy.size(); ++v)
                    if (!gt_grid.occupancy[v])
                        gt.class_id[v] = -1;
        } else {
            throw gsvox::ValidationError("query: ground-truth grid needs features to classify");
        }
        const auto report = gsvox::iou_miou(pred, gt, {}, all_classes);
        rec["iou"] = report.binary_iou;
        rec["miou"] = report.miou;
        json per = json::object();
        for (int c = 0; c < bank.num_classes; ++c)
            if (!std::isnan(report.per_class[c]))
                per[bank.names[c]] = report.per_class[c];
        rec["per_class_iou"] = per;

        table << std::left << std::setw(20) << "class" << "IoU\n";
        for (int c = 0; c < bank.num_classes; ++c) {
            table << std::left << std::setw(20) << bank.names[c];
            if (std::isnan(report.per_class[c]))
                table << "-\n";
            else
                table << std::fixed << std::setprecision(4) << report.per_class[c]
                      << std::defaultfloat << "\n";
        }
        table << std::left << std::setw(20) << "IoU (binary)" << std::fixed
              << std::setprecision(4) << report.binary_iou << "\n";
        table << std::left << std::setw(20) << "mIoU" << report.miou << std::defaultfloat << "\n";
    } else {
        table << "query: " << pred.occupied() << " occupied voxels classified over "
              << bank.num_classes << " classes\n";
    }
    out.emit(rec, table.str());
    return 0;
}

// ---- eval ----

std::vector<gsvox::Vec2> load_trajectory(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw gsvox::IoError(path + ": cannot open for reading");
    std::vector<gsvox::Vec2> traj;
    double x, y;
    while (in >> x >> y)
        traj.emplace_back(x, y);
    return traj;
}

int cmd_eval(const std::string& pred_feat, const std::string& target_feat,
             const std::string& pred_depth, const std::string& target_depth,
             const std::string& logits_path, const std::string& labels_path,
             const std::string& mask_path, const std::string& weights_preset, double silog_lambda,
             const std::string& pred_traj, const std::string& gt_traj,
             const std::string& obstacles_path, double ego_length, double ego_width,
             const OutputMode& out) {
    json rec{{"cmd", "eval"}};
    std::ostringstream table;

    const bool losses_requested = !pred_feat.empty() || !pred_depth.empty() || !logits_path.empty();
    if (losses_requested) {
        gsvox::LossReport report;
        report.weights = gsvox::LossWeights::preset(weights_preset);
        std::vector<std::uint8_t> mask;
        if (!mask_path.empty())
            mask = gsvox::load_voxel_grid(mask_path).occupancy;

        auto mask_for = [&mask](std::size_t n) {
            if (mask.empty())
                return std::vector<std::uint8_t>(n, 1);
            if (mask.size() != n)
                throw gsvox::ValidationError("eval: mask length mismatch");
            return mask;
        };

        if (!pred_feat.empty()) {
            const auto a = gsvox::load_voxel_grid(pred_feat);
            const auto b = gsvox::load_voxel_grid(target_feat);
            if (a.feature_dim != b.feature_dim || a.features.size() != b.features.size())
                throw gsvox::ValidationError("eval: feature grids have mismatched shapes");
            const auto m = mask_for(a.density.size());
            const auto feat = gsvox::cosine_feature_loss(a.features, b.features, a.feature_dim, m);
            const bool is_bev = a.spec.dims[2] == 1;
            (is_bev ? report.feat2d : report.feat3d) = feat.value;
            rec["feature_excluded_rows"] = feat.excluded_rows;
        }
        if (!pred_depth.empty()) {
            const auto a = gsvox::load_voxel_grid(pred_depth);
            const auto b = gsvox::load_voxel_grid(target_depth);
            if (a.density.size() != b.density.size())
                throw gsvox::ValidationError("eval: depth grids have mismatched shapes");
            const auto m = mask_for(a.density.size());
            report.depth2d = gsvox::l1_depth_loss(a.density, b.density, m).value;
            report.silog2d = gsvox::silog_depth_loss(a.density, b.density, m, silog_lambda).value;
        }
        if (!logits_path.empty()) {
            const auto l = gsvox::load_voxel_grid(logits_path);
            const auto lab = gsvox::load_voxel_grid(labels_path);
            if (!lab.has_occupancy() || lab.occupancy.size() != l.density.size())
                throw gsvox::ValidationError("eval: labels grid needs matching occupancy");
            report.bce3d = gsvox::bce_occupancy_loss(l.density, lab.occupancy).value;
        }
        rec["losses"] = {{"feat2d", report.feat2d},   {"depth2d", report.depth2d},
                         {"silog2d", report.silog2d}, {"bce3d", report.bce3d},
                         {"feat3d", report.feat3d},   {"total", report.total()},
                         {"weights", weights_preset}};
        table << "losses (" << weights_preset << "): feat2d=" << report.feat2d
              << " depth2d=" << report.depth2d << " silog2d=" << report.silog2d
              << " bce3d=" << report.bce3d << " feat3d=" << report.feat3d
              << " total=" << report.total() << "\n";
    }

    if (!pred_traj.empty()) {
        const auto pred = load_trajectory(pred_traj);
        const auto gt = load_trajectory(gt_traj);
        const auto obstacles = gsvox::load_voxel_grid(obstacles_path);
        gsvox::EgoFootprint footprint{ego_length, ego_width};
        const auto metrics = gsvox::trajectory_metrics(pred, gt, obstacles, footprint);
        rec["trajectory"] = {{"l2_per_horizon", metrics.l2_per_horizon},
                             {"l2_avg", metrics.l2_avg},
                             {"collision_rate", metrics.collision_rate},
                             {"off_grid_waypoints", metrics.off_grid_waypoints}};
        table << "trajectory: L2 avg=" << metrics.l2_avg << " CR=" << metrics.collision_rate
              << " off-grid=" << metrics.off_grid_waypoints << "\n";
    }

    if (!losses_requested && pred_traj.empty())
        throw gsvox::ValidationError("eval: nothing to evaluate (use loss or trajectory flags)");
    out.emit(rec, table.str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gsvox: Gaussian-to-voxel splatting toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Flat key = value config file; flags override");
    OutputMode out;
    app.add_flag("--pretty", out.pretty, "Human-readable output on stdout instead of JSON lines");

    // bin
    auto* bin = app.add_subcommand("bin", "Build and dump the dual-CSR Gaussian/tile index");
    std::string bin_set, bin_dump;
    GridOptions bin_grid;
    double bin_radius = 3.0;
    int bin_threads = 0;
    bin->add_option("--set", bin_set, "Gaussian set (GSET)")->required();
    bin_grid.attach(bin);
    bin->add_option("--radius-sigmas", bin_radius, "Support cutoff in sigmas (default 3)");
    bin->add_option("--threads", bin_threads, "Worker threads (0: GSV_THREADS or hardware)");
    bin->add_option("--dump", bin_dump, "Write indptr/indices arrays, one per line");

    // splat
    auto* splat = app.add_subcommand("splat", "Splat Gaussians into a voxel or BEV grid");
    std::string splat_set, splat_out;
    GridOptions splat_grid;
    bool splat_bev = false;
    std::string splat_head = "identity";
    double splat_tau = 0.3, splat_a = 1.0, splat_b = 1.0, splat_radius = 3.0;
    int splat_threads = 0;
    splat->add_option("--set", splat_set, "Gaussian set (GSET)")->required();
    splat_grid.attach(splat);
    splat->add_option("--out", splat_out, "Output VGRD path")->required();
    splat->add_flag("--bev", splat_bev, "2D bird's-eye-view splat (marginalized over z)");
    splat->add_option("--head", splat_head, "Occupancy head: identity | logistic");
    splat->add_option("--tau", splat_tau, "Occupancy threshold (default 0.3)");
    splat->add_option("--head-a", splat_a, "Logistic head scale");
    splat->add_option("--head-b", splat_b, "Logistic head rate");
    splat->add_option("--radius-sigmas", splat_radius, "Support cutoff in sigmas");
    splat->add_option("--threads", splat_threads, "Worker threads");

    // render
    auto* render = app.add_subcommand("render", "Alpha-blend Gaussians into a camera view");
    std::string render_set, render_cam, render_feat, render_depth, render_preview;
    double render_max_depth = 100.0;
    int render_threads = 0;
    render->add_option("--set", render_set, "Gaussian set (GSET)")->required();
    render->add_option("--camera", render_cam, "Camera text file")->required();
    render->add_option("--out-features", render_feat, "Feature map as 2D VGRD");
    render->add_option("--out-depth", render_depth, "Depth map as 16-bit PGM");
    render->add_option("--out-preview", render_preview, "First-3-channel PPM preview");
    render->add_option("--max-depth", render_max_depth, "PGM depth scale (meters at 65535)");
    render->add_option("--threads", render_threads, "Worker threads");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the backward");
    std::uint64_t gc_seed = 7;
    int gc_n = 50, gc_threads = 0;
    double gc_step = 1e-5;
    std::size_t gc_max_gaussians = 8;
    gradcheck->add_option("--seed", gc_seed, "Seed for the config generator");
    gradcheck->add_option("--n", gc_n, "Number of random configurations");
    gradcheck->add_option("--step", gc_step, "Central-difference step (default 1e-5)");
    gradcheck->add_option("--max-gaussians", gc_max_gaussians, "Gaussians FD-checked per scene");
    gradcheck->add_option("--threads", gc_threads, "Worker threads");

    // bench
    auto* bench = app.add_subcommand("bench", "Naive-vs-CSR benchmark with equivalence gate");
    std::size_t bench_gaussians = 18000;
    int bench_dim = 128, bench_reps = 3, bench_threads = 0;
    std::uint64_t bench_seed = 1;
    double bench_radius = 3.0;
    GridOptions bench_grid;
    bench->add_option("--gaussians", bench_gaussians, "Gaussian count (default 18000)");
    bench->add_option("--feature-dim", bench_dim, "Feature dimension (default 128)");
    bench_grid.attach(bench);
    bench->add_option("--reps", bench_reps, "Repetitions per path (median reported)");
    bench->add_option("--seed", bench_seed, "Scene seed");
    bench->add_option("--radius-sigmas", bench_radius, "Support cutoff in sigmas");
    bench->add_option("--threads", bench_threads, "Worker threads");

    // label
    auto* label = app.add_subcommand("label", "Geometric pseudo-labeling from posed frames");
    std::string label_manifest, label_out, label_vis;
    std::string label_aggregate = "mean";
    GridOptions label_grid;
    bool label_nearest = false;
    int label_stride = 1, label_threads = 0;
    label->add_option("--frames", label_manifest,
                      "Manifest: lines `points.pnts pose.txt camera.txt features.vgrd`")
        ->required();
    label_grid.attach(label);
    label->add_option("--out", label_out, "Output pseudo-label VGRD")->required();
    label->add_option("--out-vis", label_vis, "Optional visibility grid VGRD");
    label->add_flag("--nearest", label_nearest, "Nearest-neighbor feature sampling");
    label->add_option("--aggregate", label_aggregate,
                      "Per-voxel feature reduction: mean | majority");
    label->add_option("--keyframe-stride", label_stride, "Use every k-th manifest line");
    label->add_option("--threads", label_threads, "Worker threads");

    // query
    auto* query = app.add_subcommand("query", "Zero-shot semantic occupancy querying");
    std::string query_grid, query_classes, query_gt;
    std::string query_head = "identity";
    double query_tau = 0.3, query_a = 1.0, query_b = 1.0, query_temp = 1.0;
    bool query_all_classes = false;
    query->add_option("--grid", query_grid, "Feature grid (VGRD) to classify")->required();
    query->add_option("--classes", query_classes, "Text embedding bank (TEMB)")->required();
    query->add_option("--gt", query_gt, "Ground-truth feature grid (VGRD) for IoU scoring");
    query->add_option("--head", query_head, "Occupancy head: identity | logistic");
    query->add_option("--tau", query_tau, "Occupancy threshold");
    query->add_option("--head-a", query_a, "Logistic head scale");
    query->add_option("--head-b", query_b, "Logistic head rate");
    query->add_option("--temperature", query_temp, "Softmax temperature");
    query->add_flag("--all-classes", query_all_classes, "Average mIoU over all classes");

    // eval
    auto* eval = app.add_subcommand("eval", "Loss suite and trajectory metrics");
    std::string ev_pred_feat, ev_tgt_feat, ev_pred_depth, ev_tgt_depth, ev_logits, ev_labels,
        ev_mask;
    std::string ev_weights = "unit";
    double ev_lambda = 0.85;
    std::string ev_pred_traj, ev_gt_traj, ev_obstacles;
    double ev_ego_length = 4.1, ev_ego_width = 1.7;
    bool ev_losses = false;
    eval->add_flag("--losses", ev_losses, "Evaluate the loss suite (kept for scripts)");
    eval->add_option("--pred-feat", ev_pred_feat, "Predicted feature grid (VGRD)");
    eval->add_option("--target-feat", ev_tgt_feat, "Target feature grid (VGRD)");
    eval->add_option("--pred-depth", ev_pred_depth, "Predicted depth (VGRD density)");
    eval->add_option("--target-depth", ev_tgt_depth, "Target depth (VGRD density)");
    eval->add_option("--logits", ev_logits, "Occupancy logits (VGRD density)");
    eval->add_option("--labels", ev_labels, "Occupancy labels (VGRD occupancy)");
    eval->add_option("--mask", ev_mask, "Mask grid (VGRD occupancy)");
    eval->add_option("--weights", ev_weights, "Loss weights: unit | ablation");
    eval->add_option("--silog-lambda", ev_lambda, "SILog lambda (default 0.85)");
    eval->add_option("--pred-traj", ev_pred_traj, "Predicted trajectory (x y per line)");
    eval->add_option("--gt-traj", ev_gt_traj, "Ground-truth trajectory");
    eval->add_option("--obstacles", ev_obstacles, "Obstacle BEV grid (VGRD)");
    eval->add_option("--ego-length", ev_ego_length, "Ego footprint length (m)");
    eval->add_option("--ego-width", ev_ego_width, "Ego footprint width (m)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 64;
    }

    try {
        if (bin->parsed())
            return cmd_bin(bin_set, bin_grid, bin_radius, bin_threads, bin_dump, out);
        if (splat->parsed())
            return cmd_splat(splat_set, splat_grid, splat_out, splat_bev,
                             head_from_flags(splat_head, splat_tau, splat_a, splat_b),
                             splat_radius, splat_threads, out);
        if (render->parsed())
            return cmd_render(render_set, render_cam, render_feat, render_depth, render_preview,
                              render_max_depth, render_threads, out);
        if (gradcheck->parsed())
            return cmd_gradcheck(gc_seed, gc_n, gc_step, gc_max_gaussians, gc_threads, out);
        if (bench->parsed())
            return cmd_bench(bench_gaussians, bench_dim, bench_grid, bench_reps, bench_seed,
                             bench_radius, bench_threads, out);
        if (label->parsed())
            return cmd_label(label_manifest, label_grid, label_out, label_vis, label_nearest,
                             label_stride, label_threads, out);
        if (query->parsed())
            return cmd_query(query_grid, query_classes, query_gt,
                             head_from_flags(query_head, query_tau, query_a, query_b), query_temp,
                             query_all_classes, out);
        if (eval->parsed())
            return cmd_eval(ev_pred_feat, ev_tgt_feat, ev_pred_depth, ev_tgt_depth, ev_logits,
                            ev_labels, ev_mask, ev_weights, ev_lambda, ev_pred_traj, ev_gt_traj,
                            ev_obstacles, ev_ego_length, ev_ego_width, out);
    } catch (const CheckFailure& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const gsvox::Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
