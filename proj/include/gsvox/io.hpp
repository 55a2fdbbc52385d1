// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0
//
// Binary containers (all little-endian, f32 scalars on disk):
//   GSET  magic "GSET", version u32=1, count u32, feature_dim u32,
//         means f32×3N, quats f32×4N, scales f32×3N, opacities f32×N,
//         features f32×N·C
//   VGRD  magic "VGRD", version u32=1, dims u32×3, origin f32×3,
//         voxel_size f32, feature_dim u32, flags u32 (bit0 occupancy,
//         bit1 features), density f32×Nv [, occupancy u8×Nv]
//         [, features f32×Nv·C]
//   PNTS  magic "PNTS", version u32=1, count u32, feature_dim u32 (0 ok),
//         xyz f32×3N, features f32×N·C
// Text formats: camera files (`K:`, `E:`, `size:` rows), poses (16 floats),
// and PGM16 / PPM image writers for the renderer. The TEMB embedding-bank
// container lives with its type in query.hpp.

#pragma once

#include "gsvox/core.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace gsvox {

static_assert(std::endian::native == std::endian::little,
              "on-disk layout is little-endian; big-endian hosts are unsupported");

namespace detail {

class Reader {
public:
    Reader(std::string path, std::string bytes) : path_(std::move(path)), bytes_(std::move(bytes)) {}

    static Reader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw IoError(path + ": cannot open for reading");
        std::ostringstream ss;
        ss << in.rdbuf();
        return Reader(path, ss.str());
    }

    std::size_t offset() const { return off_; }

    void expect_magic(const char (&magic)[5]) {
        char buf[4];
        raw(buf, 4, "magic");
        if (std::memcmp(buf, magic, 4) != 0)
            throw IoError(path_ + ": bad magic at byte 0 (expected \"" + magic + "\")");
    }

    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        raw(&v, 4, what);
        return v;
    }

    float f32(const char* what) {
        float v;
        raw(&v, 4, what);
        return v;
    }

    // Reads n f32 into doubles; rejects NaN naming the byte offset.
    void f32_array(std::vector<double>& out, std::size_t n, const char* what) {
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t at = off_;
            const float v = f32(what);
            if (std::isnan(v))
                throw IoError(path_ + ": NaN " + what + " at byte " + std::to_string(at));
            out[i] = static_cast<double>(v);
        }
    }

    void u8_array(std::vector<std::uint8_t>& out, std::size_t n, const char* what) {
        out.resize(n);
        raw(out.data(), n, what);
    }

    std::string str(std::size_t n, const char* what) {
        std::string s(n, '\0');
        raw(s.data(), n, what);
        return s;
    }

    void expect_eof() const {
        if (off_ != bytes_.size())
            throw IoError(path_ + ": " + std::to_string(bytes_.size() - off_) +
                          " trailing bytes at byte " + std::to_string(off_));
    }

    void raw(void* dst, std::size_t n, const char* what) {
        if (off_ + n > bytes_.size())
            throw IoError(path_ + ": truncated reading " + what + " at byte " +
                          std::to_string(off_));
        std::memcpy(dst, bytes_.data() + off_, n);
        off_ += n;
    }

private:
    std::string path_;
    std::string bytes_;
    std::size_t off_ = 0;
};

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_)
            throw IoError(path + ": cannot open for writing");
    }

    void magic(const char (&m)[5]) { out_.write(m, 4); }
    void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
    void f32(double v) {
        const float f = static_cast<float>(v);
        out_.write(reinterpret_cast<const char*>(&f), 4);
    }
    void f32_array(const std::vector<double>& v) {
        for (double x : v)
            f32(x);
    }
    void u8_array(const std::vector<std::uint8_t>& v) {
        out_.write(reinterpret_cast<const char*>(v.data()),
                   static_cast<std::streamsize>(v.size()));
    }
    void str(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

    void close() {
        out_.flush();
        if (!out_)
            throw IoError(path_ + ": write failed");
        out_.close();
    }

private:
    std::string path_;
    std::ofstream out_;
};

} // namespace detail

// ---- Gaussian sets (GSET) ----

inline GaussianSet load_gaussian_set(const std::string& path) {
    auto r = detail::Reader::from_file(path);
    r.expect_magic("GSET");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw IoError(path + ": unsupported GSET version " + std::to_string(version) +
                      " at byte 4");
    GaussianSet set;
    set.count = r.u32("count");
    set.feature_dim = static_cast<int>(r.u32("feature_dim"));
    const std::size_t n = set.count;
    r.f32_array(set.means, 3 * n, "mean");
    const std::size_t quat_base = r.offset();
    r.f32_array(set.quats, 4 * n, "quaternion");
    const std::size_t scale_base = r.offset();
    r.f32_array(set.scales, 3 * n, "scale");
    r.f32_array(set.opacities, n, "opacity");
    r.f32_array(set.features, n * static_cast<std::size_t>(set.feature_dim), "feature");
    r.expect_eof();
    // Zero/negative scales are a format-level defect: name the byte offset.
    for (std::size_t i = 0; i < 3 * n; ++i)
        if (!(set.scales[i] > 0.0))
            throw IoError(path + ": nonpositive scale at byte " +
                          std::to_string(scale_base + 4 * i));
    for (std::size_t i = 0; i < n; ++i) {
        double norm2 = 0.0;
        for (int k = 0; k < 4; ++k)
            norm2 += set.quats[4 * i + k] * set.quats[4 * i + k];
        if (std::abs(std::sqrt(norm2) - 1.0) > kQuatRenormTol)
            throw IoError(path + ": quaternion norm outside tolerance at byte " +
                          std::to_string(quat_base + 16 * i));
    }
    validate_gaussian_set(set);
    return set;
}

inline void save_gaussian_set(const GaussianSet& set, const std::string& path) {
    detail::Writer w(path);
    w.magic("GSET");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(set.count));
    w.u32(static_cast<std::uint32_t>(set.feature_dim));
    w.f32_array(set.means);
    w.f32_array(set.quats);
    w.f32_array(set.scales);
    w.f32_array(set.opacities);
    w.f32_array(set.features);
    w.close();
}

// ---- Voxel grids (VGRD) ----

inline VoxelGrid load_voxel_grid(const std::string& path) {
    auto r = detail::Reader::from_file(path);
    r.expect_magic("VGRD");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw IoError(path + ": unsupported VGRD version " + std::to_string(version) +
                      " at byte 4");
    VoxelGrid grid;
    for (int k = 0; k < 3; ++k)
        grid.spec.dims[k] = static_cast<int>(r.u32("dims"));
    for (int k = 0; k < 3; ++k)
        grid.spec.origin[k] = r.f32("origin");
    grid.spec.voxel_size = r.f32("voxel_size");
    grid.feature_dim = static_cast<int>(r.u32("feature_dim"));
    const std::uint32_t flags = r.u32("flags");
    validate_grid_spec(grid.spec);
    const std::size_t nv = grid.spec.num_voxels();
    r.f32_array(grid.density, nv, "density");
    if (flags & 1u)
        r.u8_array(grid.occupancy, nv, "occupancy");
    if (flags & 2u)
        r.f32_array(grid.features, nv * static_cast<std::size_t>(grid.feature_dim), "feature");
    r.expect_eof();
    validate_voxel_grid(grid);
    return grid;
}

inline void save_voxel_grid(const VoxelGrid& grid, const std::string& path) {
    detail::Writer w(path);
    w.magic("VGRD");
    w.u32(1);
    for (int k = 0; k < 3; ++k)
        w.u32(static_cast<std::uint32_t>(grid.spec.dims[k]));
    for (int k = 0; k < 3; ++k)
        w.f32(grid.spec.origin[k]);
    w.f32(grid.spec.voxel_size);
    w.u32(static_cast<std::uint32_t>(grid.feature_dim));
    std::uint32_t flags = 0;
    if (grid.has_occupancy())
        flags |= 1u;
    if (grid.has_features())
        flags |= 2u;
    w.u32(flags);
    w.f32_array(grid.density);
    if (grid.has_occupancy())
        w.u8_array(grid.occupancy);
    if (grid.has_features())
        w.f32_array(grid.features);
    w.close();
}

// ---- Point clouds (PNTS) ----

struct PointCloud {
    std::size_t count = 0;
    int feature_dim = 0;          // 0 allowed: bare geometry
    std::vector<double> xyz;      // 3*count
    std::vector<double> features; // count*feature_dim
};

inline PointCloud load_point_cloud(const std::string& path) {
    auto r = detail::Reader::from_file(path);
    r.expect_magic("PNTS");
    const std::uint32_t version = r.u32("version");
    if (version != 1)
        throw IoError(path + ": unsupported PNTS version " + std::to_string(version) +
                      " at byte 4");
    PointCloud pc;
    pc.count = r.u32("count");
    pc.feature_dim = static_cast<int>(r.u32("feature_dim"));
    r.f32_array(pc.xyz, 3 * pc.count, "xyz");
    r.f32_array(pc.features, pc.count * static_cast<std::size_t>(pc.feature_dim), "feature");
    r.expect_eof();
    return pc;
}

inline void save_point_cloud(const PointCloud& pc, const std::string& path) {
    detail::Writer w(path);
    w.magic("PNTS");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(pc.count));
    w.u32(static_cast<std::uint32_t>(pc.feature_dim));
    w.f32_array(pc.xyz);
    w.f32_array(pc.features);
    w.close();
}

// ---- Camera / pose text formats ----

inline CameraModel parse_camera_text(const std::string& text, const std::string& origin_name) {
    CameraModel cam;
    bool got_k = false, got_e = false, got_size = false;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag))
            continue;
        if (tag == "K:") {
            for (int i = 0; i < 9; ++i)
                if (!(ls >> cam.intrinsics(i / 3, i % 3)))
                    throw IoError(origin_name + ": K row needs 9 floats");
            got_k = true;
        } else if (tag == "E:") {
            for (int i = 0; i < 16; ++i)
                if (!(ls >> cam.extrinsics(i / 4, i % 4)))
                    throw IoError(origin_name + ": E row needs 16 floats");
            got_e = true;
        } else if (tag == "size:") {
            if (!(ls >> cam.width >> cam.height))
                throw IoError(origin_name + ": size row needs `w h`");
            got_size = true;
        } else {
            throw IoError(origin_name + ": unknown camera row '" + tag + "'");
        }
    }
    if (!got_k || !got_e || !got_size)
        throw IoError(origin_name + ": camera file needs K:, E: and size: rows");
    validate_camera(cam);
    return cam;
}

inline CameraModel load_camera(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError(path + ": cannot open for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_camera_text(ss.str(), path);
}

inline void save_camera(const CameraModel& cam, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw IoError(path + ": cannot open for writing");
    out.precision(17);
    out << "K:";
    for (int i = 0; i < 9; ++i)
        out << ' ' << cam.intrinsics(i / 3, i % 3);
    out << "\nE:";
    for (int i = 0; i < 16; ++i)
        out << ' ' << cam.extrinsics(i / 4, i % 4);
    out << "\nsize: " << cam.width << ' ' << cam.height << '\n';
    if (!out)
        throw IoError(path + ": write failed");
}

/// 16 whitespace-separated floats, row-major 4×4 rigid transform.
inline Mat4 load_pose(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoError(path + ": cannot open for reading");
    Mat4 pose;
    for (int i = 0; i < 16; ++i)
        if (!(in >> pose(i / 4, i % 4)))
            throw IoError(path + ": pose file needs 16 floats");
    return pose;
}

inline void save_pose(const Mat4& pose, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw IoError(path + ": cannot open for writing");
    out.precision(17);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c)
            out << pose(r, c) << (c == 3 ? '\n' : ' ');
    }
    if (!out)
        throw IoError(path + ": write failed");
}

// ---- Image writers (render outputs) ----

/// 16-bit binary PGM (P5, big-endian samples per the format). Values are
/// clamped to [0, max_value] and scaled to the full 16-bit range.
inline void save_pgm16(const std::vector<double>& values, int width, int height, double max_value,
                       const std::string& path) {
    if (values.size() != static_cast<std::size_t>(width) * height)
        throw ValidationError("save_pgm16: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError(path + ": cannot open for writing");
    out << "P5\n" << width << ' ' << height << "\n65535\n";
    const double scale = max_value > 0.0 ? 65535.0 / max_value : 0.0;
    for (double v : values) {
        const double s = std::min(std::max(v * scale, 0.0), 65535.0);
        const std::uint16_t q = static_cast<std::uint16_t>(std::lround(s));
        const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        out.write(bytes, 2);
    }
    if (!out)
        throw IoError(path + ": write failed");
}

/// 8-bit binary PPM (P6) visualization mapping up to the first 3 channels of
/// a H×W×C feature image to RGB, normalized per channel over the image.
inline void save_ppm_feature_preview(const std::vector<double>& features, int width, int height,
                                     int channels, const std::string& path) {
    if (features.size() != static_cast<std::size_t>(width) * height * channels)
        throw ValidationError("save_ppm_feature_preview: size mismatch");
    const int used = std::min(channels, 3);
    double lo[3] = {0, 0, 0}, hi[3] = {1, 1, 1};
    for (int c = 0; c < used; ++c) {
        lo[c] = std::numeric_limits<double>::infinity();
        hi[c] = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < static_cast<std::size_t>(width) * height; ++p) {
            const double v = features[p * channels + c];
            lo[c] = std::min(lo[c], v);
            hi[c] = std::max(hi[c], v);
        }
        if (!(hi[c] > lo[c])) {
            lo[c] = 0.0;
            hi[c] = 1.0;
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError(path + ": cannot open for writing");
    out << "P6\n" << width << ' ' << height << "\n255\n";
    for (std::size_t p = 0; p < static_cast<std::size_t>(width) * height; ++p) {
        char rgb[3] = {0, 0, 0};
        for (int c = 0; c < used; ++c) {
            const double v = (features[p * channels + c] - lo[c]) / (hi[c] - lo[c]);
            rgb[c] = static_cast<char>(std::lround(std::min(std::max(v, 0.0), 1.0) * 255.0));
        }
        out.write(rgb, 3);
    }
    if (!out)
        throw IoError(path + ": write failed");
}

} // namespace gsvox
