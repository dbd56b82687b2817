// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "lbw/error.hpp"

namespace lbw {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    bool operator==(const Vec3&) const = default;

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const { return *this * (1.0 / norm()); }
};

struct Mat3 {
    // row-major
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    double operator()(int r, int c) const { return m[r * 3 + c]; }
    double& operator()(int r, int c) { return m[r * 3 + c]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
};

/// Unit quaternion, w + xi + yj + zk.
struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    bool operator==(const Quat&) const = default;

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

    Quat operator*(const Quat& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z,
                w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x,
                w * o.z + x * o.y - y * o.x + z * o.w};
    }
    Quat conjugate() const { return {w, -x, -y, -z}; }

    Mat3 to_matrix() const {
        Mat3 r;
        r(0, 0) = 1 - 2 * (y * y + z * z);
        r(0, 1) = 2 * (x * y - w * z);
        r(0, 2) = 2 * (x * z + w * y);
        r(1, 0) = 2 * (x * y + w * z);
        r(1, 1) = 1 - 2 * (x * x + z * z);
        r(1, 2) = 2 * (y * z - w * x);
        r(2, 0) = 2 * (x * z - w * y);
        r(2, 1) = 2 * (y * z + w * x);
        r(2, 2) = 1 - 2 * (x * x + y * y);
        return r;
    }

    Vec3 rotate(const Vec3& v) const { return to_matrix() * v; }

    static Quat from_matrix(const Mat3& r) {
        Quat q;
        const double tr = r(0, 0) + r(1, 1) + r(2, 2);
        if (tr > 0) {
            const double s = std::sqrt(tr + 1.0) * 2;
            q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
        } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
            const double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
            q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
        } else if (r(1, 1) > r(2, 2)) {
            const double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
            q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
        } else {
            const double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
            q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
        }
        return q.canonical();
    }

    Quat normalized() const {
        const double n = norm();
        return {w / n, x / n, y / n, z / n};
    }
    /// Representative with w >= 0 so equal rotations compare equal.
    Quat canonical() const {
        Quat q = normalized();
        if (q.w < 0) q = {-q.w, -q.x, -q.y, -q.z};
        return q;
    }
};

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    bool operator==(const Intrinsics&) const = default;

    /// Square-pixel pinhole with the given horizontal field of view, centered.
    static Intrinsics from_fov(int height, int width, double hfov_rad) {
        const double f = 0.5 * width / std::tan(0.5 * hfov_rad);
        return {f, f, 0.5 * width, 0.5 * height};
    }
};

/// World frame is y-up; camera frame follows the x-right, y-down, z-forward
/// convention. orientation maps world vectors into the camera frame.
struct CameraPose {
    Vec3 position;
    Quat orientation;
    Intrinsics intrinsics{64, 64, 32, 32};

    bool operator==(const CameraPose&) const = default;

    Mat3 world_to_camera() const { return orientation.to_matrix(); }
    Mat3 camera_to_world() const { return orientation.to_matrix().transposed(); }

    bool valid() const {
        const auto& k = intrinsics;
        return std::isfinite(k.fx) && std::isfinite(k.fy) && std::isfinite(k.cx) && std::isfinite(k.cy) &&
               k.fx > 0 && k.fy > 0 && std::abs(orientation.norm() - 1.0) <= 1e-6 &&
               std::isfinite(position.x) && std::isfinite(position.y) && std::isfinite(position.z);
    }
};

// --- yaw/pitch parameterization used by the action dynamics -----------------

/// Forward direction for yaw (about +y, positive turns right) and pitch
/// (positive looks up). Yaw 0 faces +z, and the camera's right is then -x.
inline Vec3 forward_dir(double yaw, double pitch) {
    return {-std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch)};
}

inline Vec3 right_dir(double yaw) { return {-std::cos(yaw), 0.0, -std::sin(yaw)}; }

inline Quat orientation_from_yaw_pitch(double yaw, double pitch) {
    const Vec3 f = forward_dir(yaw, pitch);
    const Vec3 r = right_dir(yaw);
    const Vec3 down = f.cross(r);
    // camera->world has columns (r, down, f); world->camera is its transpose.
    Mat3 wc;
    wc(0, 0) = r.x, wc(0, 1) = r.y, wc(0, 2) = r.z;
    wc(1, 0) = down.x, wc(1, 1) = down.y, wc(1, 2) = down.z;
    wc(2, 0) = f.x, wc(2, 1) = f.y, wc(2, 2) = f.z;
    return Quat::from_matrix(wc);
}

inline double wrap_angle(double a) {
    constexpr double two_pi = 2 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) a += two_pi;
    if (a > std::numbers::pi) a -= two_pi;
    return a;
}

struct YawPitch {
    double yaw = 0, pitch = 0;
};

inline YawPitch yaw_pitch_of(const Quat& q) {
    const Vec3 f = q.to_matrix().transposed() * Vec3{0, 0, 1};
    return {std::atan2(-f.x, f.z), std::asin(std::clamp(f.y, -1.0, 1.0))};
}

inline CameraPose make_pose(Vec3 position, double yaw, double pitch, Intrinsics k) {
    return {position, orientation_from_yaw_pitch(yaw, pitch), k};
}

/// Pose of `pose` expressed in the camera frame of `reference`; the reference
/// itself maps to the identity pose at the origin.
inline CameraPose relative_to(const CameraPose& reference, const CameraPose& pose) {
    const Mat3 ref_wc = reference.world_to_camera();
    CameraPose rel;
    rel.position = ref_wc * (pose.position - reference.position);
    rel.orientation = Quat::from_matrix(pose.world_to_camera() * ref_wc.transposed());
    rel.intrinsics = pose.intrinsics;
    return rel;
}

// --- actions ----------------------------------------------------------------

enum Key : std::uint8_t { key_w = 1, key_a = 2, key_s = 4, key_d = 8 };

struct ActionState {
    std::uint8_t keys = 0;  // multi-hot, bit0 W, bit1 A, bit2 S, bit3 D
    double yaw_delta = 0;   // rad/frame
    double pitch_delta = 0;
    double timestamp = 0;

    bool operator==(const ActionState&) const = default;

    bool has(Key k) const { return (keys & k) != 0; }
    bool valid() const {
        return keys < 16 && std::abs(yaw_delta) <= std::numbers::pi / 4 + 1e-12 &&
               std::abs(pitch_delta) <= std::numbers::pi / 8 + 1e-12;
    }
};

// --- Plücker ray maps -----------------------------------------------------

/// H x W x 6 grid; channels 0-2 unit direction, 3-5 moment o x d.
struct PluckerMap {
    int height = 0, width = 0;
    std::vector<double> data;

    const double* at(int v, int u) const { return &data[(static_cast<size_t>(v) * width + u) * 6]; }
};

inline Vec3 pixel_ray(const CameraPose& pose, double u, double v) {
    const auto& k = pose.intrinsics;
    const Vec3 cam{(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
    return (pose.camera_to_world() * cam).normalized();
}

inline PluckerMap plucker_embed(const CameraPose& pose, int height, int width) {
    LBW_REQUIRE(height >= 1 && width >= 1, ErrorCode::invalid_argument, "plucker map needs positive size");
    LBW_REQUIRE(pose.valid(), ErrorCode::invalid_pose, "non-finite or degenerate camera pose");
    PluckerMap map{height, width, std::vector<double>(static_cast<size_t>(height) * width * 6)};
    const Mat3 cw = pose.camera_to_world();
    const auto& k = pose.intrinsics;
    const Vec3& o = pose.position;
    for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
            const Vec3 cam{(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0};
            const Vec3 d = (cw * cam).normalized();
            const Vec3 m = o.cross(d);
            double* p = &map.data[(static_cast<size_t>(v) * width + u) * 6];
            p[0] = d.x, p[1] = d.y, p[2] = d.z;
            p[3] = m.x, p[4] = m.y, p[5] = m.z;
        }
    }
    return map;
}

/// Mean over pixels of each of the six channels.
inline std::array<double, 6> pool_plucker(const PluckerMap& map) {
    std::array<double, 6> acc{};
    const size_t n = static_cast<size_t>(map.height) * map.width;
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 6; ++c) acc[c] += map.data[i * 6 + c];
    for (auto& a : acc) a /= static_cast<double>(n);
    return acc;
}

}  // namespace lbw
