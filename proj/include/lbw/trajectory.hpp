// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lbw/camera.hpp"
#include "lbw/error.hpp"
#include "lbw/world.hpp"

namespace lbw {

enum class TrajectoryKind : std::uint8_t { rect, rotation, waypoint, imported, gameplay };

inline const char* to_string(TrajectoryKind k) {
    switch (k) {
    case TrajectoryKind::rect: return "rect";
    case TrajectoryKind::rotation: return "rotation";
    case TrajectoryKind::waypoint: return "waypoint";
    case TrajectoryKind::imported: return "imported";
    case TrajectoryKind::gameplay: return "gameplay";
    }
    return "?";
}

enum class SegmentKind : std::uint8_t { move, turn, lookback, hold };

/// Contiguous frame range [first, last] belonging to one leg of the path.
struct Segment {
    SegmentKind kind{};
    int first = 0;
    int last = 0;
    int leg = 0;
    bool operator==(const Segment&) const = default;
};

/// poses[0] is the start pose and actions[0] the null action that "arrives"
/// there; every later pose is step_dynamics(poses[i-1], actions[i]).
struct Trajectory {
    TrajectoryKind kind = TrajectoryKind::gameplay;
    double frame_rate = kFrameRate;
    /// Multiplier on the frame interval handed to step_dynamics, so that
    /// translation per W frame equals speed / frame_rate.
    double time_scale = 1.0;
    std::vector<CameraPose> poses;
    std::vector<double> timestamps;
    std::vector<ActionState> actions;
    std::vector<Segment> segments;

    bool operator==(const Trajectory&) const = default;

    size_t size() const { return poses.size(); }
    double duration() const { return static_cast<double>(poses.size()) / frame_rate; }
    int leg_count() const { return segments.empty() ? 0 : segments.back().leg + 1; }

    double step_dt(size_t i) const { return (timestamps[i] - timestamps[i - 1]) * time_scale; }
};

/// Appends actions through the oracle dynamics, recording segments as it goes.
class TrajectoryBuilder {
public:
    TrajectoryBuilder(TrajectoryKind kind, const CameraPose& start, double frame_rate, double time_scale,
                      const WorldSpec& world)
        : grid_(world) {
        t_.kind = kind;
        t_.frame_rate = frame_rate;
        t_.time_scale = time_scale;
        t_.poses.push_back(start);
        t_.timestamps.push_back(0.0);
        t_.actions.push_back(ActionState{});
    }

    /// Returns false if the oracle blocked the translation.
    bool push(ActionState a, SegmentKind kind, int leg) {
        const size_t i = t_.poses.size();
        const double ts = static_cast<double>(i) / t_.frame_rate;
        a.timestamp = ts;
        const CameraPose prev = t_.poses.back();
        const CameraPose next = step_dynamics(prev, a, (1.0 / t_.frame_rate) * t_.time_scale, grid_);
        const bool wanted_move = (a.keys & 0xF) != 0;
        t_.poses.push_back(next);
        t_.timestamps.push_back(ts);
        t_.actions.push_back(a);
        const int idx = static_cast<int>(i);
        if (!t_.segments.empty() && t_.segments.back().kind == kind && t_.segments.back().leg == leg &&
            t_.segments.back().last == idx - 1) {
            t_.segments.back().last = idx;
        } else {
            t_.segments.push_back({kind, idx, idx, leg});
        }
        return !wanted_move || !(next.position == prev.position);
    }

    /// Rotates in place by `total` radians in equal steps of at most `max_step`.
    void turn(double total, double max_step, SegmentKind kind, int leg) {
        const int n = static_cast<int>(std::ceil(std::abs(total) / max_step - 1e-9));
        for (int k = 0; k < n; ++k) push(ActionState{0, total / n, 0, 0}, kind, leg);
    }

    const CameraPose& current() const { return t_.poses.back(); }
    Trajectory finish() {
        // the first leg owns frame 0 so dense segments tile from t = 0
        if (!t_.segments.empty()) t_.segments.front().first = 0;
        return std::move(t_);
    }

private:
    OccupancyGrid grid_;
    Trajectory t_;
};

inline Intrinsics default_intrinsics() { return Intrinsics::from_fov(64, 64, std::numbers::pi / 2); }

// --- replay & collision -----------------------------------------------------

inline std::vector<CameraPose> replay(const Trajectory& traj, const WorldSpec& world) {
    const OccupancyGrid grid(world);
    std::vector<CameraPose> out{traj.poses.front()};
    for (size_t i = 1; i < traj.size(); ++i) out.push_back(step_dynamics(out.back(), traj.actions[i], traj.step_dt(i), grid));
    return out;
}

/// Largest per-frame position deviation between replayed and stored poses.
inline double replay_error(const Trajectory& traj, const WorldSpec& world) {
    const auto poses = replay(traj, world);
    double worst = 0;
    for (size_t i = 0; i < poses.size(); ++i) worst = std::max(worst, (poses[i].position - traj.poses[i].position).norm());
    return worst;
}

struct CollisionReport {
    std::vector<int> frames;
    bool ok() const { return frames.empty(); }
};

inline CollisionReport check_collision(const Trajectory& traj, const WorldSpec& world, double clearance) {
    LBW_REQUIRE(clearance >= 0, ErrorCode::invalid_argument, "clearance must be non-negative");
    const OccupancyGrid grid(world);
    CollisionReport r;
    for (size_t i = 0; i < traj.size(); ++i) {
        const Vec3& p = traj.poses[i].position;
        if (grid.clearance_at(p.x, p.z) < clearance) r.frames.push_back(static_cast<int>(i));
    }
    return r;
}

// --- generators -------------------------------------------------------------

/// Closed rectangle with perimeter 4*scale, heading tangent to each edge and
/// two in-place quarter-turn frames at every corner. With a world, placements
/// are resampled until the loop keeps clearance from every obstacle.
inline Trajectory gen_rect_path(double scale, double speed, double frame_rate, std::uint64_t seed,
                                const WorldSpec* world = nullptr) {
    LBW_REQUIRE(scale > 0 && speed > 0 && frame_rate > 0, ErrorCode::invalid_argument, "rect path needs positive scale/speed/fps");
    const double step = speed / frame_rate;
    int total = static_cast<int>(std::lround(4.0 * scale / step));
    total += total & 1;
    const int half = total / 2;
    LBW_REQUIRE(half >= 2, ErrorCode::invalid_argument, "rectangle too small for the frame rate");

    std::mt19937_64 rng(seed ^ 0xA5A5'1234'5678'9ABCULL);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int attempt = 0; attempt < 64; ++attempt) {
        const int a_steps = std::clamp(static_cast<int>(std::lround(half * (0.25 + 0.5 * unit(rng)))), 1, half - 1);
        const int b_steps = half - a_steps;
        const double a = a_steps * step, b = b_steps * step;
        const double yaw0 = (unit(rng) * 2 - 1) * std::numbers::pi;

        // Right turns: edges follow heading h, then r, then -h, then -r.
        const Vec3 h = forward_dir(yaw0, 0);
        const Vec3 r = right_dir(yaw0);
        const Vec3 corners[4] = {Vec3{}, h * a, h * a + r * b, r * b};
        double lo_x = 0, hi_x = 0, lo_z = 0, hi_z = 0;
        for (const auto& c : corners) {
            lo_x = std::min(lo_x, c.x), hi_x = std::max(hi_x, c.x);
            lo_z = std::min(lo_z, c.z), hi_z = std::max(hi_z, c.z);
        }
        const double margin = kClearance + 0.25;
        const double span_x = kArenaCells - 2 * margin - (hi_x - lo_x);
        const double span_z = kArenaCells - 2 * margin - (hi_z - lo_z);
        LBW_REQUIRE(span_x > 0 && span_z > 0, ErrorCode::invalid_argument, "rectangle does not fit in the arena");
        const Vec3 start{margin - lo_x + unit(rng) * span_x, kEyeHeight, margin - lo_z + unit(rng) * span_z};

        const WorldSpec empty = build_empty_world(seed);
        TrajectoryBuilder tb(TrajectoryKind::rect, make_pose(start, yaw0, 0, default_intrinsics()), frame_rate,
                             speed / kMoveSpeed, empty);
        const int edge_steps[4] = {a_steps, b_steps, a_steps, b_steps};
        for (int leg = 0; leg < 4; ++leg) {
            for (int k = 0; k < edge_steps[leg]; ++k) tb.push(ActionState{key_w, 0, 0, 0}, SegmentKind::move, leg);
            tb.turn(std::numbers::pi / 2, std::numbers::pi / 4, SegmentKind::turn, leg);
        }
        Trajectory t = tb.finish();
        if (!world || check_collision(t, *world, kClearance).ok()) return t;
    }
    throw Error(ErrorCode::sampling_exhausted, "no collision-free rectangle placement found");
}

/// Log-uniform angular speed in [pi/8, pi] rad/s.
inline double sample_angular_speed(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(std::log(std::numbers::pi / 8), std::log(std::numbers::pi));
    return std::exp(u(rng));
}

inline Trajectory gen_rotation_path(int turns, double angular_speed, double frame_rate, std::uint64_t seed,
                                    const Vec3* position = nullptr, const double* start_yaw = nullptr) {
    LBW_REQUIRE(turns >= 1 && angular_speed > 0 && frame_rate > 0, ErrorCode::invalid_argument,
                "rotation path needs turns >= 1 and positive speed");
    const double sweep = 2 * std::numbers::pi * turns;
    const int n = static_cast<int>(std::lround(sweep / angular_speed * frame_rate));
    LBW_REQUIRE(n >= 1 && sweep / n <= std::numbers::pi / 4 + 1e-12, ErrorCode::invalid_argument,
                "angular speed exceeds the per-frame yaw limit");
    std::mt19937_64 rng(seed ^ 0x5151'F00D'0000'0001ULL);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vec3 p = position ? *position : Vec3{13.5 + 5.0 * unit(rng), kEyeHeight, 13.5 + 5.0 * unit(rng)};
    const double yaw0 = start_yaw ? *start_yaw : (unit(rng) * 2 - 1) * std::numbers::pi;
    const int per_turn = n / turns;
    TrajectoryBuilder tb(TrajectoryKind::rotation, make_pose(p, yaw0, 0, default_intrinsics()), frame_rate, 1.0,
                         build_empty_world(seed));
    for (int k = 0; k < n; ++k) tb.push(ActionState{0, sweep / n, 0, 0}, SegmentKind::turn, std::min(k / std::max(per_turn, 1), turns - 1));
    return tb.finish();
}

/// Free-space waypoint tour. After each leg a look-back segment re-faces the
/// previous waypoint with probability lookback_prob.
inline Trajectory gen_waypoint_path(int n_waypoints, double lookback_prob, const WorldSpec& world, std::uint64_t seed,
                                    double frame_rate = kFrameRate) {
    LBW_REQUIRE(n_waypoints >= 2, ErrorCode::invalid_argument, "need at least two waypoints");
    LBW_REQUIRE(lookback_prob >= 0 && lookback_prob <= 1, ErrorCode::invalid_argument, "lookback_prob outside [0,1]");
    const OccupancyGrid grid(world);
    std::mt19937_64 rng(seed ^ 0x77AA'0102'0304'0506ULL);
    std::uniform_real_distribution<double> coord(1.0, kArenaCells - 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double step = kMoveSpeed / frame_rate;
    const double margin = kClearance + 0.2;

    auto segment_clear = [&](const Vec3& a, const Vec3& b) {
        const double len = (b - a).norm();
        const int samples = std::max(2, static_cast<int>(std::ceil(len / 0.05)));
        for (int k = 0; k <= samples; ++k) {
            const Vec3 p = a + (b - a) * (static_cast<double>(k) / samples);
            if (grid.clearance_at(p.x, p.z) < margin) return false;
        }
        return true;
    };

    const int max_attempts = 10 * n_waypoints;
    int attempts = 0;
    std::vector<Vec3> wps;
    while (static_cast<int>(wps.size()) < n_waypoints) {
        LBW_REQUIRE(attempts < max_attempts, ErrorCode::sampling_exhausted, "no free waypoint found");
        ++attempts;
        const Vec3 c{coord(rng), kEyeHeight, coord(rng)};
        if (grid.clearance_at(c.x, c.z) < margin + 0.3) continue;
        if (!wps.empty()) {
            const double len = (c - wps.back()).norm();
            if (len < 2 * step || len > 12.0 || !segment_clear(wps.back(), c)) continue;
        }
        wps.push_back(c);
    }

    auto yaw_to = [](const Vec3& from, const Vec3& to) { return std::atan2(-(to.x - from.x), to.z - from.z); };
    const double turn_step = std::numbers::pi / 8;
    TrajectoryBuilder tb(TrajectoryKind::waypoint, make_pose(wps[0], yaw_to(wps[0], wps[1]), 0, default_intrinsics()),
                         frame_rate, 1.0, world);
    for (int leg = 0; leg + 1 < n_waypoints; ++leg) {
        const Vec3 here = tb.current().position;
        const double cur = yaw_pitch_of(tb.current().orientation).yaw;
        tb.turn(wrap_angle(yaw_to(here, wps[leg + 1]) - cur), turn_step, SegmentKind::turn, leg);
        const int steps = static_cast<int>(std::floor((wps[leg + 1] - here).norm() / step));
        for (int k = 0; k < steps; ++k) {
            const bool moved = tb.push(ActionState{key_w, 0, 0, 0}, SegmentKind::move, leg);
            LBW_REQUIRE(moved, ErrorCode::contract_violation, "waypoint leg blocked by an obstacle");
        }
        if (unit(rng) < lookback_prob) {
            const Vec3 now = tb.current().position;
            const double yaw_now = yaw_pitch_of(tb.current().orientation).yaw;
            double back = wrap_angle(yaw_to(now, wps[leg]) - yaw_now);
            if (std::abs(back) < 1e-9) back = std::numbers::pi;
            tb.turn(back, turn_step, SegmentKind::lookback, leg);
        }
    }
    return tb.finish();
}

// --- pose-log import/export -------------------------------------------------

inline std::string export_trajectory(const Trajectory& traj) {
    std::ostringstream os;
    os.precision(17);
    os << "# t px py pz qw qx qy qz\n";
    for (size_t i = 0; i < traj.size(); ++i) {
        const auto& p = traj.poses[i];
        os << traj.timestamps[i] << ' ' << p.position.x << ' ' << p.position.y << ' ' << p.position.z << ' '
           << p.orientation.w << ' ' << p.orientation.x << ' ' << p.orientation.y << ' ' << p.orientation.z << '\n';
    }
    return os.str();
}

/// Inverse dynamics for one frame: continuous rotation deltas plus keys
/// quantized from the displacement in the new heading frame.
inline ActionState infer_action(const CameraPose& prev, const CameraPose& next, double dt) {
    const YawPitch a = yaw_pitch_of(prev.orientation), b = yaw_pitch_of(next.orientation);
    ActionState act;
    act.yaw_delta = std::clamp(wrap_angle(b.yaw - a.yaw), -std::numbers::pi / 4, std::numbers::pi / 4);
    act.pitch_delta = std::clamp(b.pitch - a.pitch, -std::numbers::pi / 8, std::numbers::pi / 8);
    const double yaw = wrap_angle(a.yaw + act.yaw_delta);
    const Vec3 d = next.position - prev.position;
    const double step = kMoveSpeed * dt;
    const double f = d.dot(forward_dir(yaw, 0)) / step;
    const double s = d.dot(right_dir(yaw)) / step;
    if (f >= 0.5) act.keys |= key_w;
    if (f <= -0.5) act.keys |= key_s;
    if (s >= 0.5) act.keys |= key_d;
    if (s <= -0.5) act.keys |= key_a;
    return act;
}

inline Trajectory import_trajectory(std::string_view text) {
    Trajectory traj;
    traj.kind = TrajectoryKind::imported;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::vector<double> v;
        std::string tok;
        while (ls >> tok) {
            double x = 0;
            const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
            LBW_REQUIRE(res.ec == std::errc{} && res.ptr == tok.data() + tok.size(), ErrorCode::parse_error,
                        "line " + std::to_string(line_no) + ": bad number '" + tok + "'");
            v.push_back(x);
        }
        if (v.empty()) continue;
        LBW_REQUIRE(v.size() == 8, ErrorCode::parse_error,
                    "line " + std::to_string(line_no) + ": expected 8 fields, got " + std::to_string(v.size()));
        if (!traj.timestamps.empty())
            LBW_REQUIRE(v[0] > traj.timestamps.back(), ErrorCode::non_monotone_timestamps,
                        "line " + std::to_string(line_no) + ": timestamp not strictly increasing");
        CameraPose p;
        p.position = {v[1], v[2], v[3]};
        p.orientation = Quat{v[4], v[5], v[6], v[7]};
        LBW_REQUIRE(std::abs(p.orientation.norm() - 1.0) <= 1e-6, ErrorCode::parse_error,
                    "line " + std::to_string(line_no) + ": quaternion is not unit length");
        p.intrinsics = default_intrinsics();
        traj.timestamps.push_back(v[0]);
        traj.poses.push_back(p);
    }
    LBW_REQUIRE(!traj.poses.empty(), ErrorCode::parse_error, "pose log has no records");
    if (traj.timestamps.size() >= 2)
        traj.frame_rate = static_cast<double>(traj.timestamps.size() - 1) / (traj.timestamps.back() - traj.timestamps.front());
    traj.actions.push_back(ActionState{0, 0, 0, traj.timestamps[0]});
    for (size_t i = 1; i < traj.poses.size(); ++i) {
        ActionState a = infer_action(traj.poses[i - 1], traj.poses[i], traj.timestamps[i] - traj.timestamps[i - 1]);
        a.timestamp = traj.timestamps[i];
        traj.actions.push_back(a);
    }
    traj.segments.push_back({SegmentKind::move, 0, static_cast<int>(traj.size()) - 1, 0});
    return traj;
}

/// Total yaw swept, unwrapped, from the action deltas.
inline double unwrapped_yaw_sweep(const Trajectory& traj) {
    double s = 0;
    for (const auto& a : traj.actions) s += a.yaw_delta;
    return s;
}

}  // namespace lbw
