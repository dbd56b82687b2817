// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "lbw/camera.hpp"
#include "lbw/error.hpp"

namespace lbw {

// Arena and dynamics constants.
inline constexpr int kArenaCells = 32;
inline constexpr double kMoveSpeed = 2.0;     // units/s
inline constexpr double kClearance = 0.3;     // units
inline constexpr double kEyeHeight = 0.5;
inline constexpr double kPillarHeight = 1.5;
inline constexpr double kObjectHeight = 0.6;
inline constexpr double kWallHeight = 2.0;
inline constexpr double kFrameRate = 8.0;     // Hz
inline constexpr double kMaxPitch = std::numbers::pi / 3;

enum class PaletteColor : std::uint8_t { red, green, blue, yellow, cyan, magenta, orange, white };

inline constexpr std::array<const char*, 8> kPaletteNames{"red", "green", "blue", "yellow",
                                                          "cyan", "magenta", "orange", "white"};

inline std::array<double, 3> palette_rgb(PaletteColor c) {
    switch (c) {
    case PaletteColor::red: return {0.85, 0.12, 0.10};
    case PaletteColor::green: return {0.15, 0.75, 0.20};
    case PaletteColor::blue: return {0.15, 0.25, 0.90};
    case PaletteColor::yellow: return {0.92, 0.85, 0.15};
    case PaletteColor::cyan: return {0.10, 0.80, 0.85};
    case PaletteColor::magenta: return {0.80, 0.15, 0.75};
    case PaletteColor::orange: return {0.95, 0.55, 0.10};
    case PaletteColor::white: return {0.92, 0.92, 0.92};
    }
    return {0, 0, 0};
}

struct Cell {
    int x = 0, z = 0;
    auto operator<=>(const Cell&) const = default;
};

struct Pillar {
    Cell cell;
    PaletteColor color{};
    bool operator==(const Pillar&) const = default;
};

struct SpawnedObject {
    Cell cell;
    PaletteColor color{};
    bool operator==(const SpawnedObject&) const = default;
};

enum class TimeOfDay : std::uint8_t { day, night };

struct WorldSpec {
    std::uint64_t seed = 0;
    std::vector<Pillar> pillars;  // sorted by cell
    int floor_palette = 0;
    TimeOfDay time_of_day = TimeOfDay::day;
    std::array<double, 3> tint{1.0, 1.0, 1.0};
    std::vector<SpawnedObject> objects;

    bool operator==(const WorldSpec&) const = default;

    /// 0 free, 1 + pillar index, -(1 + object index); cells outside the arena read as walls.
    int cell_owner(int cx, int cz) const {
        for (size_t i = 0; i < pillars.size(); ++i)
            if (pillars[i].cell.x == cx && pillars[i].cell.z == cz) return static_cast<int>(i) + 1;
        for (size_t i = 0; i < objects.size(); ++i)
            if (objects[i].cell.x == cx && objects[i].cell.z == cz) return -static_cast<int>(i) - 1;
        return 0;
    }
};

/// Occupancy lookup with O(1) cell queries, built once per call site.
class OccupancyGrid {
public:
    explicit OccupancyGrid(const WorldSpec& w) : owner_(kArenaCells * kArenaCells, 0) {
        for (size_t i = 0; i < w.pillars.size(); ++i)
            owner_[idx(w.pillars[i].cell.x, w.pillars[i].cell.z)] = static_cast<int>(i) + 1;
        for (size_t i = 0; i < w.objects.size(); ++i)
            owner_[idx(w.objects[i].cell.x, w.objects[i].cell.z)] = -static_cast<int>(i) - 1;
    }

    static bool inside(int cx, int cz) { return cx >= 0 && cz >= 0 && cx < kArenaCells && cz < kArenaCells; }
    int owner(int cx, int cz) const { return inside(cx, cz) ? owner_[idx(cx, cz)] : 0; }
    bool occupied(int cx, int cz) const { return !inside(cx, cz) || owner_[idx(cx, cz)] != 0; }

    /// Horizontal distance from (x, z) to the nearest occupied cell or arena wall.
    double clearance_at(double x, double z) const {
        double best = std::min({x, z, kArenaCells - x, kArenaCells - z});
        const int cx = static_cast<int>(std::floor(x)), cz = static_cast<int>(std::floor(z));
        for (int dz = -2; dz <= 2; ++dz)
            for (int dx = -2; dx <= 2; ++dx) {
                const int gx = cx + dx, gz = cz + dz;
                if (!inside(gx, gz) || owner_[idx(gx, gz)] == 0) continue;
                const double ex = std::max({gx - x, 0.0, x - (gx + 1)});
                const double ez = std::max({gz - z, 0.0, z - (gz + 1)});
                best = std::min(best, std::sqrt(ex * ex + ez * ez));
            }
        return best;
    }

    bool is_free(const Vec3& p, double clearance) const { return clearance_at(p.x, p.z) >= clearance; }

private:
    static size_t idx(int cx, int cz) { return static_cast<size_t>(cz) * kArenaCells + cx; }
    std::vector<int> owner_;
};

/// Cells kept free around the arena center so default start poses are valid.
inline bool in_spawn_zone(const Cell& c) { return c.x >= 13 && c.x <= 18 && c.z >= 13 && c.z <= 18; }

inline WorldSpec build_world(std::uint64_t seed) {
    WorldSpec w;
    w.seed = seed;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x1234567ULL);
    std::uniform_int_distribution<int> count_dist(12, 20);
    std::uniform_int_distribution<int> cell_dist(1, kArenaCells - 2);
    std::uniform_int_distribution<int> color_dist(0, 7);
    const int n = count_dist(rng);
    while (static_cast<int>(w.pillars.size()) < n) {
        Cell c{cell_dist(rng), cell_dist(rng)};
        if (in_spawn_zone(c)) continue;
        if (std::any_of(w.pillars.begin(), w.pillars.end(), [&](const Pillar& p) { return p.cell == c; })) continue;
        w.pillars.push_back({c, static_cast<PaletteColor>(color_dist(rng))});
    }
    std::sort(w.pillars.begin(), w.pillars.end(), [](const Pillar& a, const Pillar& b) { return a.cell < b.cell; });
    w.floor_palette = static_cast<int>(rng() % 4);
    return w;
}

/// Same floor and attributes as build_world(seed) but without pillars.
inline WorldSpec build_empty_world(std::uint64_t seed) {
    WorldSpec w = build_world(seed);
    w.pillars.clear();
    return w;
}

// --- events -----------------------------------------------------------------

struct SetTimeOfDay {
    TimeOfDay value{};
    bool operator==(const SetTimeOfDay&) const = default;
};
struct SetTint {
    std::array<double, 3> rgb{1, 1, 1};
    bool operator==(const SetTint&) const = default;
};
struct SpawnObject {
    Cell cell;
    PaletteColor color{};
    bool operator==(const SpawnObject&) const = default;
};
using EventSpec = std::variant<SetTimeOfDay, SetTint, SpawnObject>;

inline WorldSpec apply_event(const WorldSpec& world, const EventSpec& event) {
    WorldSpec out = world;
    if (const auto* e = std::get_if<SetTimeOfDay>(&event)) {
        out.time_of_day = e->value;
    } else if (const auto* e = std::get_if<SetTint>(&event)) {
        out.tint = e->rgb;
    } else if (const auto* e = std::get_if<SpawnObject>(&event)) {
        LBW_REQUIRE(OccupancyGrid::inside(e->cell.x, e->cell.z), ErrorCode::out_of_bounds, "spawn cell outside arena");
        LBW_REQUIRE(world.cell_owner(e->cell.x, e->cell.z) == 0, ErrorCode::occupied_cell, "spawn cell is occupied");
        out.objects.push_back({e->cell, e->color});
    }
    return out;
}

// --- dynamics ---------------------------------------------------------------

inline CameraPose step_dynamics(const CameraPose& pose, const ActionState& a, double dt, const OccupancyGrid& grid) {
    LBW_REQUIRE(dt > 0, ErrorCode::invalid_argument, "dt must be positive");
    const YawPitch yp = yaw_pitch_of(pose.orientation);
    const double yaw = wrap_angle(yp.yaw + a.yaw_delta);
    const double pitch = std::clamp(yp.pitch + a.pitch_delta, -kMaxPitch, kMaxPitch);
    CameraPose out = pose;
    out.orientation = orientation_from_yaw_pitch(yaw, pitch);

    const double fwd = (a.has(key_w) ? 1.0 : 0.0) - (a.has(key_s) ? 1.0 : 0.0);
    const double strafe = (a.has(key_d) ? 1.0 : 0.0) - (a.has(key_a) ? 1.0 : 0.0);
    if (fwd != 0.0 || strafe != 0.0) {
        const Vec3 heading = forward_dir(yaw, 0.0);
        const Vec3 next = pose.position + (heading * fwd + right_dir(yaw) * strafe) * (kMoveSpeed * dt);
        if (grid.is_free(next, kClearance)) out.position = next;
    }
    return out;
}

inline CameraPose step_dynamics(const CameraPose& pose, const ActionState& a, double dt, const WorldSpec& world) {
    return step_dynamics(pose, a, dt, OccupancyGrid(world));
}

// --- rendering --------------------------------------------------------------

struct Frame {
    int height = 0, width = 0;
    std::vector<std::uint8_t> rgb;  // HWC

    bool operator==(const Frame&) const = default;
    const std::uint8_t* pixel(int v, int u) const { return &rgb[(static_cast<size_t>(v) * width + u) * 3]; }
};

enum class HitKind : std::uint8_t { sky, floor, pillar, object, wall };

struct Hit {
    HitKind kind = HitKind::sky;
    int index = -1;  // pillar / object index
    double distance = std::numeric_limits<double>::infinity();
    int face = 0;    // 0 x-face, 1 z-face, 2 top
    Vec3 point;
};

/// Traces one ray through the cell grid. Boxes span y in [0, height]; the arena
/// boundary behaves as a wall of kWallHeight.
inline Hit trace_ray(const OccupancyGrid& grid, const Vec3& o, const Vec3& d) {
    Hit hit;
    const double floor_s = d.y < 0 ? -o.y / d.y : std::numeric_limits<double>::infinity();
    auto box_height = [&](int owner, bool outside) {
        if (outside) return kWallHeight;
        return owner > 0 ? kPillarHeight : kObjectHeight;
    };
    auto classify = [&](int cx, int cz, Hit& h) {
        if (!OccupancyGrid::inside(cx, cz)) {
            h.kind = HitKind::wall;
            return;
        }
        const int owner = grid.owner(cx, cz);
        h.kind = owner > 0 ? HitKind::pillar : HitKind::object;
        h.index = owner > 0 ? owner - 1 : -owner - 1;
    };

    int cx = static_cast<int>(std::floor(o.x)), cz = static_cast<int>(std::floor(o.z));
    const int step_x = d.x > 0 ? 1 : -1, step_z = d.z > 0 ? 1 : -1;
    const double inf = std::numeric_limits<double>::infinity();
    const double delta_x = d.x != 0 ? std::abs(1.0 / d.x) : inf;
    const double delta_z = d.z != 0 ? std::abs(1.0 / d.z) : inf;
    double next_x = d.x != 0 ? ((d.x > 0 ? cx + 1 - o.x : o.x - cx) * delta_x) : inf;
    double next_z = d.z != 0 ? ((d.z > 0 ? cz + 1 - o.z : o.z - cz) * delta_z) : inf;
    double s_in = 0.0;
    int entry_face = 0;

    for (int iter = 0; iter < 4 * kArenaCells + 8; ++iter) {
        const double s_out = std::min(next_x, next_z);
        const bool outside = !OccupancyGrid::inside(cx, cz);
        const bool solid = outside || grid.owner(cx, cz) != 0;
        if (solid && iter > 0) {
            const double h = box_height(outside ? 0 : grid.owner(cx, cz), outside);
            const double y_in = o.y + s_in * d.y;
            if (y_in >= 0 && y_in <= h) {
                classify(cx, cz, hit);
                hit.distance = s_in;
                hit.face = entry_face;
                hit.point = o + d * s_in;
                return hit;
            }
            if (y_in > h && d.y < 0) {
                const double s_top = (h - o.y) / d.y;
                if (s_top <= s_out) {
                    classify(cx, cz, hit);
                    hit.distance = s_top;
                    hit.face = 2;
                    hit.point = o + d * s_top;
                    return hit;
                }
            }
            if (outside && y_in > h) break;  // above the boundary wall: sky
        }
        if (floor_s <= s_out) {
            hit.kind = HitKind::floor;
            hit.distance = floor_s;
            hit.point = o + d * floor_s;
            return hit;
        }
        if (outside && iter > 0 && d.y >= 0) break;
        s_in = s_out;
        if (next_x < next_z) {
            cx += step_x;
            next_x += delta_x;
            entry_face = 0;
        } else {
            cz += step_z;
            next_z += delta_z;
            entry_face = 1;
        }
    }
    hit.kind = HitKind::sky;
    return hit;
}

inline Intrinsics intrinsics_for(const CameraPose& pose, int height, int width) {
    const auto& k = pose.intrinsics;
    const double sx = width / (2.0 * k.cx), sy = height / (2.0 * k.cy);
    return {k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy};
}

inline bool inside_arena(const Vec3& p) {
    return p.x >= 0 && p.z >= 0 && p.x <= kArenaCells && p.z <= kArenaCells;
}

inline Hit hit_test(const WorldSpec& world, const CameraPose& pose, int height, int width, int u, int v) {
    LBW_REQUIRE(inside_arena(pose.position), ErrorCode::out_of_bounds, "pose outside arena");
    CameraPose p = pose;
    p.intrinsics = intrinsics_for(pose, height, width);
    return trace_ray(OccupancyGrid(world), p.position, pixel_ray(p, u + 0.5, v + 0.5));
}

/// "pillar-red", "object-blue", "floor", "sky", "wall".
inline std::string hit_label(const WorldSpec& world, const Hit& h) {
    switch (h.kind) {
    case HitKind::sky: return "sky";
    case HitKind::floor: return "floor";
    case HitKind::wall: return "wall";
    case HitKind::pillar: return std::string("pillar-") + kPaletteNames[static_cast<int>(world.pillars[h.index].color)];
    case HitKind::object: return std::string("object-") + kPaletteNames[static_cast<int>(world.objects[h.index].color)];
    }
    return "?";
}

inline std::array<std::array<double, 3>, 2> floor_palette(int id) {
    switch (id & 3) {
    case 0: return {{{0.55, 0.55, 0.55}, {0.30, 0.30, 0.32}}};
    case 1: return {{{0.60, 0.50, 0.35}, {0.35, 0.28, 0.20}}};
    case 2: return {{{0.40, 0.58, 0.40}, {0.22, 0.35, 0.22}}};
    default: return {{{0.58, 0.45, 0.50}, {0.30, 0.22, 0.28}}};
    }
}

inline std::array<double, 3> shade_hit(const WorldSpec& world, const Hit& h, const Vec3& dir) {
    std::array<double, 3> c{};
    const bool night = world.time_of_day == TimeOfDay::night;
    if (h.kind == HitKind::sky) {
        const double g = std::clamp(dir.y, 0.0, 1.0);
        c = night ? std::array<double, 3>{0.03, 0.04, 0.12 + 0.08 * g}
                  : std::array<double, 3>{0.55 + 0.2 * g, 0.72 + 0.15 * g, 0.95};
        for (int i = 0; i < 3; ++i) c[i] *= world.tint[i];
        return c;
    }
    if (h.kind == HitKind::floor) {
        const auto pal = floor_palette(world.floor_palette);
        const int parity = (static_cast<int>(std::floor(h.point.x)) + static_cast<int>(std::floor(h.point.z))) & 1;
        c = pal[parity];
    } else if (h.kind == HitKind::wall) {
        c = {0.45, 0.42, 0.40};
    } else if (h.kind == HitKind::pillar) {
        c = palette_rgb(world.pillars[h.index].color);
    } else {
        c = palette_rgb(world.objects[h.index].color);
    }
    const double face = h.kind == HitKind::floor ? 1.0 : (h.face == 0 ? 1.0 : (h.face == 1 ? 0.8 : 1.1));
    const double fog = 1.0 / (1.0 + 0.08 * h.distance);
    const double light = night ? 0.35 : 1.0;
    for (int i = 0; i < 3; ++i) c[i] = std::min(1.0, c[i] * face) * fog * light * world.tint[i];
    return c;
}

inline Frame render(const WorldSpec& world, const CameraPose& pose, int height, int width) {
    LBW_REQUIRE(height >= 1 && width >= 1, ErrorCode::invalid_argument, "frame size must be positive");
    LBW_REQUIRE(inside_arena(pose.position), ErrorCode::out_of_bounds, "pose outside arena");
    LBW_REQUIRE(pose.valid(), ErrorCode::invalid_pose, "invalid pose");
    const OccupancyGrid grid(world);
    CameraPose p = pose;
    p.intrinsics = intrinsics_for(pose, height, width);
    Frame f{height, width, std::vector<std::uint8_t>(static_cast<size_t>(height) * width * 3)};
    for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
            const Vec3 dir = pixel_ray(p, u + 0.5, v + 0.5);
            const Hit h = trace_ray(grid, p.position, dir);
            const auto c = shade_hit(world, h, dir);
            auto* px = &f.rgb[(static_cast<size_t>(v) * width + u) * 3];
            for (int i = 0; i < 3; ++i)
                px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(c[i], 0.0, 1.0) * 255.0));
        }
    }
    return f;
}

struct Rollout {
    std::vector<Frame> frames;
    std::vector<CameraPose> poses;
};

/// frames[i] renders the pose reached after applying actions[0..i].
inline Rollout rollout(const WorldSpec& world, const CameraPose& pose0, const std::vector<ActionState>& actions,
                       int height, int width, double frame_rate = kFrameRate, double time_scale = 1.0) {
    LBW_REQUIRE(!actions.empty(), ErrorCode::invalid_argument, "rollout needs at least one action");
    const OccupancyGrid grid(world);
    Rollout r;
    CameraPose pose = pose0;
    for (const auto& a : actions) {
        pose = step_dynamics(pose, a, time_scale / frame_rate, grid);
        r.poses.push_back(pose);
        r.frames.push_back(render(world, pose, height, width));
    }
    return r;
}

inline double mean_luminance(const Frame& f) {
    double s = 0;
    for (auto b : f.rgb) s += b;
    return s / (255.0 * static_cast<double>(f.rgb.size()));
}

}  // namespace lbw
