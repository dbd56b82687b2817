// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "lbw/trajectory.hpp"

using namespace lbw;

namespace {

CameraPose identity_pose(Vec3 at = {}) {
    return CameraPose{at, Quat{}, Intrinsics{4, 4, 2.5, 2.5}};
}

CameraPose random_pose(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1, 1);
    Quat q{u(rng), u(rng), u(rng), u(rng)};
    std::uniform_real_distribution<double> f(10, 200);
    const double w = 8 + (rng() % 57), h = 8 + (rng() % 57);
    return CameraPose{{10 * u(rng), 10 * u(rng), 10 * u(rng)}, q.normalized(), Intrinsics{f(rng), f(rng), w / 2, h / 2}};
}

}  // namespace

TEST(Plucker, PrincipalPixelAtOrigin) {
    const auto map = plucker_embed(identity_pose(), 5, 5);
    const double* p = map.at(2, 2);
    EXPECT_NEAR(p[0], 0, 1e-12);
    EXPECT_NEAR(p[1], 0, 1e-12);
    EXPECT_NEAR(p[2], 1, 1e-12);
    for (int c = 3; c < 6; ++c) EXPECT_EQ(p[c], 0.0);
}

TEST(Plucker, MomentVanishesAtOrigin) {
    CameraPose pose = identity_pose();
    pose.orientation = orientation_from_yaw_pitch(0.7, -0.2);
    const auto map = plucker_embed(pose, 6, 7);
    for (size_t i = 0; i < map.data.size(); i += 6)
        for (int c = 3; c < 6; ++c) EXPECT_EQ(map.data[i + c], 0.0);
}

TEST(Plucker, TranslatedCameraMoment) {
    const auto map = plucker_embed(identity_pose({1, 0, 0}), 5, 5);
    const double* p = map.at(2, 2);
    EXPECT_NEAR(p[2], 1, 1e-12);
    EXPECT_NEAR(p[3], 0, 1e-12);
    EXPECT_NEAR(p[4], -1, 1e-12);
    EXPECT_NEAR(p[5], 0, 1e-12);
}

TEST(Plucker, RejectsNonFiniteIntrinsics) {
    CameraPose pose = identity_pose();
    pose.intrinsics.fx = std::numeric_limits<double>::quiet_NaN();
    try {
        plucker_embed(pose, 2, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::invalid_pose);
    }
}

TEST(Plucker, OrthogonalUnitRaysOverRandomPoses) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const CameraPose pose = random_pose(rng);
        const auto map = plucker_embed(pose, 9, 11);
        for (size_t i = 0; i < map.data.size(); i += 6) {
            const Vec3 d{map.data[i], map.data[i + 1], map.data[i + 2]};
            const Vec3 m{map.data[i + 3], map.data[i + 4], map.data[i + 5]};
            ASSERT_NEAR(d.norm(), 1.0, 1e-5);
            ASSERT_NEAR(d.dot(m), 0.0, 1e-5);
        }
    }
}

TEST(Plucker, InvariantAlongPrincipalRay) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        CameraPose pose = random_pose(rng);
        pose.intrinsics = {50, 50, 4.5, 4.5};
        const auto a = plucker_embed(pose, 9, 9);
        const Vec3 d{a.at(4, 4)[0], a.at(4, 4)[1], a.at(4, 4)[2]};
        pose.position = pose.position + d * 3.7;
        const auto b = plucker_embed(pose, 9, 9);
        for (int c = 0; c < 6; ++c) EXPECT_NEAR(a.at(4, 4)[c], b.at(4, 4)[c], 1e-6);
    }
}

TEST(RectPath, FrameCountAndClosure) {
    const auto t = gen_rect_path(4, 1, 8, 7);
    int moves = 0, turns = 0;
    for (size_t i = 1; i < t.size(); ++i) (t.actions[i].keys ? moves : turns)++;
    EXPECT_EQ(moves, 128);
    EXPECT_EQ(turns, 8);
    EXPECT_EQ(t.size(), 137u);
    EXPECT_LE((t.poses.back().position - t.poses.front().position).norm(), 1e-6);
    const double dyaw = wrap_angle(yaw_pitch_of(t.poses.back().orientation).yaw - yaw_pitch_of(t.poses.front().orientation).yaw);
    EXPECT_LE(std::abs(dyaw), 1e-5);
}

TEST(RectPath, HeadingTangentAndReplayable) {
    const auto t = gen_rect_path(3, 2, 8, 99);
    for (size_t i = 1; i < t.size(); ++i) {
        if (!t.actions[i].keys) continue;
        const Vec3 d = t.poses[i].position - t.poses[i - 1].position;
        const double yaw = yaw_pitch_of(t.poses[i].orientation).yaw;
        EXPECT_NEAR(d.normalized().dot(forward_dir(yaw, 0)), 1.0, 1e-9);
    }
    EXPECT_LE(replay_error(t, build_empty_world(99)), 1e-5);
}

TEST(RectPath, ManySeedsCollisionFreeAndClosed) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto t = gen_rect_path(2 + (seed % 5), 1, 8, seed);
        ASSERT_TRUE(check_collision(t, build_empty_world(seed), kClearance).ok()) << seed;
        ASSERT_LE((t.poses.back().position - t.poses.front().position).norm(), 1e-6);
    }
}

TEST(RotationPath, OneTurn) {
    const auto t = gen_rotation_path(1, std::numbers::pi / 2, 8, 3);
    EXPECT_EQ(t.size() - 1, 32u);
    const double a = yaw_pitch_of(t.poses.front().orientation).yaw;
    const double b = yaw_pitch_of(t.poses.back().orientation).yaw;
    EXPECT_LE(std::abs(wrap_angle(a - b)), 1e-5);
    for (const auto& p : t.poses) EXPECT_EQ((p.position - t.poses[0].position).norm(), 0.0);
}

TEST(RotationPath, ThreeTurnsSweep) {
    const auto t = gen_rotation_path(3, 1.3, 8, 3);
    EXPECT_NEAR(unwrapped_yaw_sweep(t), 6 * std::numbers::pi, 1e-5);
    EXPECT_LE(replay_error(t, build_empty_world(3)), 1e-5);
}

TEST(WaypointPath, StraightLegIsMonotone) {
    const WorldSpec w = build_world(4);
    const auto t = gen_waypoint_path(2, 0.0, w, 21);
    const Vec3 dir = (t.poses.back().position - t.poses.front().position).normalized();
    double last = -1;
    for (const auto& p : t.poses) {
        const double s = (p.position - t.poses.front().position).dot(dir);
        EXPECT_GE(s, last);
        last = s;
    }
    for (const auto& a : t.actions) EXPECT_EQ(a.yaw_delta, 0.0);
}

TEST(WaypointPath, LookbackSegmentsCounted) {
    const WorldSpec w = build_world(1);
    const auto t = gen_waypoint_path(5, 1.0, w, 3);
    int lookbacks = 0;
    for (const auto& s : t.segments) lookbacks += s.kind == SegmentKind::lookback;
    EXPECT_EQ(lookbacks, 4);
    EXPECT_TRUE(check_collision(t, w, kClearance).ok());
    EXPECT_LE(replay_error(t, w), 1e-5);
}

TEST(WaypointPath, ExhaustedSampling) {
    WorldSpec w = build_world(0);
    // fill the arena so no waypoint has clearance
    w.pillars.clear();
    for (int z = 0; z < kArenaCells; z += 2)
        for (int x = 0; x < kArenaCells; x += 2) w.pillars.push_back({{x, z}, PaletteColor::red});
    try {
        gen_waypoint_path(3, 0, w, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::sampling_exhausted);
    }
}

TEST(PoseLog, RoundTrip) {
    const auto t = gen_rect_path(2, 1, 8, 5);
    const auto back = import_trajectory(export_trajectory(t));
    ASSERT_EQ(back.size(), t.size());
    for (size_t i = 0; i < t.size(); ++i) {
        EXPECT_LE((back.poses[i].position - t.poses[i].position).norm(), 1e-6);
        EXPECT_NEAR(back.timestamps[i], t.timestamps[i], 1e-12);
    }
}

TEST(PoseLog, DuplicateTimestampRejected) {
    const std::string log = "0 1 0.5 1 1 0 0 0\n0.125 1 0.5 1.2 1 0 0 0\n0.125 1 0.5 1.4 1 0 0 0\n";
    try {
        import_trajectory(log);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::non_monotone_timestamps);
    }
}

TEST(PoseLog, ParseErrorCarriesLineNumber) {
    try {
        import_trajectory("# header\n0 1 2 3 1 0 0 0\n0.1 1 2 x 1 0 0 0\n");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::parse_error);
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
}

TEST(PoseLog, InverseDynamicsReplaysWithinOneStep) {
    // identity orientation faces +z; jittery forward motion
    const std::string log =
        "0.0 10 0.5 10 1 0 0 0\n"
        "0.125 10.02 0.5 10.23 1 0 0 0\n"
        "0.25 9.99 0.5 10.51 1 0 0 0\n";
    const auto t = import_trajectory(log);
    EXPECT_EQ(t.actions[1].keys, key_w);
    EXPECT_EQ(t.actions[2].keys, key_w);
    const auto replayed = replay(t, build_empty_world(0));
    const double step = kMoveSpeed * 0.125;
    for (size_t i = 0; i < t.size(); ++i) EXPECT_LE((replayed[i].position - t.poses[i].position).norm(), step);
}

TEST(Collision, EmptyWorldAlwaysClear) {
    const auto t = gen_rotation_path(1, 1.0, 8, 1);
    EXPECT_TRUE(check_collision(t, build_empty_world(1), 0.3).ok());
}

namespace {
Trajectory straight_line(Vec3 from, Vec3 to, int n) {
    Trajectory t;
    for (int i = 0; i <= n; ++i) {
        t.poses.push_back(make_pose(from + (to - from) * (static_cast<double>(i) / n), 0, 0, default_intrinsics()));
        t.timestamps.push_back(i / 8.0);
        t.actions.push_back({});
    }
    return t;
}
}  // namespace

TEST(Collision, ThroughPillarReportsTraversal) {
    WorldSpec w = build_empty_world(0);
    w.pillars.push_back({{10, 10}, PaletteColor::red});
    // z = 10.5 line through the cell [10,11] x [10,11]; samples every 0.1
    const auto t = straight_line({8.0, 0.5, 10.5}, {13.0, 0.5, 10.5}, 50);
    const auto report = check_collision(t, w, 0.3);
    std::vector<int> expected;
    for (int i = 0; i <= 50; ++i) {
        const double x = t.poses[i].position.x;
        const double dist = std::max({10.0 - x, 0.0, x - 11.0});
        if (dist < 0.3) expected.push_back(i);
    }
    EXPECT_EQ(report.frames, expected);
    EXPECT_FALSE(expected.empty());
}

TEST(Collision, OffsetPathIsClear) {
    WorldSpec w = build_empty_world(0);
    w.pillars.push_back({{10, 10}, PaletteColor::red});
    const double eps = 1e-3;
    const auto t = straight_line({8.0, 0.5, 11.0 + 0.3 + eps}, {13.0, 0.5, 11.0 + 0.3 + eps}, 50);
    EXPECT_TRUE(check_collision(t, w, 0.3).ok());
}
