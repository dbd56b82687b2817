// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lbw/error.hpp"
#include "lbw/trajectory.hpp"
#include "lbw/world.hpp"

namespace lbw {

struct FilterAttributes {
    double brightness = 0;
    double sharpness = 0;
    double motion_magnitude = 0;
    double duration = 0;
    int height = 0, width = 0;
    std::string perspective = "first_person";

    bool operator==(const FilterAttributes&) const = default;
};

struct DenseSegment {
    double start_time = 0, end_time = 0;
    std::string event;
    std::string caption;
    bool operator==(const DenseSegment&) const = default;
};

struct CaptionSet {
    std::string narrative;
    std::string scene_static;
    std::vector<DenseSegment> dense_temporal;
    bool operator==(const CaptionSet&) const = default;
};

struct TimedEvent {
    int frame = 0;  // takes effect from this frame on
    EventSpec event;
    bool operator==(const TimedEvent&) const = default;
};

struct ClipRecord {
    std::vector<Frame> frames;
    Trajectory trajectory;
    FilterAttributes attributes;
    CaptionSet captions;
    std::uint64_t world_seed = 0;
    bool pillars = true;  // false: build_empty_world(world_seed)
    std::vector<TimedEvent> events;

    bool operator==(const ClipRecord&) const = default;
};

// --- profiling --------------------------------------------------------------

inline double pixel_luminance(const std::uint8_t* p) { return (p[0] + p[1] + p[2]) / (3.0 * 255.0); }

inline FilterAttributes profile_clip(const std::vector<Frame>& frames, const std::vector<double>& timestamps) {
    LBW_REQUIRE(frames.size() >= 2, ErrorCode::insufficient_frames, "profiling needs at least two frames");
    LBW_REQUIRE(timestamps.size() == frames.size(), ErrorCode::invalid_argument, "one timestamp per frame");
    const int h = frames[0].height, w = frames[0].width;
    for (const auto& f : frames)
        LBW_REQUIRE(f.height == h && f.width == w, ErrorCode::resolution_mismatch, "frames differ in size");
    FilterAttributes a;
    a.height = h, a.width = w;
    const size_t px = static_cast<size_t>(h) * w;
    std::vector<double> lum(px);
    double bright = 0, sharp = 0;
    for (const auto& f : frames) {
        for (size_t i = 0; i < px; ++i) lum[i] = pixel_luminance(&f.rgb[i * 3]);
        double b = 0, s = 0;
        for (int v = 0; v < h; ++v)
            for (int u = 0; u < w; ++u) {
                const double c = lum[static_cast<size_t>(v) * w + u];
                b += c;
                const double gx = u + 1 < w ? lum[static_cast<size_t>(v) * w + u + 1] - c : 0.0;
                const double gy = v + 1 < h ? lum[static_cast<size_t>(v + 1) * w + u] - c : 0.0;
                s += std::sqrt(gx * gx + gy * gy);
            }
        bright += b / static_cast<double>(px);
        sharp += s / static_cast<double>(px);
    }
    a.brightness = bright / static_cast<double>(frames.size());
    a.sharpness = sharp / static_cast<double>(frames.size());
    double motion = 0;
    for (size_t k = 1; k < frames.size(); ++k) {
        double m = 0;
        for (size_t i = 0; i < frames[k].rgb.size(); ++i) m += std::abs(int(frames[k].rgb[i]) - int(frames[k - 1].rgb[i]));
        motion += m / (255.0 * static_cast<double>(frames[k].rgb.size()));
    }
    a.motion_magnitude = motion / static_cast<double>(frames.size() - 1);
    const double span = timestamps.back() - timestamps.front();
    LBW_REQUIRE(span > 0, ErrorCode::non_monotone_timestamps, "timestamps do not advance");
    // each frame covers one interval, so n frames last n * mean interval
    a.duration = span * static_cast<double>(frames.size()) / static_cast<double>(frames.size() - 1);
    return a;
}

/// Sum |a - b| over sum (a + b): 0 for identical frames, 1 for disjoint
/// support, unchanged when both frames are scaled by the same factor.
inline double normalized_difference(const Frame& a, const Frame& b) {
    LBW_REQUIRE(a.rgb.size() == b.rgb.size(), ErrorCode::resolution_mismatch, "frames differ in size");
    std::uint64_t num = 0, den = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        num += static_cast<std::uint64_t>(std::abs(int(a.rgb[i]) - int(b.rgb[i])));
        den += static_cast<std::uint64_t>(a.rgb[i]) + b.rgb[i];
    }
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

struct FrameRange {
    int first = 0, last = 0;  // [first, last)
    int size() const { return last - first; }
    bool operator==(const FrameRange&) const = default;
};

inline std::vector<FrameRange> slice_clips(const std::vector<Frame>& frames, double cut_threshold, int min_len) {
    LBW_REQUIRE(!frames.empty(), ErrorCode::insufficient_frames, "slicing needs at least one frame");
    std::vector<FrameRange> out;
    int begin = 0;
    const int n = static_cast<int>(frames.size());
    for (int i = 1; i <= n; ++i) {
        if (i == n || normalized_difference(frames[i - 1], frames[i]) > cut_threshold) {
            if (i - begin >= min_len) out.push_back({begin, i});
            begin = i;
        }
    }
    return out;
}

struct FilterThresholds {
    int min_height = 64, min_width = 64;
    double min_duration = 2.0;
    double min_brightness = 0.0, max_brightness = 1.0;
    double min_sharpness = 0.0;
    double min_motion = 0.0;
};

struct FilterDecision {
    bool keep = true;
    std::string reason;  // failing attribute when dropped
};

inline FilterDecision filter_clip(const FilterAttributes& a, const FilterThresholds& t = {}) {
    if (a.height < t.min_height || a.width < t.min_width) return {false, "resolution"};
    if (a.duration < t.min_duration) return {false, "duration"};
    if (a.brightness < t.min_brightness || a.brightness > t.max_brightness) return {false, "brightness"};
    if (a.sharpness < t.min_sharpness) return {false, "sharpness"};
    if (a.motion_magnitude < t.min_motion) return {false, "motion"};
    return {true, {}};
}

// --- world state along a clip -----------------------------------------------

inline WorldSpec clip_world(std::uint64_t seed, bool pillars) { return pillars ? build_world(seed) : build_empty_world(seed); }

/// World after applying every event scheduled at or before `frame`.
inline WorldSpec world_at(const ClipRecord& clip, int frame) {
    WorldSpec w = clip_world(clip.world_seed, clip.pillars);
    std::vector<TimedEvent> events = clip.events;
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
    for (const auto& e : events)
        if (e.frame <= frame) w = apply_event(w, e.event);
    return w;
}

// --- captions ---------------------------------------------------------------

inline constexpr std::array<const char*, 5> kMotionBlacklist{"moves", "pans", "turns", "forward", "approaches"};

inline const char* floor_name(int palette) {
    static constexpr const char* names[4] = {"grey stone", "sandy", "mossy", "slate"};
    return names[((palette % 4) + 4) % 4];
}

/// Lower-cased alphabetic words of `text`.
inline std::vector<std::string> caption_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

inline bool mentions_motion(const std::string& text) {
    for (const auto& w : caption_words(text))
        for (const char* b : kMotionBlacklist)
            if (w == b) return true;
    return false;
}

/// Static description of world contents. Also the text prompt for a frame.
inline std::string describe_scene(const WorldSpec& w) {
    std::ostringstream os;
    os << "A walled courtyard with a " << floor_name(w.floor_palette) << " floor "
       << (w.time_of_day == TimeOfDay::night ? "at night" : "in daylight");
    if (w.tint != std::array<double, 3>{1, 1, 1}) os << " under tinted light";
    os << ".";
    std::map<std::string, int> counts;
    for (const auto& p : w.pillars) counts[kPaletteNames[static_cast<int>(p.color)]]++;
    if (!counts.empty()) {
        os << " There are";
        bool first = true;
        for (const auto& [name, n] : counts) {
            os << (first ? " " : ", ") << n << ' ' << name << (n == 1 ? " pillar" : " pillars");
            first = false;
        }
        os << ".";
    }
    for (const auto& o : w.objects) os << " A " << kPaletteNames[static_cast<int>(o.color)] << " crate sits on the floor.";
    return os.str();
}

inline std::string frame_prompt(const ClipRecord& clip, int frame) { return describe_scene(world_at(clip, frame)); }

namespace detail {

inline std::string view_phrase(const WorldSpec& w, const CameraPose& pose) {
    const Hit h = hit_test(w, pose, 32, 32, 16, 16);
    const std::string label = hit_label(w, h);
    if (label.rfind("pillar-", 0) == 0) return "a " + label.substr(7) + " pillar";
    if (label.rfind("object-", 0) == 0) return "a " + label.substr(7) + " crate";
    if (label == "wall") return "the courtyard wall";
    if (label == "floor") return "open floor";
    return "the sky";
}

struct LegSummary {
    int first = 0, last = 0;
    int move_frames = 0;
    double yaw = 0;
    bool lookback = false;
};

}  // namespace detail

inline CaptionSet make_captions(const ClipRecord& clip) {
    const Trajectory& t = clip.trajectory;
    LBW_REQUIRE(t.size() >= 1, ErrorCode::invalid_argument, "captioning needs a trajectory");
    CaptionSet cs;
    const WorldSpec w0 = world_at(clip, 0);
    cs.scene_static = describe_scene(w0);

    std::vector<detail::LegSummary> legs(static_cast<size_t>(std::max(t.leg_count(), 1)));
    for (auto& l : legs) l.first = -1;
    if (t.segments.empty()) legs[0] = {0, static_cast<int>(t.size()) - 1, 0, 0, false};
    for (const auto& s : t.segments) {
        auto& l = legs[static_cast<size_t>(s.leg)];
        if (l.first < 0) l.first = s.first;
        l.last = std::max(l.last, s.last);
        for (int i = std::max(s.first, 1); i <= s.last; ++i) {
            l.move_frames += (t.actions[static_cast<size_t>(i)].keys & 0xF) != 0;
            l.yaw += t.actions[static_cast<size_t>(i)].yaw_delta;
        }
        l.lookback |= s.kind == SegmentKind::lookback;
    }
    std::erase_if(legs, [](const detail::LegSummary& l) { return l.first < 0; });

    std::ostringstream narrative;
    narrative << cs.scene_static;
    const double step = kMoveSpeed * t.time_scale / t.frame_rate;
    for (size_t k = 0; k < legs.size(); ++k) {
        const auto& l = legs[k];
        const WorldSpec wl = world_at(clip, l.last);
        const std::string seen = detail::view_phrase(wl, t.poses[static_cast<size_t>(l.last)]);
        std::string event, caption;
        const double deg = l.yaw * 180.0 / std::numbers::pi;
        std::ostringstream ev, cap;
        ev.precision(3);
        cap.precision(3);
        if (l.move_frames > 0 && std::abs(deg) > 1e-6) {
            ev << "turn " << (deg > 0 ? "right" : "left") << " and walk";
            cap << "The camera turns " << (deg > 0 ? "right" : "left") << " by " << std::abs(deg)
                << " degrees and moves forward " << l.move_frames * step << " units toward " << seen << ".";
        } else if (l.move_frames > 0) {
            ev << "walk";
            cap << "The camera moves forward " << l.move_frames * step << " units toward " << seen << ".";
        } else if (std::abs(deg) > 1e-6) {
            ev << "pan " << (deg > 0 ? "right" : "left");
            cap << "The camera pans " << (deg > 0 ? "right" : "left") << " by " << std::abs(deg)
                << " degrees, ending on " << seen << ".";
        } else {
            ev << "hold";
            cap << "The camera holds still on " << seen << ".";
        }
        if (l.lookback) {
            ev << " then look back";
            cap << " It then turns back toward where it came from.";
        }
        narrative << ' ' << cap.str();
        DenseSegment d;
        d.start_time = static_cast<double>(l.first) / t.frame_rate;
        d.end_time = k + 1 == legs.size() ? t.duration() : static_cast<double>(legs[k + 1].first) / t.frame_rate;
        d.event = ev.str();
        d.caption = cap.str();
        cs.dense_temporal.push_back(std::move(d));
    }
    for (const auto& e : clip.events) {
        narrative << " At " << e.frame / t.frame_rate << " s ";
        if (const auto* tod = std::get_if<SetTimeOfDay>(&e.event))
            narrative << (tod->value == TimeOfDay::night ? "night falls." : "day breaks.");
        else if (std::get_if<SetTint>(&e.event))
            narrative << "the light changes color.";
        else if (const auto* sp = std::get_if<SpawnObject>(&e.event))
            narrative << "a " << kPaletteNames[static_cast<int>(sp->color)] << " crate appears.";
    }
    cs.narrative = narrative.str();
    return cs;
}

inline nlohmann::json to_json(const CaptionSet& c) {
    nlohmann::json dense = nlohmann::json::array();
    for (const auto& d : c.dense_temporal)
        dense.push_back({{"start_time", d.start_time}, {"end_time", d.end_time}, {"Event", d.event}, {"caption", d.caption}});
    return {{"narrative", c.narrative}, {"scene_static", c.scene_static}, {"dense_temporal", dense}};
}

inline CaptionSet captions_from_json(const nlohmann::json& j) {
    CaptionSet c;
    try {
        c.narrative = j.at("narrative").get<std::string>();
        c.scene_static = j.at("scene_static").get<std::string>();
        for (const auto& d : j.at("dense_temporal"))
            c.dense_temporal.push_back({d.at("start_time").get<double>(), d.at("end_time").get<double>(),
                                        d.at("Event").get<std::string>(), d.at("caption").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("caption json: ") + e.what());
    }
    return c;
}

inline nlohmann::json to_json(const FilterAttributes& a) {
    return {{"brightness", a.brightness}, {"sharpness", a.sharpness}, {"motion_magnitude", a.motion_magnitude},
            {"duration", a.duration},     {"height", a.height},       {"width", a.width},
            {"perspective", a.perspective}};
}

// --- clip generation --------------------------------------------------------

struct ClipSpec {
    TrajectoryKind kind = TrajectoryKind::waypoint;
    std::uint64_t seed = 0;
    int height = 64, width = 64;
    double frame_rate = kFrameRate;
    // rect
    double rect_scale = 4, rect_speed = 1;
    // rotation
    int turns = 1;
    double angular_speed = 0;  // 0: sample log-uniformly
    // waypoint
    int waypoints = 4;
    double lookback_prob = 0.3;
    std::vector<TimedEvent> events;
};

inline std::vector<Frame> render_clip(const ClipRecord& clip, int height, int width) {
    std::vector<Frame> frames;
    frames.reserve(clip.trajectory.size());
    WorldSpec w = clip_world(clip.world_seed, clip.pillars);
    size_t next_event = 0;
    std::vector<TimedEvent> events = clip.events;
    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
    for (size_t i = 0; i < clip.trajectory.size(); ++i) {
        while (next_event < events.size() && events[next_event].frame <= static_cast<int>(i))
            w = apply_event(w, events[next_event++].event);
        frames.push_back(render(w, clip.trajectory.poses[i], height, width));
    }
    return frames;
}

inline ClipRecord generate_clip(const ClipSpec& spec) {
    ClipRecord c;
    c.world_seed = spec.seed;
    c.events = spec.events;
    const WorldSpec world = build_world(spec.seed);
    std::mt19937_64 rng(spec.seed ^ 0xC11F'0000'0000'0001ULL);
    switch (spec.kind) {
    case TrajectoryKind::rect:
        c.trajectory = gen_rect_path(spec.rect_scale, spec.rect_speed, spec.frame_rate, spec.seed, &world);
        break;
    case TrajectoryKind::rotation: {
        const double w = spec.angular_speed > 0 ? spec.angular_speed : sample_angular_speed(rng);
        c.trajectory = gen_rotation_path(spec.turns, w, spec.frame_rate, spec.seed);
        break;
    }
    case TrajectoryKind::waypoint:
        c.trajectory = gen_waypoint_path(spec.waypoints, spec.lookback_prob, world, spec.seed, spec.frame_rate);
        break;
    default: throw Error(ErrorCode::invalid_argument, "cannot generate trajectories of this kind");
    }
    c.frames = render_clip(c, spec.height, spec.width);
    if (c.frames.size() >= 2) c.attributes = profile_clip(c.frames, c.trajectory.timestamps);
    c.captions = make_captions(c);
    return c;
}

inline TrajectoryKind trajectory_kind_from_string(const std::string& s) {
    for (auto k : {TrajectoryKind::rect, TrajectoryKind::rotation, TrajectoryKind::waypoint, TrajectoryKind::imported,
                   TrajectoryKind::gameplay})
        if (s == to_string(k)) return k;
    throw Error(ErrorCode::invalid_argument, "unknown trajectory kind '" + s + "'");
}

// --- shards -----------------------------------------------------------------
//
// "LBW1" | u32 version | u32 count | u64 offset[count] | records | u32 crc32
// Each record is u64 length + payload. The trailing crc covers every byte
// before it. All integers little-endian, doubles as IEEE-754 bit patterns.

inline constexpr std::uint32_t kShardVersion = 1;

struct ShardManifest {
    std::uint32_t version = kShardVersion;
    std::uint32_t count = 0;
    std::vector<std::uint64_t> offsets;
    bool operator==(const ShardManifest&) const = default;
};

namespace detail {

class ByteWriter {
public:
    std::vector<std::uint8_t> buf;

    void u8(std::uint8_t v) { buf.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void bytes(const std::vector<std::uint8_t>& b) {
        u64(b.size());
        buf.insert(buf.end(), b.begin(), b.end());
    }
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* p, size_t n) : p_(p), n_(n) {}

    size_t remaining() const { return n_ - pos_; }
    std::uint8_t u8() { return take(1)[0]; }
    std::uint32_t u32() {
        const auto* b = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const auto* b = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        const auto* b = take(n);
        return {reinterpret_cast<const char*>(b), n};
    }
    std::vector<std::uint8_t> bytes() {
        const std::uint64_t n = u64();
        LBW_REQUIRE(n <= remaining(), ErrorCode::truncated_file, "byte block runs past the end of its record");
        const auto* b = take(static_cast<size_t>(n));
        return {b, b + n};
    }

private:
    const std::uint8_t* take(size_t k) {
        LBW_REQUIRE(k <= remaining(), ErrorCode::truncated_file, "record ends early");
        const auto* b = p_ + pos_;
        pos_ += k;
        return b;
    }
    const std::uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
};

inline void write_pose(ByteWriter& w, const CameraPose& p) {
    for (double v : {p.position.x, p.position.y, p.position.z, p.orientation.w, p.orientation.x, p.orientation.y,
                     p.orientation.z, p.intrinsics.fx, p.intrinsics.fy, p.intrinsics.cx, p.intrinsics.cy})
        w.f64(v);
}

inline CameraPose read_pose(ByteReader& r) {
    CameraPose p;
    p.position = {r.f64(), r.f64(), r.f64()};
    p.orientation.w = r.f64();
    p.orientation.x = r.f64();
    p.orientation.y = r.f64();
    p.orientation.z = r.f64();
    p.intrinsics.fx = r.f64();
    p.intrinsics.fy = r.f64();
    p.intrinsics.cx = r.f64();
    p.intrinsics.cy = r.f64();
    return p;
}

inline void write_event(ByteWriter& w, const TimedEvent& e) {
    w.i32(e.frame);
    if (const auto* t = std::get_if<SetTimeOfDay>(&e.event)) {
        w.u8(0);
        w.u8(static_cast<std::uint8_t>(t->value));
    } else if (const auto* t = std::get_if<SetTint>(&e.event)) {
        w.u8(1);
        for (double c : t->rgb) w.f64(c);
    } else if (const auto* s = std::get_if<SpawnObject>(&e.event)) {
        w.u8(2);
        w.i32(s->cell.x);
        w.i32(s->cell.z);
        w.u8(static_cast<std::uint8_t>(s->color));
    }
}

inline TimedEvent read_event(ByteReader& r) {
    TimedEvent e;
    e.frame = r.i32();
    switch (r.u8()) {
    case 0: e.event = SetTimeOfDay{static_cast<TimeOfDay>(r.u8())}; break;
    case 1: {
        SetTint t;
        for (double& c : t.rgb) c = r.f64();
        e.event = t;
        break;
    }
    case 2: {
        SpawnObject s;
        s.cell.x = r.i32();
        s.cell.z = r.i32();
        s.color = static_cast<PaletteColor>(r.u8());
        e.event = s;
        break;
    }
    default: throw Error(ErrorCode::parse_error, "unknown event tag in shard");
    }
    return e;
}

inline std::vector<std::uint8_t> encode_record(const ClipRecord& c) {
    ByteWriter w;
    w.u64(c.world_seed);
    w.u8(c.pillars ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(c.events.size()));
    for (const auto& e : c.events) write_event(w, e);

    const Trajectory& t = c.trajectory;
    w.u8(static_cast<std::uint8_t>(t.kind));
    w.f64(t.frame_rate);
    w.f64(t.time_scale);
    w.u32(static_cast<std::uint32_t>(t.size()));
    for (size_t i = 0; i < t.size(); ++i) {
        write_pose(w, t.poses[i]);
        w.f64(t.timestamps[i]);
        const auto& a = t.actions[i];
        w.u8(a.keys);
        w.f64(a.yaw_delta);
        w.f64(a.pitch_delta);
        w.f64(a.timestamp);
    }
    w.u32(static_cast<std::uint32_t>(t.segments.size()));
    for (const auto& s : t.segments) {
        w.u8(static_cast<std::uint8_t>(s.kind));
        w.i32(s.first);
        w.i32(s.last);
        w.i32(s.leg);
    }

    w.u32(static_cast<std::uint32_t>(c.frames.size()));
    for (const auto& f : c.frames) {
        w.i32(f.height);
        w.i32(f.width);
        w.bytes(f.rgb);
    }

    const auto& a = c.attributes;
    w.f64(a.brightness);
    w.f64(a.sharpness);
    w.f64(a.motion_magnitude);
    w.f64(a.duration);
    w.i32(a.height);
    w.i32(a.width);
    w.str(a.perspective);

    w.str(c.captions.narrative);
    w.str(c.captions.scene_static);
    w.u32(static_cast<std::uint32_t>(c.captions.dense_temporal.size()));
    for (const auto& d : c.captions.dense_temporal) {
        w.f64(d.start_time);
        w.f64(d.end_time);
        w.str(d.event);
        w.str(d.caption);
    }
    return std::move(w.buf);
}

inline ClipRecord decode_record(ByteReader& r) {
    ClipRecord c;
    c.world_seed = r.u64();
    c.pillars = r.u8() != 0;
    const std::uint32_t n_events = r.u32();
    for (std::uint32_t i = 0; i < n_events; ++i) c.events.push_back(read_event(r));

    Trajectory& t = c.trajectory;
    t.kind = static_cast<TrajectoryKind>(r.u8());
    t.frame_rate = r.f64();
    t.time_scale = r.f64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        t.poses.push_back(read_pose(r));
        t.timestamps.push_back(r.f64());
        ActionState a;
        a.keys = r.u8();
        a.yaw_delta = r.f64();
        a.pitch_delta = r.f64();
        a.timestamp = r.f64();
        t.actions.push_back(a);
    }
    const std::uint32_t n_seg = r.u32();
    for (std::uint32_t i = 0; i < n_seg; ++i) {
        Segment s;
        s.kind = static_cast<SegmentKind>(r.u8());
        s.first = r.i32();
        s.last = r.i32();
        s.leg = r.i32();
        t.segments.push_back(s);
    }

    const std::uint32_t n_frames = r.u32();
    for (std::uint32_t i = 0; i < n_frames; ++i) {
        Frame f;
        f.height = r.i32();
        f.width = r.i32();
        f.rgb = r.bytes();
        c.frames.push_back(std::move(f));
    }

    auto& a = c.attributes;
    a.brightness = r.f64();
    a.sharpness = r.f64();
    a.motion_magnitude = r.f64();
    a.duration = r.f64();
    a.height = r.i32();
    a.width = r.i32();
    a.perspective = r.str();

    c.captions.narrative = r.str();
    c.captions.scene_static = r.str();
    const std::uint32_t n_dense = r.u32();
    for (std::uint32_t i = 0; i < n_dense; ++i) {
        DenseSegment d;
        d.start_time = r.f64();
        d.end_time = r.f64();
        d.event = r.str();
        d.caption = r.str();
        c.captions.dense_temporal.push_back(std::move(d));
    }
    return c;
}

inline std::uint32_t crc32_of(const std::uint8_t* p, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_shard(const std::vector<ClipRecord>& records, ShardManifest* manifest = nullptr) {
    LBW_REQUIRE(!records.empty(), ErrorCode::invalid_argument, "a shard needs at least one record");
    detail::ByteWriter w;
    for (char ch : {'L', 'B', 'W', '1'}) w.u8(static_cast<std::uint8_t>(ch));
    w.u32(kShardVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    const size_t table = w.buf.size();
    for (size_t i = 0; i < records.size(); ++i) w.u64(0);
    ShardManifest m;
    m.count = static_cast<std::uint32_t>(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        const std::uint64_t off = w.buf.size();
        m.offsets.push_back(off);
        for (int b = 0; b < 8; ++b) w.buf[table + i * 8 + b] = static_cast<std::uint8_t>(off >> (8 * b));
        w.bytes(detail::encode_record(records[i]));
    }
    w.u32(detail::crc32_of(w.buf.data(), w.buf.size()));
    if (manifest) *manifest = m;
    return std::move(w.buf);
}

inline constexpr size_t kShardMinSize = 4 + 4 + 4 + 4;

inline ShardManifest decode_manifest(const std::vector<std::uint8_t>& bytes) {
    LBW_REQUIRE(bytes.size() >= 8, ErrorCode::truncated_file, "shard shorter than its header");
    LBW_REQUIRE(std::memcmp(bytes.data(), "LBW1", 4) == 0, ErrorCode::parse_error, "not a shard (bad magic)");
    detail::ByteReader hr(bytes.data() + 4, 4);
    ShardManifest m;
    m.version = hr.u32();
    LBW_REQUIRE(m.version == kShardVersion, ErrorCode::version_mismatch,
                "shard version " + std::to_string(m.version) + ", expected " + std::to_string(kShardVersion));
    LBW_REQUIRE(bytes.size() >= kShardMinSize, ErrorCode::truncated_file, "shard shorter than its header");
    const size_t body = bytes.size() - 4;
    detail::ByteReader tail(bytes.data() + body, 4);
    LBW_REQUIRE(tail.u32() == detail::crc32_of(bytes.data(), body), ErrorCode::checksum_failure, "shard checksum mismatch");
    detail::ByteReader r(bytes.data() + 8, body - 8);
    m.count = r.u32();
    LBW_REQUIRE(m.count <= r.remaining() / 8, ErrorCode::truncated_file, "offset table runs past the end of the shard");
    for (std::uint32_t i = 0; i < m.count; ++i) m.offsets.push_back(r.u64());
    return m;
}

inline std::vector<ClipRecord> decode_shard(const std::vector<std::uint8_t>& bytes) {
    const ShardManifest m = decode_manifest(bytes);
    const size_t body = bytes.size() - 4;
    std::vector<ClipRecord> out;
    for (std::uint64_t off : m.offsets) {
        LBW_REQUIRE(off + 8 <= body, ErrorCode::truncated_file, "record offset past the end of the shard");
        detail::ByteReader len_reader(bytes.data() + off, 8);
        const std::uint64_t len = len_reader.u64();
        LBW_REQUIRE(len <= body - off - 8, ErrorCode::truncated_file, "record runs past the end of the shard");
        detail::ByteReader r(bytes.data() + off + 8, static_cast<size_t>(len));
        out.push_back(detail::decode_record(r));
        LBW_REQUIRE(r.remaining() == 0, ErrorCode::parse_error, "trailing bytes inside a record");
    }
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    LBW_REQUIRE(in.good(), ErrorCode::io_error, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    LBW_REQUIRE(out.good(), ErrorCode::io_error, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    LBW_REQUIRE(out.good(), ErrorCode::io_error, "short write to " + path);
}

inline ShardManifest write_shard(const std::vector<ClipRecord>& records, const std::string& path) {
    ShardManifest m;
    write_file_bytes(path, encode_shard(records, &m));
    return m;
}

inline std::vector<ClipRecord> read_shard(const std::string& path) { return decode_shard(read_file_bytes(path)); }

}  // namespace lbw
