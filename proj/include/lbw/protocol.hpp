// SPDX-License-Identifier: Apache-2.0
#pragma once

// Framed byte protocol:
//   "LBWP" | u8 version | u8 type | u32 LE payload length | payload
// ACTION   u8 keys (bit0 W, bit1 A, bit2 S, bit3 D, bits 4-7 zero) | f32 yaw | f32 pitch | f64 timestamp
// FRAME    u32 chunk | u8 frame in chunk | u16 height | u16 width | RGB bytes (3*H*W)
// PROMPT   UTF-8 text
// RESET, STATS_REQ  empty
// STATS    UTF-8 JSON object
// ERROR    u8 code | UTF-8 message
// All integers and floats little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lbw/camera.hpp"

namespace lbw::proto {

inline constexpr std::array<std::uint8_t, 4> kMagic{'L', 'B', 'W', 'P'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr size_t kHeaderSize = 10;
inline constexpr std::uint32_t kMaxPayload = 16u << 20;
inline constexpr size_t kActionPayload = 17;
inline constexpr size_t kFrameHeader = 9;

enum class MsgType : std::uint8_t { action = 0, frame = 1, prompt = 2, reset = 3, stats_req = 4, stats = 5, error = 6 };

enum class ProtoError : std::uint8_t {
    none = 0,
    bad_magic = 1,
    bad_version = 2,
    length_overflow = 3,
    reserved_bits = 4,
    unknown_type = 5,
    bad_payload = 6,
    rate_limited = 7,
    server_error = 8,
    truncated = 9,  // a finite buffer ended inside a message
};

inline const char* to_string(ProtoError e) {
    switch (e) {
    case ProtoError::none: return "none";
    case ProtoError::bad_magic: return "bad_magic";
    case ProtoError::bad_version: return "bad_version";
    case ProtoError::length_overflow: return "length_overflow";
    case ProtoError::reserved_bits: return "reserved_bits";
    case ProtoError::unknown_type: return "unknown_type";
    case ProtoError::bad_payload: return "bad_payload";
    case ProtoError::rate_limited: return "rate_limited";
    case ProtoError::server_error: return "server_error";
    case ProtoError::truncated: return "truncated";
    }
    return "unknown";
}

/// Errors after which the byte stream cannot be re-synchronized.
inline bool is_fatal(ProtoError e) {
    return e == ProtoError::bad_magic || e == ProtoError::bad_version || e == ProtoError::length_overflow;
}

struct ActionMsg {
    std::uint8_t keys = 0;
    float yaw_delta = 0, pitch_delta = 0;
    double timestamp = 0;
    bool operator==(const ActionMsg&) const = default;
};

struct FrameMsg {
    std::uint32_t chunk = 0;
    std::uint8_t frame = 0;
    std::uint16_t height = 0, width = 0;
    std::vector<std::uint8_t> rgb;
    bool operator==(const FrameMsg&) const = default;
};

struct PromptMsg {
    std::string text;
    bool operator==(const PromptMsg&) const = default;
};
struct ResetMsg {
    bool operator==(const ResetMsg&) const = default;
};
struct StatsReqMsg {
    bool operator==(const StatsReqMsg&) const = default;
};
struct StatsMsg {
    std::string json;
    bool operator==(const StatsMsg&) const = default;
};
struct ErrorMsg {
    ProtoError code = ProtoError::none;
    std::string message;
    bool operator==(const ErrorMsg&) const = default;
};

// Variant index equals the wire type.
using Message = std::variant<ActionMsg, FrameMsg, PromptMsg, ResetMsg, StatsReqMsg, StatsMsg, ErrorMsg>;

inline MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index()); }

inline ActionMsg to_message(const ActionState& a) {
    return {a.keys, static_cast<float>(a.yaw_delta), static_cast<float>(a.pitch_delta), a.timestamp};
}
inline ActionState to_action(const ActionMsg& m) {
    ActionState a;
    a.keys = m.keys;
    a.yaw_delta = m.yaw_delta;
    a.pitch_delta = m.pitch_delta;
    a.timestamp = m.timestamp;
    return a;
}

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_le(const std::uint8_t* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}
inline void put_text(std::vector<std::uint8_t>& out, std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

inline std::vector<std::uint8_t> payload(const Message& m) {
    std::vector<std::uint8_t> p;
    std::visit(
        [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, ActionMsg>) {
                p.push_back(v.keys);
                put_le(p, std::bit_cast<std::uint32_t>(v.yaw_delta), 4);
                put_le(p, std::bit_cast<std::uint32_t>(v.pitch_delta), 4);
                put_le(p, std::bit_cast<std::uint64_t>(v.timestamp), 8);
            } else if constexpr (std::is_same_v<V, FrameMsg>) {
                put_le(p, v.chunk, 4);
                p.push_back(v.frame);
                put_le(p, v.height, 2);
                put_le(p, v.width, 2);
                p.insert(p.end(), v.rgb.begin(), v.rgb.end());
            } else if constexpr (std::is_same_v<V, PromptMsg>) {
                put_text(p, v.text);
            } else if constexpr (std::is_same_v<V, StatsMsg>) {
                put_text(p, v.json);
            } else if constexpr (std::is_same_v<V, ErrorMsg>) {
                p.push_back(static_cast<std::uint8_t>(v.code));
                put_text(p, v.message);
            }
        },
        m);
    return p;
}

}  // namespace detail

/// Throws invalid_argument for messages that violate their own invariants.
inline std::vector<std::uint8_t> encode(const Message& m) {
    if (const auto* a = std::get_if<ActionMsg>(&m))
        LBW_REQUIRE((a->keys & 0xF0) == 0, ErrorCode::invalid_argument, "ACTION reserved key bits set");
    if (const auto* f = std::get_if<FrameMsg>(&m))
        LBW_REQUIRE(f->rgb.size() == 3ull * f->height * f->width, ErrorCode::invalid_argument, "FRAME rgb size is not 3*H*W");
    const auto p = detail::payload(m);
    LBW_REQUIRE(p.size() <= kMaxPayload, ErrorCode::invalid_argument, "payload exceeds 16 MiB");
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(type_of(m)));
    detail::put_le(out, p.size(), 4);
    out.insert(out.end(), p.begin(), p.end());
    return out;
}

enum class DecodeStatus : std::uint8_t { message, need_more, error };

struct DecodeResult {
    DecodeStatus status = DecodeStatus::need_more;
    Message message;
    ProtoError error = ProtoError::none;
    size_t consumed = 0;  // bytes to drop from the front of the input
};

/// Parses at most one message from the front of `in`. Errors inside a
/// well-framed message consume it, so decoding can continue after them.
inline DecodeResult decode(std::span<const std::uint8_t> in) {
    DecodeResult r;
    const size_t m = std::min(in.size(), kMagic.size());
    if (std::memcmp(in.data(), kMagic.data(), m) != 0) {
        r.status = DecodeStatus::error;
        r.error = ProtoError::bad_magic;
        return r;
    }
    if (in.size() < 5) return r;
    if (in[4] != kVersion) {
        r.status = DecodeStatus::error;
        r.error = ProtoError::bad_version;
        return r;
    }
    if (in.size() < kHeaderSize) return r;
    const auto len = static_cast<std::uint32_t>(detail::get_le(in.data() + 6, 4));
    if (len > kMaxPayload) {
        r.status = DecodeStatus::error;
        r.error = ProtoError::length_overflow;
        return r;
    }
    if (in.size() < kHeaderSize + len) return r;

    r.consumed = kHeaderSize + len;
    const std::uint8_t* p = in.data() + kHeaderSize;
    auto fail = [&](ProtoError e) {
        r.status = DecodeStatus::error;
        r.error = e;
        return r;
    };
    switch (in[5]) {
    case 0: {
        if (len != kActionPayload) return fail(ProtoError::bad_payload);
        if (p[0] & 0xF0) return fail(ProtoError::reserved_bits);
        ActionMsg a;
        a.keys = p[0];
        a.yaw_delta = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p + 1, 4)));
        a.pitch_delta = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(p + 5, 4)));
        a.timestamp = std::bit_cast<double>(detail::get_le(p + 9, 8));
        r.message = a;
        break;
    }
    case 1: {
        if (len < kFrameHeader) return fail(ProtoError::bad_payload);
        FrameMsg f;
        f.chunk = static_cast<std::uint32_t>(detail::get_le(p, 4));
        f.frame = p[4];
        f.height = static_cast<std::uint16_t>(detail::get_le(p + 5, 2));
        f.width = static_cast<std::uint16_t>(detail::get_le(p + 7, 2));
        if (len - kFrameHeader != 3ull * f.height * f.width) return fail(ProtoError::bad_payload);
        f.rgb.assign(p + kFrameHeader, p + len);
        r.message = std::move(f);
        break;
    }
    case 2: r.message = PromptMsg{std::string(p, p + len)}; break;
    case 3:
        if (len != 0) return fail(ProtoError::bad_payload);
        r.message = ResetMsg{};
        break;
    case 4:
        if (len != 0) return fail(ProtoError::bad_payload);
        r.message = StatsReqMsg{};
        break;
    case 5: r.message = StatsMsg{std::string(p, p + len)}; break;
    case 6: {
        if (len < 1) return fail(ProtoError::bad_payload);
        r.message = ErrorMsg{static_cast<ProtoError>(p[0]), std::string(p + 1, p + len)};
        break;
    }
    default: return fail(ProtoError::unknown_type);
    }
    r.status = DecodeStatus::message;
    return r;
}

/// Incremental decoder over a byte stream fed in arbitrary pieces.
class Decoder {
public:
    void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void feed(const std::vector<std::uint8_t>& bytes) { feed(std::span<const std::uint8_t>(bytes)); }

    /// After a fatal error the decoder stays failed; the stream is unusable.
    DecodeResult next() {
        if (fatal_ != ProtoError::none) {
            DecodeResult r;
            r.status = DecodeStatus::error;
            r.error = fatal_;
            return r;
        }
        DecodeResult r = decode(std::span<const std::uint8_t>(buf_.data() + pos_, buf_.size() - pos_));
        pos_ += r.consumed;
        if (r.status == DecodeStatus::error && is_fatal(r.error)) fatal_ = r.error;
        if (pos_ > 65536 && pos_ * 2 > buf_.size()) {
            buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
            pos_ = 0;
        }
        return r;
    }

    size_t buffered() const { return buf_.size() - pos_; }
    bool failed() const { return fatal_ != ProtoError::none; }

private:
    std::vector<std::uint8_t> buf_;
    size_t pos_ = 0;
    ProtoError fatal_ = ProtoError::none;
};

/// Decodes a complete buffer: every message, then at most one error (fatal,
/// or truncated when bytes remain inside an unfinished message).
inline std::vector<DecodeResult> decode_all(std::span<const std::uint8_t> bytes) {
    Decoder d;
    d.feed(bytes);
    std::vector<DecodeResult> out;
    for (;;) {
        DecodeResult r = d.next();
        if (r.status == DecodeStatus::need_more) {
            if (d.buffered() > 0) {
                r.status = DecodeStatus::error;
                r.error = ProtoError::truncated;
                out.push_back(std::move(r));
            }
            return out;
        }
        const bool stop = r.status == DecodeStatus::error && is_fatal(r.error);
        out.push_back(std::move(r));
        if (stop) return out;
    }
}

inline std::string to_hex(std::span<const std::uint8_t> b) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    for (auto x : b) s += digits[x >> 4], s += digits[x & 15];
    return s;
}

inline std::vector<std::uint8_t> from_hex(std::string_view s) {
    LBW_REQUIRE(s.size() % 2 == 0, ErrorCode::parse_error, "odd hex length");
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw Error(ErrorCode::parse_error, "bad hex digit");
    };
    std::vector<std::uint8_t> out;
    for (size_t i = 0; i < s.size(); i += 2) out.push_back(static_cast<std::uint8_t>(nib(s[i]) * 16 + nib(s[i + 1])));
    return out;
}

/// Fixed messages covering every type; the UI codec must reproduce their bytes.
inline std::vector<std::pair<std::string, Message>> golden_messages() {
    FrameMsg frame{7, 2, 2, 3, {}};
    for (int i = 0; i < 18; ++i) frame.rgb.push_back(static_cast<std::uint8_t>(i * 15));
    return {
        {"action_wd", ActionMsg{key_w | key_d, 0.1f, 0.0f, 1.5}},
        {"action_idle", ActionMsg{0, 0.0f, 0.0f, 0.0}},
        {"action_as_negative", ActionMsg{key_a | key_s, -0.25f, 0.125f, 1234.0625}},
        {"frame_2x3", frame},
        {"prompt_night", PromptMsg{"night"}},
        {"prompt_utf8", PromptMsg{"snow \xe2\x9d\x84 at dusk"}},
        {"prompt_empty", PromptMsg{""}},
        {"reset", ResetMsg{}},
        {"stats_req", StatsReqMsg{}},
        {"stats", StatsMsg{R"({"chunks":3,"fps":12.5})"}},
        {"error_unknown_type", ErrorMsg{ProtoError::unknown_type, "unknown message type 9"}},
    };
}

inline nlohmann::json fields_json(const Message& m) {
    return std::visit(
        [](const auto& v) -> nlohmann::json {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, ActionMsg>)
                return {{"keys", v.keys}, {"yaw_delta", v.yaw_delta}, {"pitch_delta", v.pitch_delta}, {"timestamp", v.timestamp}};
            else if constexpr (std::is_same_v<V, FrameMsg>)
                return {{"chunk", v.chunk}, {"frame", v.frame}, {"height", v.height}, {"width", v.width}, {"rgb_hex", to_hex(v.rgb)}};
            else if constexpr (std::is_same_v<V, PromptMsg>)
                return {{"text", v.text}};
            else if constexpr (std::is_same_v<V, StatsMsg>)
                return {{"json", v.json}};
            else if constexpr (std::is_same_v<V, ErrorMsg>)
                return {{"code", static_cast<int>(v.code)}, {"message", v.message}};
            else
                return nlohmann::json::object();
        },
        m);
}

inline const char* type_name(MsgType t) {
    static constexpr const char* names[] = {"ACTION", "FRAME", "PROMPT", "RESET", "STATS_REQ", "STATS", "ERROR"};
    return names[static_cast<int>(t)];
}

/// The shared golden-vector document: name, type, fields and encoded hex per message.
inline nlohmann::json golden_document() {
    nlohmann::json doc{{"magic", "LBWP"}, {"version", kVersion}, {"vectors", nlohmann::json::array()}};
    for (const auto& [name, m] : golden_messages())
        doc["vectors"].push_back({{"name", name},
                                  {"type", type_name(type_of(m))},
                                  {"type_id", static_cast<int>(type_of(m))},
                                  {"fields", fields_json(m)},
                                  {"hex", to_hex(encode(m))}});
    return doc;
}

}  // namespace lbw::proto
