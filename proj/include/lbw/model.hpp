// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lbw/autograd.hpp"
#include "lbw/camera.hpp"
#include "lbw/config.hpp"
#include "lbw/nn.hpp"
#include "lbw/world.hpp"

namespace lbw {

struct ModelConfig {
    int frame_height = 64, frame_width = 64;
    int patch = 8;
    int dim = 128;
    int blocks = 4;
    int heads = 4;
    int chunk_len = 4;
    int mlp_ratio = 4;
    int text_vocab = 256;
    int time_freqs = 16;
    double t_boundary = 0.5;

    int tokens_per_frame() const { return (frame_height / patch) * (frame_width / patch); }
    int token_dim() const { return patch * patch * 3; }

    void validate() const {
        LBW_REQUIRE(patch > 0 && frame_height > 0 && frame_width > 0 && frame_height % patch == 0 &&
                        frame_width % patch == 0,
                    ErrorCode::indivisible_dims, "frame size must be divisible by the patch size");
        LBW_REQUIRE(dim > 0 && heads > 0 && dim % heads == 0, ErrorCode::invalid_argument, "dim must divide into heads");
        LBW_REQUIRE(blocks >= 0 && chunk_len >= 1 && mlp_ratio >= 1 && text_vocab >= 1 && time_freqs >= 1,
                    ErrorCode::invalid_argument, "bad model config");
        LBW_REQUIRE(t_boundary > 0 && t_boundary < 1, ErrorCode::invalid_argument, "t_boundary must be in (0,1)");
    }

    KvConfig to_kv() const {
        KvConfig c;
        c.set("model.frame_height", frame_height);
        c.set("model.frame_width", frame_width);
        c.set("model.patch", patch);
        c.set("model.dim", dim);
        c.set("model.blocks", blocks);
        c.set("model.heads", heads);
        c.set("model.chunk_len", chunk_len);
        c.set("model.mlp_ratio", mlp_ratio);
        c.set("model.text_vocab", text_vocab);
        c.set("model.time_freqs", time_freqs);
        c.set("model.t_boundary", t_boundary);
        return c;
    }

    static ModelConfig from_kv(const KvConfig& c) { return from_kv(c, ModelConfig()); }
    static ModelConfig from_kv(const KvConfig& c, ModelConfig d) {
        d.frame_height = c.get("model.frame_height", d.frame_height);
        d.frame_width = c.get("model.frame_width", d.frame_width);
        d.patch = c.get("model.patch", d.patch);
        d.dim = c.get("model.dim", d.dim);
        d.blocks = c.get("model.blocks", d.blocks);
        d.heads = c.get("model.heads", d.heads);
        d.chunk_len = c.get("model.chunk_len", d.chunk_len);
        d.mlp_ratio = c.get("model.mlp_ratio", d.mlp_ratio);
        d.text_vocab = c.get("model.text_vocab", d.text_vocab);
        d.time_freqs = c.get("model.time_freqs", d.time_freqs);
        d.t_boundary = c.get("model.t_boundary", d.t_boundary);
        d.validate();
        return d;
    }

    bool operator==(const ModelConfig&) const = default;
};

// --- patches ----------------------------------------------------------------

/// Frame -> N x (p*p*3) tokens in [-1, 1]; patches row-major, (dy, dx, c) inside.
template <class T>
Mat<T> patchify(const Frame& f, int patch) {
    LBW_REQUIRE(patch > 0 && f.height % patch == 0 && f.width % patch == 0, ErrorCode::indivisible_dims,
                "frame " + std::to_string(f.height) + "x" + std::to_string(f.width) + " not divisible by patch " +
                    std::to_string(patch));
    const int ph = f.height / patch, pw = f.width / patch;
    Mat<T> out(ph * pw, patch * patch * 3);
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
            T* row = out.row(py * pw + px);
            int k = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    const std::uint8_t* p = f.pixel(py * patch + dy, px * patch + dx);
                    for (int c = 0; c < 3; ++c) row[k++] = static_cast<T>(p[c]) / T(127.5) - T(1);
                }
        }
    return out;
}

inline std::uint8_t to_byte(double x) {
    const double b = std::round((x + 1.0) * 127.5);
    return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

template <class T>
Frame unpatchify(const Mat<T>& tokens, int height, int width, int patch) {
    LBW_REQUIRE(patch > 0 && height % patch == 0 && width % patch == 0, ErrorCode::indivisible_dims,
                "frame size not divisible by patch");
    const int ph = height / patch, pw = width / patch;
    LBW_REQUIRE(tokens.rows == ph * pw && tokens.cols == patch * patch * 3, ErrorCode::invalid_argument,
                "token block does not match the frame size");
    Frame f{height, width, std::vector<std::uint8_t>(static_cast<size_t>(height) * width * 3)};
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
            const T* row = tokens.row(py * pw + px);
            int k = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    std::uint8_t* p = &f.rgb[(static_cast<size_t>(py * patch + dy) * width + px * patch + dx) * 3];
                    for (int c = 0; c < 3; ++c) p[c] = to_byte(static_cast<double>(row[k++]));
                }
        }
    return f;
}

/// Frames stacked frame-major into one latent matrix.
template <class T>
Mat<T> patchify_frames(const std::vector<Frame>& frames, int patch) {
    LBW_REQUIRE(!frames.empty(), ErrorCode::invalid_argument, "no frames to patchify");
    Mat<T> first = patchify<T>(frames[0], patch);
    Mat<T> out(first.rows * static_cast<int>(frames.size()), first.cols);
    for (size_t i = 0; i < frames.size(); ++i) {
        const Mat<T> m = i == 0 ? first : patchify<T>(frames[i], patch);
        std::copy(m.v.begin(), m.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(i * m.v.size()));
    }
    return out;
}

template <class T>
std::vector<Frame> unpatchify_frames(const Mat<T>& tokens, int height, int width, int patch) {
    const int n = (height / patch) * (width / patch);
    LBW_REQUIRE(n > 0 && tokens.rows % n == 0, ErrorCode::invalid_argument, "token count is not a whole number of frames");
    std::vector<Frame> out;
    for (int f = 0; f < tokens.rows / n; ++f) {
        Mat<T> m(n, tokens.cols);
        std::copy_n(tokens.row(f * n), static_cast<size_t>(n) * tokens.cols, m.v.begin());
        out.push_back(unpatchify(m, height, width, patch));
    }
    return out;
}

// --- sequence layout --------------------------------------------------------

/// Chunk 0 holds the single anchor frame; later chunks hold chunk_len frames.
struct Layout {
    int chunk_len = 1;
    std::vector<int> frame_chunk, frame_slot;

    static Layout anchored(int frames, int chunk_len) {
        LBW_REQUIRE(frames >= 1 && chunk_len >= 1 && (frames - 1) % chunk_len == 0, ErrorCode::invalid_argument,
                    "anchored layout needs 1 + k*chunk_len frames");
        Layout l;
        l.chunk_len = chunk_len;
        l.frame_chunk.push_back(0);
        l.frame_slot.push_back(0);
        for (int f = 1; f < frames; ++f) {
            l.frame_chunk.push_back(1 + (f - 1) / chunk_len);
            l.frame_slot.push_back((f - 1) % chunk_len);
        }
        return l;
    }

    int frames() const { return static_cast<int>(frame_chunk.size()); }
    int chunks() const { return frame_chunk.empty() ? 0 : frame_chunk.back() + 1; }
    int first_frame(int chunk) const { return chunk == 0 ? 0 : 1 + (chunk - 1) * chunk_len; }
    int chunk_frames(int chunk) const { return chunk == 0 ? 1 : chunk_len; }
};

inline int chunk_first_frame(int chunk, int chunk_len) { return chunk == 0 ? 0 : 1 + (chunk - 1) * chunk_len; }
inline int chunk_frame_count(int chunk, int chunk_len) { return chunk == 0 ? 1 : chunk_len; }

// --- text -------------------------------------------------------------------

inline std::uint32_t fnv1a(std::string_view s) {
    std::uint32_t h = 2166136261u;
    for (unsigned char c : s) h = (h ^ c) * 16777619u;
    return h;
}

/// Sorted distinct hashed word ids of a prompt (bag of words).
inline std::vector<int> text_tokens(const std::string& text, int vocab) {
    std::vector<int> ids;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) ids.push_back(static_cast<int>(fnv1a(cur) % static_cast<std::uint32_t>(vocab)));
        cur.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else
            flush();
    }
    flush();
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

// --- actions ----------------------------------------------------------------

inline constexpr int kActionFeatures = 12;  // pooled Plücker (6) + keys (4) + yaw, pitch deltas

/// Per-frame action feature row from a camera pose (relative to the episode
/// anchor) and the action that led to the frame.
inline std::array<double, kActionFeatures> action_features(const PluckerMap& plucker, const ActionState& a) {
    std::array<double, kActionFeatures> f{};
    const auto pooled = pool_plucker(plucker);
    for (int i = 0; i < 6; ++i) f[static_cast<size_t>(i)] = pooled[static_cast<size_t>(i)];
    for (int k = 0; k < 4; ++k) f[static_cast<size_t>(6 + k)] = (a.keys >> k) & 1;
    f[10] = a.yaw_delta;
    f[11] = a.pitch_delta;
    return f;
}

/// Plücker map of `pose` relative to `anchor`, at a small fixed grid.
inline PluckerMap relative_plucker(const CameraPose& anchor, const CameraPose& pose, int grid = 8) {
    CameraPose rel = relative_to(anchor, pose);
    rel.intrinsics = intrinsics_for(pose, grid, grid);
    return plucker_embed(rel, grid, grid);
}

inline std::array<double, kActionFeatures> frame_action_features(const CameraPose& anchor, const CameraPose& pose,
                                                                 const ActionState& a) {
    return action_features(relative_plucker(anchor, pose), a);
}

/// Linear, bias-free projection of one feature row.
template <class T>
Var<T> encode_actions(const Var<T>& w_act, const Mat<T>& features) {
    return matmul(constant(features), w_act);
}

/// norm(x) * (1 + scale) + shift.
template <class T>
Var<T> adaln_modulate(const Var<T>& x, const Var<T>& scale_, const Var<T>& shift) {
    return add(mul(layer_norm(x), add_scalar(scale_, T(1))), shift);
}

enum class Expert : std::uint8_t { high, low };

/// high iff t >= t_b.
inline Expert route_expert(double t, double t_boundary) { return t >= t_boundary ? Expert::high : Expert::low; }

// --- KV cache ---------------------------------------------------------------

template <class T>
struct KVEntry {
    int chunk = 0;
    int tokens = 0;
    std::vector<Var<T>> k, v;  // per block
};

/// Per-block keys/values of committed chunks. Evicts whole chunks, oldest first.
template <class T>
class KVCache {
public:
    explicit KVCache(int capacity_chunks = 8) : capacity_(capacity_chunks) {
        LBW_REQUIRE(capacity_chunks >= 1, ErrorCode::invalid_argument, "cache capacity must be at least one chunk");
    }

    void append(KVEntry<T> e) {
        LBW_REQUIRE(entries_.empty() || e.chunk == entries_.back().chunk + 1, ErrorCode::contract_violation,
                    "cache chunks must be appended contiguously");
        entries_.push_back(std::move(e));
        while (static_cast<int>(entries_.size()) > capacity_) {
            evicted_.push_back(entries_.front().chunk);
            entries_.pop_front();
        }
    }

    void clear() {
        entries_.clear();
        evicted_.clear();
    }

    /// Cuts every stored tensor from the autograd graph.
    void detach_all() {
        for (auto& e : entries_)
            for (size_t b = 0; b < e.k.size(); ++b) e.k[b] = detach(e.k[b]), e.v[b] = detach(e.v[b]);
    }

    int capacity() const { return capacity_; }
    int chunks() const { return static_cast<int>(entries_.size()); }
    int tokens() const {
        int n = 0;
        for (const auto& e : entries_) n += e.tokens;
        return n;
    }
    const std::deque<KVEntry<T>>& entries() const { return entries_; }
    std::deque<KVEntry<T>>& entries() { return entries_; }
    const std::vector<int>& evicted() const { return evicted_; }
    int next_chunk() const { return entries_.empty() ? (evicted_.empty() ? 0 : evicted_.back() + 1) : entries_.back().chunk + 1; }

private:
    int capacity_;
    std::deque<KVEntry<T>> entries_;
    std::vector<int> evicted_;
};

// --- transformer ------------------------------------------------------------

/// One forward call's inputs. Tokens are frame-major, tokens_per_frame each.
template <class T>
struct DitInput {
    Var<T> x;                                // noisy latents
    std::vector<int> frame_chunk;            // absolute chunk index per frame
    std::vector<int> frame_slot;             // frame index within its chunk
    std::vector<T> frame_t;                  // timestep per frame
    Mat<T> actions;                          // frames x kActionFeatures
    std::vector<std::vector<int>> prompts;   // hashed token ids per prompt group
    std::vector<int> frame_prompt;           // prompt group per frame

    int frames() const { return static_cast<int>(frame_chunk.size()); }
};

template <class T>
struct DitOutput {
    Var<T> x0;
    Var<T> mid;                       // hidden state after the middle block
    std::vector<Var<T>> k, v;         // per block, keys/values of the input tokens
};

enum class MaskMode : std::uint8_t { bidirectional, block_causal };

/// c_skip(t) for the x0 output: 1 at t = 0, 0 at t = 1.
inline double c_skip(double t) {
    const double a = (1 - t) * (1 - t);
    return a / (a + t * t);
}

template <class T>
class Dit {
public:
    Dit() = default;

    Dit(const ModelConfig& cfg, ParamStore<T>& store, const std::string& prefix, std::uint64_t seed)
        : cfg_(cfg), prefix_(prefix) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const int d = cfg.dim, p = cfg.token_dim(), n = cfg.tokens_per_frame();
        const int hidden = d * cfg.mlp_ratio;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        auto add = [&](const std::string& name, Mat<T> m) { return store.add(prefix + name, std::move(m)); };
        w_in_ = add("in.w", normal_init<T>(p, d, 1.0 / std::sqrt(static_cast<double>(p)), rng));
        b_in_ = add("in.b", Mat<T>(1, d));
        pos_ = add("pos", normal_init<T>(n, d, 0.02, rng));
        slot_ = add("slot", normal_init<T>(cfg.chunk_len, d, 0.02, rng));
        t1_w_ = add("time.w1", normal_init<T>(2 * cfg.time_freqs, d, 1.0 / std::sqrt(2.0 * cfg.time_freqs), rng));
        t1_b_ = add("time.b1", Mat<T>(1, d));
        t2_w_ = add("time.w2", normal_init<T>(d, d, sd, rng));
        t2_b_ = add("time.b2", Mat<T>(1, d));
        word_ = add("text.word", normal_init<T>(cfg.text_vocab, d, 0.5, rng));
        null_ = add("text.null", normal_init<T>(1, d, 0.5, rng));
        act_ = add("action.w", normal_init<T>(kActionFeatures, d, 1.0 / std::sqrt(double(kActionFeatures)), rng));
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string bp = "block" + std::to_string(b) + ".";
            Block blk;
            blk.tmod_w = add(bp + "tmod.w", Mat<T>(d, 2 * d));
            blk.tmod_b = add(bp + "tmod.b", Mat<T>(1, 2 * d));
            blk.wq = add(bp + "attn.q", normal_init<T>(d, d, sd, rng));
            blk.wk = add(bp + "attn.k", normal_init<T>(d, d, sd, rng));
            blk.wv = add(bp + "attn.v", normal_init<T>(d, d, sd, rng));
            blk.wo = add(bp + "attn.o", normal_init<T>(d, d, sd, rng));
            blk.amod1_w = add(bp + "amod1.w", Mat<T>(d, 2 * d));
            blk.amod1_b = add(bp + "amod1.b", Mat<T>(1, 2 * d));
            blk.cq = add(bp + "cross.q", normal_init<T>(d, d, sd, rng));
            blk.ck = add(bp + "cross.k", normal_init<T>(d, d, sd, rng));
            blk.cv = add(bp + "cross.v", normal_init<T>(d, d, sd, rng));
            blk.co = add(bp + "cross.o", normal_init<T>(d, d, sd, rng));
            blk.amod2_w = add(bp + "amod2.w", Mat<T>(d, 2 * d));
            blk.amod2_b = add(bp + "amod2.b", Mat<T>(1, 2 * d));
            blk.m1_w = add(bp + "mlp.w1", normal_init<T>(d, hidden, sd, rng));
            blk.m1_b = add(bp + "mlp.b1", Mat<T>(1, hidden));
            blk.m2_w = add(bp + "mlp.w2", normal_init<T>(hidden, d, 1.0 / std::sqrt(double(hidden)), rng));
            blk.m2_b = add(bp + "mlp.b2", Mat<T>(1, d));
            blocks_.push_back(blk);
        }
        fmod_w_ = add("final.tmod.w", Mat<T>(d, 2 * d));
        fmod_b_ = add("final.tmod.b", Mat<T>(1, 2 * d));
        w_out_ = add("out.w", Mat<T>(d, p));
        b_out_ = add("out.b", Mat<T>(1, p));
    }

    const ModelConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }
    int mid_block() const { return cfg_.blocks / 2; }
    const Var<T>& action_weight() const { return act_; }
    Var<T>& action_weight() { return act_; }

    /// Sinusoidal timestep features, one row per entry.
    Mat<T> time_features(const std::vector<T>& ts) const {
        const int f = cfg_.time_freqs;
        Mat<T> m(static_cast<int>(ts.size()), 2 * f);
        for (size_t i = 0; i < ts.size(); ++i)
            for (int k = 0; k < f; ++k) {
                const double w = std::pow(10000.0, -static_cast<double>(k) / f) * 1000.0;
                m(static_cast<int>(i), k) = static_cast<T>(std::cos(w * static_cast<double>(ts[i])));
                m(static_cast<int>(i), f + k) = static_cast<T>(std::sin(w * static_cast<double>(ts[i])));
            }
        return m;
    }

    /// Cache entries must precede the input chunks; requires block_causal.
    DitOutput<T> forward(const DitInput<T>& in, MaskMode mode, const KVCache<T>* cache = nullptr) const {
        const int n = cfg_.tokens_per_frame(), d = cfg_.dim, nf = in.frames();
        LBW_REQUIRE(nf >= 1, ErrorCode::invalid_argument, "forward needs at least one frame");
        LBW_REQUIRE(in.x.rows() == nf * n && in.x.cols() == cfg_.token_dim(), ErrorCode::invalid_argument,
                    "latent shape does not match the frame count");
        LBW_REQUIRE(in.frame_slot.size() == static_cast<size_t>(nf) && in.frame_t.size() == static_cast<size_t>(nf) &&
                        in.frame_prompt.size() == static_cast<size_t>(nf) && in.actions.rows == nf &&
                        in.actions.cols == kActionFeatures,
                    ErrorCode::invalid_argument, "per-frame conditioning has the wrong length");
        LBW_REQUIRE(!cache || mode == MaskMode::block_causal, ErrorCode::contract_violation,
                    "a KV cache requires the block-causal mask");
        if (cache && cache->chunks() > 0)
            LBW_REQUIRE(cache->entries().back().chunk < in.frame_chunk.front(), ErrorCode::contract_violation,
                        "cached chunks must precede the new chunks");

        std::vector<int> tok_frame(static_cast<size_t>(nf) * n), tok_pos(tok_frame.size()), tok_slot(tok_frame.size()),
            tok_chunk(tok_frame.size()), tok_prompt(tok_frame.size());
        for (int f = 0; f < nf; ++f)
            for (int i = 0; i < n; ++i) {
                const size_t k = static_cast<size_t>(f) * n + i;
                tok_frame[k] = f;
                tok_pos[k] = i;
                tok_slot[k] = in.frame_slot[static_cast<size_t>(f)];
                tok_chunk[k] = in.frame_chunk[static_cast<size_t>(f)];
                tok_prompt[k] = in.frame_prompt[static_cast<size_t>(f)];
            }

        Var<T> h = add_row(matmul(in.x, w_in_), b_in_);
        h = add(h, gather_rows(pos_, tok_pos));
        h = add(h, gather_rows(slot_, tok_slot));

        const Var<T> temb = silu(add_row(matmul(silu(add_row(matmul(constant(time_features(in.frame_t)), t1_w_), t1_b_)), t2_w_), t2_b_));
        const Var<T> aemb = silu(encode_actions(act_, in.actions));

        // text keys: null token first, then each prompt group's words
        std::vector<int> text_ids, text_group;
        std::vector<int> null_rows;
        for (size_t g = 0; g < in.prompts.size(); ++g) {
            null_rows.push_back(static_cast<int>(text_ids.size()));
            text_ids.push_back(-1);
            text_group.push_back(static_cast<int>(g));
            for (int id : in.prompts[g]) {
                LBW_REQUIRE(id >= 0 && id < cfg_.text_vocab, ErrorCode::invalid_argument, "text token out of range");
                text_ids.push_back(id);
                text_group.push_back(static_cast<int>(g));
            }
        }
        LBW_REQUIRE(!in.prompts.empty(), ErrorCode::invalid_argument, "at least one prompt group (may be empty)");
        std::vector<Var<T>> text_rows;
        for (int id : text_ids) text_rows.push_back(id < 0 ? null_ : gather_rows(word_, {id}));
        const Var<T> text = concat_rows(text_rows);
        AttnMask cross_mask;
        cross_mask.kind = AttnMask::Kind::same;
        cross_mask.q_group = tok_prompt;
        cross_mask.k_group = text_group;

        AttnMask self_mask;
        std::vector<int> key_chunk;
        if (cache)
            for (const auto& e : cache->entries())
                for (int i = 0; i < e.tokens; ++i) key_chunk.push_back(e.chunk);
        key_chunk.insert(key_chunk.end(), tok_chunk.begin(), tok_chunk.end());
        if (mode == MaskMode::block_causal) {
            self_mask.kind = AttnMask::Kind::causal;
            self_mask.q_group = tok_chunk;
            self_mask.k_group = key_chunk;
        }

        DitOutput<T> out;
        for (size_t b = 0; b < blocks_.size(); ++b) {
            const Block& blk = blocks_[b];
            const Var<T> tm = gather_rows(add_row(matmul(temb, blk.tmod_w), blk.tmod_b), tok_frame);
            const Var<T> a = adaln_modulate(h, slice_cols(tm, 0, d), slice_cols(tm, d, 2 * d));
            const Var<T> q = matmul(a, blk.wq);
            const Var<T> k = matmul(a, blk.wk);
            const Var<T> v = matmul(a, blk.wv);
            out.k.push_back(k);
            out.v.push_back(v);
            Var<T> k_all = k, v_all = v;
            if (cache && cache->chunks() > 0) {
                std::vector<Var<T>> ks, vs;
                for (const auto& e : cache->entries()) ks.push_back(e.k[b]), vs.push_back(e.v[b]);
                ks.push_back(k);
                vs.push_back(v);
                k_all = concat_rows(ks);
                v_all = concat_rows(vs);
            }
            h = add(h, matmul(attention(q, k_all, v_all, cfg_.heads, self_mask), blk.wo));

            const Var<T> am1 = gather_rows(add_row(matmul(aemb, blk.amod1_w), blk.amod1_b), tok_frame);
            const Var<T> c = adaln_modulate(h, slice_cols(am1, 0, d), slice_cols(am1, d, 2 * d));
            const Var<T> cross = attention(matmul(c, blk.cq), matmul(text, blk.ck), matmul(text, blk.cv), cfg_.heads, cross_mask);
            h = add(h, matmul(cross, blk.co));

            const Var<T> am2 = gather_rows(add_row(matmul(aemb, blk.amod2_w), blk.amod2_b), tok_frame);
            const Var<T> m = adaln_modulate(h, slice_cols(am2, 0, d), slice_cols(am2, d, 2 * d));
            h = add(h, add_row(matmul(silu(add_row(matmul(m, blk.m1_w), blk.m1_b)), blk.m2_w), blk.m2_b));
            if (static_cast<int>(b) + 1 == mid_block()) out.mid = h;
        }
        if (!out.mid) out.mid = h;

        Mat<T> skip(nf * n, cfg_.token_dim());
        for (int f = 0; f < nf; ++f) {
            const T cs = static_cast<T>(c_skip(static_cast<double>(in.frame_t[static_cast<size_t>(f)])));
            std::fill(skip.row(f * n), skip.row(f * n) + static_cast<size_t>(n) * skip.cols, cs);
        }
        const Var<T> fm = gather_rows(add_row(matmul(temb, fmod_w_), fmod_b_), tok_frame);
        const Var<T> o = adaln_modulate(h, slice_cols(fm, 0, d), slice_cols(fm, d, 2 * d));
        out.x0 = add(mul(in.x, constant(std::move(skip))), add_row(matmul(o, w_out_), b_out_));
        return out;
    }

private:
    struct Block {
        Var<T> tmod_w, tmod_b, wq, wk, wv, wo, amod1_w, amod1_b, cq, ck, cv, co, amod2_w, amod2_b, m1_w, m1_b, m2_w, m2_b;
    };
    ModelConfig cfg_;
    std::string prefix_;
    Var<T> w_in_, b_in_, pos_, slot_, t1_w_, t1_b_, t2_w_, t2_b_, word_, null_, act_, fmod_w_, fmod_b_, w_out_, b_out_;
    std::vector<Block> blocks_;
};

/// Appends the keys/values of a forward call to the cache, one entry per chunk.
template <class T>
void commit_to_cache(KVCache<T>& cache, const DitInput<T>& in, const DitOutput<T>& out, int tokens_per_frame) {
    int f = 0;
    const int nf = in.frames();
    while (f < nf) {
        const int chunk = in.frame_chunk[static_cast<size_t>(f)];
        int g = f;
        while (g < nf && in.frame_chunk[static_cast<size_t>(g)] == chunk) ++g;
        KVEntry<T> e;
        e.chunk = chunk;
        e.tokens = (g - f) * tokens_per_frame;
        for (size_t b = 0; b < out.k.size(); ++b) {
            e.k.push_back(slice_rows(out.k[b], f * tokens_per_frame, g * tokens_per_frame));
            e.v.push_back(slice_rows(out.v[b], f * tokens_per_frame, g * tokens_per_frame));
        }
        cache.append(std::move(e));
        f = g;
    }
}

/// Action-finetune mode: only the action projection and the AdaLN action heads train.
template <class T>
void set_action_finetune(ParamStore<T>& store, const std::string& prefix, int blocks) {
    store.set_trainable(prefix, false);
    store.set_trainable(prefix + "action.w", true);
    for (int b = 0; b < blocks; ++b) {
        const std::string bp = prefix + "block" + std::to_string(b) + ".";
        store.set_trainable(bp + "amod1.", true);
        store.set_trainable(bp + "amod2.", true);
    }
}

inline bool is_action_adapter(const std::string& name) {
    return name.find("action.w") != std::string::npos || name.find(".amod1.") != std::string::npos ||
           name.find(".amod2.") != std::string::npos;
}

/// Two-expert denoiser routed by timestep.
template <class T>
class MoE {
public:
    MoE() = default;
    MoE(const ModelConfig& cfg, ParamStore<T>& store, const std::string& prefix, std::uint64_t seed)
        : high_(cfg, store, prefix + "high.", seed), low_(cfg, store, prefix + "low.", seed + 1), t_b_(cfg.t_boundary),
          prefix_(prefix) {}

    const Dit<T>& expert(Expert e) const { return e == Expert::high ? high_ : low_; }
    const Dit<T>& route(double t) const { return expert(route_expert(t, t_b_)); }
    const Dit<T>& high() const { return high_; }
    const Dit<T>& low() const { return low_; }
    double boundary() const { return t_b_; }
    const std::string& prefix() const { return prefix_; }
    std::string expert_prefix(Expert e) const { return prefix_ + (e == Expert::high ? "high." : "low."); }

private:
    Dit<T> high_, low_;
    double t_b_ = 0.5;
    std::string prefix_;
};

// --- checkpoints ------------------------------------------------------------
//
// "LBWC" | u32 version | u32 config length | config text | u32 count |
// per parameter: u32 name length | name | u32 rows | u32 cols | f32 data

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    LBW_REQUIRE(is.gcount() == 4, ErrorCode::truncated_file, "checkpoint ends early");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const KvConfig& config, const ParamStore<T>& store) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    LBW_REQUIRE(os.good(), ErrorCode::io_error, "cannot write checkpoint " + path);
    os.write("LBWC", 4);
    detail::put_u32(os, kCheckpointVersion);
    const std::string text = config.dump();
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, p] : store.items()) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(p.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(p.cols()));
        for (T x : p.value().v) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
    }
    LBW_REQUIRE(os.good(), ErrorCode::io_error, "short write to " + path);
}

struct CheckpointData {
    KvConfig config;
    std::vector<std::pair<std::string, Mat<float>>> params;

    const Mat<float>* find(const std::string& name) const {
        for (const auto& [n, m] : params)
            if (n == name) return &m;
        return nullptr;
    }
    bool has_prefix(const std::string& prefix) const {
        for (const auto& [n, _] : params)
            if (n.rfind(prefix, 0) == 0) return true;
        return false;
    }
};

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    LBW_REQUIRE(is.good(), ErrorCode::io_error, "cannot open checkpoint " + path);
    char magic[4] = {};
    is.read(magic, 4);
    LBW_REQUIRE(is.gcount() == 4 && std::memcmp(magic, "LBWC", 4) == 0, ErrorCode::version_mismatch,
                "not a checkpoint (bad magic)");
    const std::uint32_t version = detail::get_u32(is);
    LBW_REQUIRE(version == kCheckpointVersion, ErrorCode::version_mismatch,
                "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    CheckpointData data;
    const std::uint32_t text_len = detail::get_u32(is);
    LBW_REQUIRE(text_len < (1u << 24), ErrorCode::parse_error, "checkpoint config block too large");
    std::string text(text_len, '\0');
    is.read(text.data(), text_len);
    LBW_REQUIRE(static_cast<std::uint32_t>(is.gcount()) == text_len, ErrorCode::truncated_file, "checkpoint ends early");
    data.config = KvConfig::parse(text);
    const std::uint32_t count = detail::get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        LBW_REQUIRE(name_len < 4096, ErrorCode::parse_error, "checkpoint parameter name too long");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        LBW_REQUIRE(static_cast<std::uint32_t>(is.gcount()) == name_len, ErrorCode::truncated_file, "checkpoint ends early");
        const std::uint32_t rows = detail::get_u32(is), cols = detail::get_u32(is);
        LBW_REQUIRE(static_cast<std::uint64_t>(rows) * cols < (1ull << 28), ErrorCode::parse_error, "parameter too large");
        Mat<float> m(static_cast<int>(rows), static_cast<int>(cols));
        for (auto& x : m.v) x = std::bit_cast<float>(detail::get_u32(is));
        data.params.emplace_back(std::move(name), std::move(m));
    }
    return data;
}

/// Copies every checkpoint parameter under `from_prefix` into `store` under
/// `to_prefix`. Returns how many were copied.
template <class T>
int load_params(const CheckpointData& ckpt, ParamStore<T>& store, const std::string& from_prefix,
                const std::string& to_prefix) {
    int copied = 0;
    for (const auto& [name, m] : ckpt.params) {
        if (name.rfind(from_prefix, 0) != 0) continue;
        const std::string dst = to_prefix + name.substr(from_prefix.size());
        if (!store.has(dst)) continue;
        auto& p = store.get(dst);
        LBW_REQUIRE(p.rows() == m.rows && p.cols() == m.cols, ErrorCode::contract_violation,
                    "checkpoint shape mismatch for " + dst);
        p.mutable_value() = m.template cast<T>();
        ++copied;
    }
    return copied;
}

}  // namespace lbw
