// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lbw/config.hpp"
#include "lbw/inference.hpp"
#include "lbw/model.hpp"
#include "lbw/nn.hpp"

namespace lbw {

// Key and mouse alphabets, index 4 is the empty symbol in both.
enum class KeyToken : std::uint8_t { W, A, S, D, none };
enum class MouseToken : std::uint8_t { I, J, K, L, none };
inline constexpr int kAlphabet = 5;

struct AgentToken {
    KeyToken key = KeyToken::none;
    MouseToken mouse = MouseToken::none;
    bool operator==(const AgentToken&) const = default;
};

inline std::string to_string(const AgentToken& t) {
    static constexpr const char* keys[] = {"W", "A", "S", "D", "-"};
    static constexpr const char* mice[] = {"I", "J", "K", "L", "-"};
    return std::string(keys[static_cast<int>(t.key)]) + mice[static_cast<int>(t.mouse)];
}

struct AgentConfig {
    int height = 64, width = 64;
    int patch = 8;
    int dim = 64;
    int heads = 4;
    int blocks = 2;
    double horizon_s = 10;
    double rate = 4;                              // tokens per second
    double delta = std::numbers::pi / 32;         // rad per frame for I/J/K/L
    double frame_rate = kFrameRate;
    double lr = 1e-3;

    int steps() const { return static_cast<int>(std::lround(horizon_s * rate)); }
    int frames_per_token() const { return std::max(1, static_cast<int>(std::lround(frame_rate / rate))); }
    int tokens_per_frame() const { return (height / patch) * (width / patch); }
    int token_dim() const { return patch * patch * 3; }

    void validate() const {
        LBW_REQUIRE(patch > 0 && height % patch == 0 && width % patch == 0, ErrorCode::indivisible_dims,
                    "frame size must be divisible by the patch size");
        LBW_REQUIRE(dim > 0 && heads > 0 && dim % heads == 0 && blocks >= 0, ErrorCode::invalid_argument, "bad agent width");
        LBW_REQUIRE(horizon_s > 0 && rate > 0 && steps() >= 1 && delta > 0 && frame_rate > 0, ErrorCode::invalid_argument,
                    "bad agent horizon");
    }

    static AgentConfig from_kv(const KvConfig& c) {
        AgentConfig a;
        a.height = c.get("agent.height", a.height);
        a.width = c.get("agent.width", a.width);
        a.patch = c.get("agent.patch", a.patch);
        a.dim = c.get("agent.dim", a.dim);
        a.heads = c.get("agent.heads", a.heads);
        a.blocks = c.get("agent.blocks", a.blocks);
        a.horizon_s = c.get("agent.horizon_s", a.horizon_s);
        a.rate = c.get("agent.rate", a.rate);
        a.delta = c.get("agent.delta", a.delta);
        a.frame_rate = c.get("agent.frame_rate", a.frame_rate);
        a.lr = c.get("agent.lr", a.lr);
        a.validate();
        return a;
    }

    KvConfig to_kv() const {
        KvConfig c;
        c.set("agent.height", height);
        c.set("agent.width", width);
        c.set("agent.patch", patch);
        c.set("agent.dim", dim);
        c.set("agent.heads", heads);
        c.set("agent.blocks", blocks);
        c.set("agent.horizon_s", horizon_s);
        c.set("agent.rate", rate);
        c.set("agent.delta", delta);
        c.set("agent.frame_rate", frame_rate);
        c.set("agent.lr", lr);
        return c;
    }
};

// --- tokens <-> actions -----------------------------------------------------

/// Total mapping: keys to the matching bit, I/K pitch +/-delta, J/L yaw -/+delta.
inline ActionState token_to_action(const AgentToken& t, double delta) {
    ActionState a;
    switch (t.key) {
    case KeyToken::W: a.keys = key_w; break;
    case KeyToken::A: a.keys = key_a; break;
    case KeyToken::S: a.keys = key_s; break;
    case KeyToken::D: a.keys = key_d; break;
    case KeyToken::none: break;
    }
    switch (t.mouse) {
    case MouseToken::I: a.pitch_delta = delta; break;
    case MouseToken::K: a.pitch_delta = -delta; break;
    case MouseToken::J: a.yaw_delta = -delta; break;
    case MouseToken::L: a.yaw_delta = delta; break;
    case MouseToken::none: break;
    }
    return a;
}

/// Per-frame actions of a plan: each token is held for frames_per_token frames.
inline std::vector<ActionState> plan_to_actions(const std::vector<AgentToken>& plan, const AgentConfig& cfg) {
    std::vector<ActionState> out;
    for (const auto& t : plan)
        for (int i = 0; i < cfg.frames_per_token(); ++i) out.push_back(token_to_action(t, cfg.delta));
    return out;
}

/// Token for one span of frames: first held key in W, A, S, D order; the
/// dominant rotation axis when its summed delta reaches half a step.
inline AgentToken tokenize_span(const ActionState* a, int n, double delta) {
    AgentToken t;
    if (n <= 0) return t;
    static constexpr std::array<std::pair<Key, KeyToken>, 4> order{
        {{key_w, KeyToken::W}, {key_a, KeyToken::A}, {key_s, KeyToken::S}, {key_d, KeyToken::D}}};
    for (const auto& [k, tok] : order)
        if (a[0].has(k)) {
            t.key = tok;
            break;
        }
    double yaw = 0, pitch = 0;
    for (int i = 0; i < n; ++i) yaw += a[i].yaw_delta, pitch += a[i].pitch_delta;
    yaw /= n, pitch /= n;
    if (std::max(std::abs(yaw), std::abs(pitch)) >= delta / 2) {
        if (std::abs(pitch) >= std::abs(yaw))
            t.mouse = pitch > 0 ? MouseToken::I : MouseToken::K;
        else
            t.mouse = yaw > 0 ? MouseToken::L : MouseToken::J;
    }
    return t;
}

/// Behavior-cloning targets for the observation at frame `start`: the
/// actions of the following frames, padded with empty tokens past the end.
inline std::vector<AgentToken> actions_to_plan(const std::vector<ActionState>& actions, int start, const AgentConfig& cfg) {
    std::vector<AgentToken> plan;
    const int fpt = cfg.frames_per_token();
    for (int s = 0; s < cfg.steps(); ++s) {
        const int f0 = start + 1 + s * fpt;
        const int n = std::min(fpt, static_cast<int>(actions.size()) - f0);
        plan.push_back(n > 0 ? tokenize_span(&actions[static_cast<size_t>(f0)], n, cfg.delta) : AgentToken{});
    }
    return plan;
}

// --- network ------------------------------------------------------------------

struct AgentExample {
    Frame observation;
    std::vector<AgentToken> plan;
};

/// Patch embedding, self-attention blocks over patches, then one learned
/// query per plan step cross-attends the patches; two 5-way heads per step.
template <class T>
class Agent {
public:
    Agent(const AgentConfig& cfg, ParamStore<T>& store, const std::string& prefix, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const int d = cfg.dim, p = cfg.token_dim(), n = cfg.tokens_per_frame(), s = cfg.steps();
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        auto add = [&](const std::string& name, Mat<T> m) { return store.add(prefix + name, std::move(m)); };
        in_w_ = add("in.w", normal_init<T>(p, d, 1.0 / std::sqrt(static_cast<double>(p)), rng));
        in_b_ = add("in.b", Mat<T>(1, d));
        pos_ = add("pos", normal_init<T>(n, d, 0.02, rng));
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string bp = "block" + std::to_string(b) + ".";
            Block blk;
            blk.q = add(bp + "attn.q", normal_init<T>(d, d, sd, rng));
            blk.k = add(bp + "attn.k", normal_init<T>(d, d, sd, rng));
            blk.v = add(bp + "attn.v", normal_init<T>(d, d, sd, rng));
            blk.o = add(bp + "attn.o", normal_init<T>(d, d, sd, rng));
            blk.m1_w = add(bp + "mlp.w1", normal_init<T>(d, 2 * d, sd, rng));
            blk.m1_b = add(bp + "mlp.b1", Mat<T>(1, 2 * d));
            blk.m2_w = add(bp + "mlp.w2", normal_init<T>(2 * d, d, 1.0 / std::sqrt(2.0 * d), rng));
            blk.m2_b = add(bp + "mlp.b2", Mat<T>(1, d));
            blocks_.push_back(blk);
        }
        query_ = add("plan.query", normal_init<T>(s, d, 1.0, rng));
        cq_ = add("plan.q", normal_init<T>(d, d, sd, rng));
        ck_ = add("plan.k", normal_init<T>(d, d, sd, rng));
        cv_ = add("plan.v", normal_init<T>(d, d, sd, rng));
        key_w_ = add("head.key.w", Mat<T>(d, kAlphabet));
        key_b_ = add("head.key.b", Mat<T>(1, kAlphabet));
        mouse_w_ = add("head.mouse.w", Mat<T>(d, kAlphabet));
        mouse_b_ = add("head.mouse.b", Mat<T>(1, kAlphabet));
    }

    const AgentConfig& config() const { return cfg_; }

    struct Logits {
        Var<T> key, mouse;  // steps x 5
    };

    Logits forward(const Frame& obs) const {
        LBW_REQUIRE(obs.height == cfg_.height && obs.width == cfg_.width, ErrorCode::resolution_mismatch,
                    "observation is " + std::to_string(obs.height) + "x" + std::to_string(obs.width) + ", agent expects " +
                        std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
        const AttnMask full;
        Var<T> h = add(add_row(matmul(constant(patchify<T>(obs, cfg_.patch)), in_w_), in_b_), pos_);
        for (const Block& b : blocks_) {
            const Var<T> a = layer_norm(h);
            h = add(h, matmul(attention(matmul(a, b.q), matmul(a, b.k), matmul(a, b.v), cfg_.heads, full), b.o));
            const Var<T> m = layer_norm(h);
            h = add(h, add_row(matmul(silu(add_row(matmul(m, b.m1_w), b.m1_b)), b.m2_w), b.m2_b));
        }
        const Var<T> mem = layer_norm(h);
        const Var<T> z = layer_norm(add(query_, attention(matmul(layer_norm(query_), cq_), matmul(mem, ck_), matmul(mem, cv_),
                                                          cfg_.heads, full)));
        return {add_row(matmul(z, key_w_), key_b_), add_row(matmul(z, mouse_w_), mouse_b_)};
    }

    /// Mean over steps of CE(key) + CE(mouse).
    Var<T> loss(const AgentExample& ex) const {
        LBW_REQUIRE(static_cast<int>(ex.plan.size()) == cfg_.steps(), ErrorCode::action_count_mismatch,
                    "plan has " + std::to_string(ex.plan.size()) + " tokens, agent predicts " + std::to_string(cfg_.steps()));
        std::vector<int> keys, mice;
        for (const auto& t : ex.plan) keys.push_back(static_cast<int>(t.key)), mice.push_back(static_cast<int>(t.mouse));
        const Logits l = forward(ex.observation);
        return add(cross_entropy(l.key, keys), cross_entropy(l.mouse, mice));
    }

    /// Greedy decode.
    std::vector<AgentToken> predict(const Frame& obs) const {
        const Logits l = forward(obs);
        std::vector<AgentToken> plan;
        auto argmax = [](const T* row) {
            int best = 0;
            for (int c = 1; c < kAlphabet; ++c)
                if (row[c] > row[best]) best = c;
            return best;
        };
        for (int s = 0; s < cfg_.steps(); ++s)
            plan.push_back({static_cast<KeyToken>(argmax(l.key.value().row(s))),
                            static_cast<MouseToken>(argmax(l.mouse.value().row(s)))});
        return plan;
    }

private:
    struct Block {
        Var<T> q, k, v, o, m1_w, m1_b, m2_w, m2_b;
    };
    AgentConfig cfg_;
    Var<T> in_w_, in_b_, pos_, query_, cq_, ck_, cv_, key_w_, key_b_, mouse_w_, mouse_b_;
    std::vector<Block> blocks_;
};

/// Mean loss over the batch, then one optimizer step.
template <class T>
double agent_train_step(const Agent<T>& agent, ParamStore<T>& store, Adam<T>& opt, const std::vector<AgentExample>& batch) {
    LBW_REQUIRE(!batch.empty(), ErrorCode::invalid_argument, "empty agent batch");
    store.zero_grad();
    Var<T> acc;
    for (const auto& ex : batch) {
        const Var<T> l = agent.loss(ex);
        acc = acc ? add(acc, l) : l;
    }
    const Var<T> loss = scale(acc, static_cast<T>(1.0 / batch.size()));
    backward(loss);
    opt.step(store);
    return static_cast<double>(loss.item());
}

/// Fraction of matching key and mouse symbols.
inline double token_accuracy(const std::vector<AgentToken>& a, const std::vector<AgentToken>& b) {
    LBW_REQUIRE(a.size() == b.size() && !a.empty(), ErrorCode::invalid_argument, "plans differ in length");
    int hit = 0;
    for (size_t i = 0; i < a.size(); ++i) hit += (a[i].key == b[i].key) + (a[i].mouse == b[i].mouse);
    return hit / (2.0 * static_cast<double>(a.size()));
}

struct DriveRecord {
    std::vector<std::vector<AgentToken>> plans;
    std::vector<Frame> frames;
};

/// Closed loop: the newest frame is the observation, the plan's first
/// chunk_len frame actions drive the session, repeat.
template <class T, class U>
DriveRecord agent_drive(Session<T>& session, const Agent<U>& agent, int n_chunks) {
    LBW_REQUIRE(n_chunks >= 0, ErrorCode::invalid_argument, "n_chunks must be non-negative");
    DriveRecord rec;
    Frame obs = session.anchor_frame();
    const int L = session.model().chunk_len;
    for (int c = 0; c < n_chunks; ++c) {
        auto plan = agent.predict(obs);
        auto acts = plan_to_actions(plan, agent.config());
        acts.resize(static_cast<size_t>(L), acts.empty() ? ActionState{} : acts.back());
        auto frames = session.stream_chunk(acts);
        obs = frames.back();
        rec.plans.push_back(std::move(plan));
        for (auto& f : frames) rec.frames.push_back(std::move(f));
    }
    return rec;
}

}  // namespace lbw
