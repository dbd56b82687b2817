// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lbw/distill.hpp"
#include "lbw/model.hpp"
#include "lbw/world.hpp"

namespace lbw {

struct SessionConfig {
    int cache_chunks = 8;       // M, counting the anchor chunk
    int steps = 4;              // student denoising steps per chunk
    double fps = 16;            // target, reported only
    double frame_rate = kFrameRate;
    double time_scale = 1.0;    // see Trajectory::time_scale
    bool flush_on_swap = false; // drop all cached history, anchor included, when the prompt changes
    bool record = false;        // keep per-chunk traces (tests, rigs)
    std::optional<Frame> anchor;      // conditioning image; generated from the prompt when absent
    std::optional<WorldSpec> world;   // collision geometry for pose integration; empty arena when absent
    std::optional<CameraPose> start;  // arena center, yaw 0 when absent

    void validate() const {
        LBW_REQUIRE(cache_chunks >= 2, ErrorCode::invalid_argument, "cache must hold the anchor and one chunk");
        LBW_REQUIRE(steps >= 1 && steps <= 4, ErrorCode::invalid_argument, "student steps must be in 1..4");
        LBW_REQUIRE(frame_rate > 0 && time_scale > 0 && fps > 0, ErrorCode::invalid_argument, "rates must be positive");
    }

    static SessionConfig from_kv(const KvConfig& c) {
        SessionConfig s;
        s.cache_chunks = c.get("session.cache_chunks", s.cache_chunks);
        s.steps = c.get("session.steps", s.steps);
        s.fps = c.get("session.fps", s.fps);
        s.frame_rate = c.get("session.frame_rate", s.frame_rate);
        s.time_scale = c.get("session.time_scale", s.time_scale);
        s.flush_on_swap = c.get("session.flush_on_swap", s.flush_on_swap);
        s.validate();
        return s;
    }
};

struct StatsReport {
    long chunks = 0, frames = 0;
    std::vector<double> chunk_ms;  // wall time per streamed chunk
    double p50_ms = 0, p90_ms = 0, p99_ms = 0, max_ms = 0;
    double model_ms = 0, overhead_ms = 0;  // totals; overhead = pose integration, encode, decode, queue
    double overhead_ms_per_frame = 0;
    double fps = 0;                        // frames over summed chunk wall time
    int queue_depth = 0;
    long evicted_chunks = 0, prompt_swaps = 0, held_actions = 0, egress_dropped = 0;

    nlohmann::json to_json() const {
        return {{"chunks", chunks},           {"frames", frames},
                {"p50_ms", p50_ms},           {"p90_ms", p90_ms},
                {"p99_ms", p99_ms},           {"max_ms", max_ms},
                {"model_ms", model_ms},       {"overhead_ms", overhead_ms},
                {"overhead_ms_per_frame", overhead_ms_per_frame},
                {"fps", fps},                 {"queue_depth", queue_depth},
                {"evicted_chunks", evicted_chunks},
                {"prompt_swaps", prompt_swaps},
                {"held_actions", held_actions},
                {"egress_dropped", egress_dropped}};
    }
};

/// Nearest-rank percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
    return v[std::clamp<size_t>(rank, 1, v.size()) - 1];
}

inline CameraPose default_start_pose(int height, int width) {
    return make_pose({kArenaCells / 2.0, kEyeHeight, kArenaCells / 2.0}, 0, 0,
                     Intrinsics::from_fov(height, width, std::numbers::pi / 2));
}

/// What one streamed chunk looked like, for recompute checks.
template <class T>
struct ChunkTrace {
    int chunk = 0;
    double t_last = 0;
    Mat<T> last_input;  // noisy latents fed to the final denoising pass
    Mat<T> latents;     // generated clean latents
    DitInput<T> cond;   // conditioning of the chunk (x unset)
};

/// A streaming generation session. One thread drives stream_chunk /
/// stream_next; push_action, swap_prompt and stats may be called from others.
template <class T>
class Session {
public:
    Session(const ModelConfig& model, const ParamStore<T>& weights, const std::string& weight_prefix,
            const std::string& prompt, std::uint64_t seed, SessionConfig cfg = {})
        : model_(model), cfg_(std::move(cfg)), student_(model, store_, "student.", seed), cache_(cfg_.cache_chunks),
          rng_(seed), grid_(cfg_.world ? *cfg_.world : build_empty_world(0)), prompt_(prompt) {
        cfg_.validate();
        store_.copy_values_from(weights, weight_prefix, "student.");
        store_.set_all_trainable(false);
        begin();
    }

    Session(const ModelConfig& model, const CheckpointData& ckpt, const std::string& prompt, std::uint64_t seed,
            SessionConfig cfg = {})
        : model_(model), cfg_(std::move(cfg)), student_(model, store_, "student.", seed), cache_(cfg_.cache_chunks),
          rng_(seed), grid_(cfg_.world ? *cfg_.world : build_empty_world(0)), prompt_(prompt) {
        cfg_.validate();
        const std::string from = ckpt.has_prefix("student.") ? "student." : "teacher.high.";
        const int n = load_params(ckpt, store_, from, "student.");
        LBW_REQUIRE(n == static_cast<int>(store_.size()), ErrorCode::contract_violation,
                    "checkpoint holds " + std::to_string(n) + " of " + std::to_string(store_.size()) +
                        " student parameters");
        store_.set_all_trainable(false);
        begin();
    }

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    const ModelConfig& model() const { return model_; }
    const SessionConfig& config() const { return cfg_; }
    const Frame& anchor_frame() const { return anchor_; }
    const CameraPose& pose() const { return pose_; }
    const std::string& prompt() const { return prompt_; }
    const KVCache<T>& cache() const { return cache_; }
    const std::vector<ChunkTrace<T>>& traces() const { return traces_; }
    /// Streamed chunks so far; the anchor is chunk 0 of the layout and not counted.
    long chunks() const { return chunk_ - 1; }

    /// Generates the next chunk from exactly chunk_len actions.
    std::vector<Frame> stream_chunk(std::span<const ActionState> actions) {
        LBW_REQUIRE(static_cast<int>(actions.size()) == model_.chunk_len, ErrorCode::action_count_mismatch,
                    "got " + std::to_string(actions.size()) + " actions, chunk needs " + std::to_string(model_.chunk_len));
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        apply_pending_prompt();

        const int n = model_.tokens_per_frame(), L = model_.chunk_len;
        DitInput<T> cond;
        cond.actions = Mat<T>(L, kActionFeatures);
        cond.prompts = {tokens_};
        for (int i = 0; i < L; ++i) {
            const ActionState& a = actions[static_cast<size_t>(i)];
            pose_ = step_dynamics(pose_, a, cfg_.time_scale / cfg_.frame_rate, grid_);
            const auto row = frame_action_features(anchor_pose_, pose_, a);
            for (int k = 0; k < kActionFeatures; ++k) cond.actions(i, k) = static_cast<T>(row[static_cast<size_t>(k)]);
            cond.frame_chunk.push_back(chunk_);
            cond.frame_slot.push_back(i);
            cond.frame_prompt.push_back(0);
        }

        const auto t1 = clock::now();
        Mat<T> last_input;
        const std::vector<double> ts = student_timesteps(cfg_.steps, DiffusionConfig{});
        const Var<T> x = student_generate<T>(student_, cache_, cond, ts, rng_, false, nullptr, &last_input);
        const auto t2 = clock::now();

        std::vector<Frame> frames;
        frames.reserve(static_cast<size_t>(L));
        const Mat<T>& v = x.value();
        for (int i = 0; i < L; ++i) {
            Mat<T> one(n, v.cols);
            std::copy_n(v.row(i * n), static_cast<size_t>(n) * v.cols, one.v.begin());
            frames.push_back(unpatchify(one, model_.frame_height, model_.frame_width, model_.patch));
        }
        if (cfg_.record) traces_.push_back({chunk_, ts.back(), std::move(last_input), v, std::move(cond)});
        ++chunk_;
        const auto t3 = clock::now();

        const auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
        std::lock_guard lock(mu_);
        stats_.chunks += 1;
        stats_.frames += L;
        stats_.chunk_ms.push_back(ms(t0, t3));
        stats_.model_ms += ms(t1, t2);
        stats_.overhead_ms += ms(t0, t1) + ms(t2, t3);
        stats_.evicted_chunks = static_cast<long>(cache_.evicted().size());
        return frames;
    }

    /// Pops chunk_len queued actions; on underflow the last action repeats.
    std::vector<ActionState> next_actions() {
        std::lock_guard lock(mu_);
        std::vector<ActionState> out;
        for (int i = 0; i < model_.chunk_len; ++i) {
            if (!queue_.empty()) {
                last_action_ = queue_.front();
                queue_.pop_front();
            } else {
                ++stats_.held_actions;
            }
            out.push_back(last_action_);
        }
        return out;
    }

    std::vector<Frame> stream_next() {
        const auto a = next_actions();
        return stream_chunk(a);
    }

    void push_action(const ActionState& a) {
        std::lock_guard lock(mu_);
        queue_.push_back(a);
    }

    /// Takes effect at the next chunk boundary.
    void swap_prompt(const std::string& text) {
        std::lock_guard lock(mu_);
        pending_prompt_ = text;
    }

    int queued() const {
        std::lock_guard lock(mu_);
        return static_cast<int>(queue_.size());
    }

    void count_egress_drop(long n = 1) {
        std::lock_guard lock(mu_);
        stats_.egress_dropped += n;
    }

    StatsReport stats() const {
        std::lock_guard lock(mu_);
        StatsReport r = stats_;
        r.queue_depth = static_cast<int>(queue_.size());
        r.p50_ms = percentile(r.chunk_ms, 50);
        r.p90_ms = percentile(r.chunk_ms, 90);
        r.p99_ms = percentile(r.chunk_ms, 99);
        r.max_ms = percentile(r.chunk_ms, 100);
        double wall = 0;
        for (double m : r.chunk_ms) wall += m;
        r.fps = wall > 0 ? 1000.0 * static_cast<double>(r.frames) / wall : 0;
        r.overhead_ms_per_frame = r.frames > 0 ? r.overhead_ms / static_cast<double>(r.frames) : 0;
        return r;
    }

private:
    void begin() {
        pose_ = anchor_pose_ = cfg_.start ? *cfg_.start : default_start_pose(model_.frame_height, model_.frame_width);
        tokens_ = text_tokens(prompt_, model_.text_vocab);
        DitInput<T> in;
        in.frame_chunk = {0};
        in.frame_slot = {0};
        in.frame_prompt = {0};
        in.prompts = {tokens_};
        in.actions = Mat<T>(1, kActionFeatures);
        const auto row = frame_action_features(anchor_pose_, anchor_pose_, ActionState{});
        for (int k = 0; k < kActionFeatures; ++k) in.actions(0, k) = static_cast<T>(row[static_cast<size_t>(k)]);
        if (cfg_.anchor) {
            LBW_REQUIRE(cfg_.anchor->height == model_.frame_height && cfg_.anchor->width == model_.frame_width,
                        ErrorCode::resolution_mismatch, "anchor image does not match the model resolution");
            in.x = constant(patchify<T>(*cfg_.anchor, model_.patch));
            commit_clean(student_, cache_, in);
            anchor_ = *cfg_.anchor;
        } else {
            const Var<T> x = student_generate(student_, cache_, in, student_timesteps(cfg_.steps, DiffusionConfig{}), rng_, false);
            anchor_ = unpatchify(x.value(), model_.frame_height, model_.frame_width, model_.patch);
        }
        chunk_ = 1;
    }

    void apply_pending_prompt() {
        std::optional<std::string> next;
        {
            std::lock_guard lock(mu_);
            next.swap(pending_prompt_);
        }
        if (!next) return;
        prompt_ = *next;
        tokens_ = text_tokens(prompt_, model_.text_vocab);
        {
            std::lock_guard lock(mu_);
            ++stats_.prompt_swaps;
        }
        if (cfg_.flush_on_swap) cache_.clear();
    }

    ModelConfig model_;
    SessionConfig cfg_;
    ParamStore<T> store_;
    Dit<T> student_;
    KVCache<T> cache_;
    std::mt19937_64 rng_;
    OccupancyGrid grid_;
    std::string prompt_;
    std::vector<int> tokens_;
    Frame anchor_;
    CameraPose anchor_pose_, pose_;
    int chunk_ = 0;
    std::vector<ChunkTrace<T>> traces_;

    mutable std::mutex mu_;
    std::deque<ActionState> queue_;
    ActionState last_action_{};
    std::optional<std::string> pending_prompt_;
    StatsReport stats_;
};

/// Loads a checkpoint (model config from its header) and opens a session.
template <class T>
std::unique_ptr<Session<T>> start_session(const std::string& checkpoint, const std::string& prompt, std::uint64_t seed,
                                          SessionConfig cfg = {}) {
    const CheckpointData ckpt = read_checkpoint(checkpoint);
    const ModelConfig model = ModelConfig::from_kv(ckpt.config);
    return std::make_unique<Session<T>>(model, ckpt, prompt, seed, std::move(cfg));
}

}  // namespace lbw
