// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lbw/config.hpp"
#include "lbw/data.hpp"
#include "lbw/model.hpp"

namespace lbw {

// --- schedule -----------------------------------------------------------------

struct DiffusionConfig {
    std::vector<double> targets{1.0, 0.75, 0.5, 0.25};  // descending, distinct, in (0,1]
    double p_clean = 0.2;
    int sampler_steps = 8;

    void validate() const {
        LBW_REQUIRE(!targets.empty(), ErrorCode::invalid_argument, "need at least one target timestep");
        for (size_t i = 0; i < targets.size(); ++i) {
            LBW_REQUIRE(targets[i] > 0 && targets[i] <= 1, ErrorCode::invalid_argument, "target timesteps must lie in (0,1]");
            LBW_REQUIRE(i == 0 || targets[i] < targets[i - 1], ErrorCode::invalid_argument,
                        "target timesteps must be sorted descending and distinct");
        }
        LBW_REQUIRE(p_clean >= 0 && p_clean <= 1, ErrorCode::invalid_argument, "p_clean must be in [0,1]");
        LBW_REQUIRE(sampler_steps >= 1, ErrorCode::invalid_argument, "sampler_steps must be >= 1");
    }

    static DiffusionConfig from_kv(const KvConfig& c) {
        DiffusionConfig d;
        if (c.has("diffusion.targets")) {
            d.targets.clear();
            std::istringstream in(c.get<std::string>("diffusion.targets", ""));
            std::string tok;
            while (std::getline(in, tok, ',')) {
                std::istringstream one(tok);
                double t = 0;
                LBW_REQUIRE(static_cast<bool>(one >> t), ErrorCode::parse_error, "bad target timestep '" + tok + "'");
                d.targets.push_back(t);
            }
        }
        d.p_clean = c.get("diffusion.p_clean", d.p_clean);
        d.sampler_steps = c.get("diffusion.sampler_steps", d.sampler_steps);
        d.validate();
        return d;
    }
};

/// t = s u / (1 + (s - 1) u).
inline double shift_timestep(double u, double s) {
    LBW_REQUIRE(u >= 0 && u <= 1 && s >= 1, ErrorCode::invalid_argument, "shift_timestep needs u in [0,1], s >= 1");
    return s * u / (1 + (s - 1) * u);
}

/// x_t = (1 - t) x0 + t eps.
template <class T>
Mat<T> add_noise(const Mat<T>& x0, double t, const Mat<T>& eps) {
    LBW_REQUIRE(x0.rows == eps.rows && x0.cols == eps.cols, ErrorCode::invalid_argument, "add_noise: shape mismatch");
    Mat<T> out(x0.rows, x0.cols);
    const T a = static_cast<T>(1 - t), b = static_cast<T>(t);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

/// Differentiable in x0.
template <class T>
Var<T> add_noise(const Var<T>& x0, double t, const Mat<T>& eps) {
    Mat<T> te = eps;
    for (auto& e : te.v) e *= static_cast<T>(t);
    return add(scale(x0, static_cast<T>(1 - t)), constant(std::move(te)));
}

/// Per-frame timesteps over a frame-major latent block.
template <class T>
Mat<T> add_noise_frames(const Mat<T>& x0, const std::vector<T>& frame_t, const Mat<T>& eps, int tokens_per_frame) {
    LBW_REQUIRE(x0.rows == eps.rows && x0.cols == eps.cols &&
                    x0.rows == static_cast<int>(frame_t.size()) * tokens_per_frame,
                ErrorCode::invalid_argument, "add_noise_frames: shape mismatch");
    Mat<T> out(x0.rows, x0.cols);
    for (int r = 0; r < x0.rows; ++r) {
        const T t = frame_t[static_cast<size_t>(r / tokens_per_frame)];
        for (int c = 0; c < x0.cols; ++c) out(r, c) = (1 - t) * x0(r, c) + t * eps(r, c);
    }
    return out;
}

template <class T>
Mat<T> gaussian(int rows, int cols, std::mt19937_64& rng) {
    return normal_init<T>(rows, cols, 1.0, rng);
}

/// Each chunk independently: 0 with probability p_clean, else a uniform pick from the target set.
inline std::vector<double> sample_chunk_timesteps(int chunks, const DiffusionConfig& cfg, std::mt19937_64& rng) {
    LBW_REQUIRE(chunks >= 1, ErrorCode::invalid_argument, "need at least one chunk");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<size_t> pick(0, cfg.targets.size() - 1);
    std::vector<double> ts;
    for (int c = 0; c < chunks; ++c) ts.push_back(unit(rng) < cfg.p_clean ? 0.0 : cfg.targets[pick(rng)]);
    return ts;
}

inline std::vector<double> sample_chunk_timesteps(int chunks, const DiffusionConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_chunk_timesteps(chunks, cfg, rng);
}

/// steps + 1 descending timesteps from 1 to 0 on the shifted grid.
inline std::vector<double> sampling_grid(int steps, double shift) {
    LBW_REQUIRE(steps >= 1, ErrorCode::invalid_argument, "sampler needs at least one step");
    std::vector<double> g;
    for (int k = 0; k <= steps; ++k) g.push_back(shift_timestep(1.0 - static_cast<double>(k) / steps, shift));
    g.back() = 0.0;
    return g;
}

// --- curriculum -------------------------------------------------------------

struct CurriculumPhase {
    int chunks = 2;
    double shift = 3;
    int steps = 100;
};

struct Curriculum {
    std::vector<CurriculumPhase> phases{{2, 3, 100}, {4, 5, 100}, {8, 8, 100}};

    void validate() const {
        LBW_REQUIRE(!phases.empty(), ErrorCode::invalid_argument, "curriculum has no phases");
        for (size_t i = 0; i < phases.size(); ++i) {
            const auto& p = phases[i];
            LBW_REQUIRE(p.chunks >= 1 && p.shift >= 1 && p.steps >= 0, ErrorCode::invalid_argument, "bad curriculum phase");
            if (i > 0)
                LBW_REQUIRE(p.chunks >= phases[i - 1].chunks && p.shift >= phases[i - 1].shift, ErrorCode::invalid_argument,
                            "curriculum phases must be non-decreasing in duration and shift");
        }
    }

    int total_steps() const {
        int n = 0;
        for (const auto& p : phases) n += p.steps;
        return n;
    }

    /// Phase index for a global step; past the end stays on the last phase.
    int phase_index(int step) const {
        int acc = 0;
        for (size_t i = 0; i < phases.size(); ++i) {
            acc += phases[i].steps;
            if (step < acc) return static_cast<int>(i);
        }
        return static_cast<int>(phases.size()) - 1;
    }
    const CurriculumPhase& at(int step) const { return phases[static_cast<size_t>(phase_index(step))]; }

    /// `curriculum.phases = 2:3:100, 4:5:100, 8:8:100` (chunks:shift:steps).
    static Curriculum from_kv(const KvConfig& c) {
        Curriculum cur;
        if (c.has("curriculum.phases")) {
            cur.phases.clear();
            std::istringstream in(c.get<std::string>("curriculum.phases", ""));
            std::string item;
            while (std::getline(in, item, ',')) {
                CurriculumPhase p;
                char sep1 = 0, sep2 = 0;
                std::istringstream one(item);
                LBW_REQUIRE(static_cast<bool>(one >> p.chunks >> sep1 >> p.shift >> sep2 >> p.steps) && sep1 == ':' && sep2 == ':',
                            ErrorCode::parse_error, "curriculum phase '" + item + "' is not chunks:shift:steps");
                cur.phases.push_back(p);
            }
        }
        cur.validate();
        return cur;
    }
};

// --- training tensors -------------------------------------------------------

/// One clip, patchified, with its poses, actions and per-frame prompts.
template <class T>
struct ClipTensors {
    int tokens_per_frame = 0;
    int chunk_len = 1;
    Mat<T> latents;
    std::vector<CameraPose> poses;
    std::vector<ActionState> actions;
    std::vector<std::string> prompts;

    int frames() const { return static_cast<int>(poses.size()); }
    /// Chunks after the anchor that fit from `start`.
    int max_chunks(int start = 0) const { return (frames() - start - 1) / chunk_len; }
};

template <class T>
ClipTensors<T> clip_tensors(const ClipRecord& clip, const ModelConfig& cfg) {
    LBW_REQUIRE(!clip.frames.empty() && clip.frames.size() == clip.trajectory.size(), ErrorCode::invalid_argument,
                "clip frames and trajectory disagree");
    LBW_REQUIRE(clip.frames[0].height == cfg.frame_height && clip.frames[0].width == cfg.frame_width,
                ErrorCode::resolution_mismatch,
                "clip is " + std::to_string(clip.frames[0].height) + "x" + std::to_string(clip.frames[0].width) +
                    ", model expects " + std::to_string(cfg.frame_height) + "x" + std::to_string(cfg.frame_width));
    ClipTensors<T> c;
    c.tokens_per_frame = cfg.tokens_per_frame();
    c.chunk_len = cfg.chunk_len;
    c.latents = patchify_frames<T>(clip.frames, cfg.patch);
    c.poses = clip.trajectory.poses;
    c.actions = clip.trajectory.actions;
    for (int f = 0; f < static_cast<int>(clip.frames.size()); ++f) c.prompts.push_back(frame_prompt(clip, f));
    return c;
}

/// An anchored training window: frame 0 is the anchor, then `chunks` chunks.
template <class T>
struct Window {
    Layout layout;
    int tokens_per_frame = 0;
    Mat<T> latents;
    Mat<T> actions;
    std::vector<std::vector<int>> prompts;
    std::vector<int> frame_prompt;

    int frames() const { return layout.frames(); }
    int chunks() const { return layout.chunks(); }

    Mat<T> frame_rows(int f0, int f1) const {
        Mat<T> m((f1 - f0) * tokens_per_frame, latents.cols);
        std::copy_n(latents.row(f0 * tokens_per_frame), m.v.size(), m.v.begin());
        return m;
    }

    /// Model input for frames [f0, f1) with latents x and per-frame t.
    DitInput<T> input(Var<T> x, std::vector<T> frame_t, int f0 = 0, int f1 = -1) const {
        if (f1 < 0) f1 = frames();
        DitInput<T> in;
        in.x = std::move(x);
        in.frame_chunk.assign(layout.frame_chunk.begin() + f0, layout.frame_chunk.begin() + f1);
        in.frame_slot.assign(layout.frame_slot.begin() + f0, layout.frame_slot.begin() + f1);
        in.frame_t = std::move(frame_t);
        in.actions = Mat<T>(f1 - f0, kActionFeatures);
        std::copy_n(actions.row(f0), static_cast<size_t>(f1 - f0) * kActionFeatures, in.actions.v.begin());
        in.prompts = prompts;
        in.frame_prompt.assign(frame_prompt.begin() + f0, frame_prompt.begin() + f1);
        return in;
    }
};

/// Maps per-frame prompt strings to prompt groups of hashed tokens.
inline void group_prompts(const std::vector<std::string>& per_frame, int vocab, std::vector<std::vector<int>>& prompts,
                          std::vector<int>& frame_prompt) {
    std::map<std::string, int> seen;
    prompts.clear();
    frame_prompt.clear();
    for (const auto& p : per_frame) {
        auto [it, fresh] = seen.emplace(p, static_cast<int>(prompts.size()));
        if (fresh) prompts.push_back(text_tokens(p, vocab));
        frame_prompt.push_back(it->second);
    }
}

/// Action features of frames relative to the first pose in `poses`.
template <class T>
Mat<T> window_actions(const std::vector<CameraPose>& poses, const std::vector<ActionState>& actions) {
    Mat<T> m(static_cast<int>(poses.size()), kActionFeatures);
    for (size_t f = 0; f < poses.size(); ++f) {
        const auto row = frame_action_features(poses[0], poses[f], actions[f]);
        for (int k = 0; k < kActionFeatures; ++k) m(static_cast<int>(f), k) = static_cast<T>(row[static_cast<size_t>(k)]);
    }
    return m;
}

template <class T>
Window<T> make_window(const ClipTensors<T>& clip, int start, int chunks, int text_vocab) {
    LBW_REQUIRE(start >= 0 && chunks >= 0 && chunks <= clip.max_chunks(start), ErrorCode::insufficient_frames,
                "clip has " + std::to_string(clip.frames()) + " frames; window needs " +
                    std::to_string(start + 1 + chunks * clip.chunk_len));
    const int nf = 1 + chunks * clip.chunk_len;
    Window<T> w;
    w.layout = Layout::anchored(nf, clip.chunk_len);
    w.tokens_per_frame = clip.tokens_per_frame;
    w.latents = Mat<T>(nf * clip.tokens_per_frame, clip.latents.cols);
    std::copy_n(clip.latents.row(start * clip.tokens_per_frame), w.latents.v.size(), w.latents.v.begin());
    const std::vector<CameraPose> poses(clip.poses.begin() + start, clip.poses.begin() + start + nf);
    std::vector<ActionState> acts(clip.actions.begin() + start, clip.actions.begin() + start + nf);
    acts[0] = ActionState{};  // the anchor arrives with no action
    w.actions = window_actions<T>(poses, acts);
    group_prompts({clip.prompts.begin() + start, clip.prompts.begin() + start + nf}, text_vocab, w.prompts, w.frame_prompt);
    return w;
}

template <class T>
struct TrainSample {
    const Window<T>* window = nullptr;
    std::uint64_t seed = 0;
};

/// Mean squared error over frames [f0, f1) of a frame-major block.
template <class T>
Var<T> frame_mse(const Var<T>& pred, const Mat<T>& target, int f0, int f1, int tokens_per_frame) {
    return mse(slice_rows(pred, f0 * tokens_per_frame, f1 * tokens_per_frame),
               constant(slice_rows(constant(target), f0 * tokens_per_frame, f1 * tokens_per_frame).value()));
}

// --- teacher ----------------------------------------------------------------

enum class TaskMode : std::uint8_t { i2v, v2v };

struct TeacherDraw {
    double t = 0;
    int prefix_frames = 1;
    Expert expert = Expert::high;
};

/// Conditioning prefix and global t for one sample.
inline TeacherDraw draw_teacher(int window_chunks, int chunk_len, TaskMode mode, double shift, double t_boundary,
                                std::mt19937_64& rng) {
    TeacherDraw d;
    if (mode == TaskMode::v2v) {
        LBW_REQUIRE(window_chunks >= 3, ErrorCode::contract_violation,
                    "video-to-video needs the anchor, a prefix chunk and a target chunk");
        std::uniform_int_distribution<int> k(1, window_chunks - 2);
        d.prefix_frames = 1 + k(rng) * chunk_len;
    } else {
        LBW_REQUIRE(window_chunks >= 2, ErrorCode::contract_violation, "image-to-video needs a chunk after the anchor");
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    d.t = shift_timestep(1.0 - unit(rng), shift);  // u in (0, 1]
    d.expert = route_expert(d.t, t_boundary);
    return d;
}

/// Denoiser callback: (input, global t) -> x0 prediction.
template <class T>
using Denoiser = std::function<Var<T>(const DitInput<T>&, double)>;

template <class T>
Denoiser<T> moe_denoiser(const MoE<T>& moe) {
    return [&moe](const DitInput<T>& in, double t) { return moe.route(t).forward(in, MaskMode::bidirectional).x0; };
}

/// Bidirectional; prefix frames clean, the rest at one global t; MSE on the non-prefix frames.
template <class T>
Var<T> teacher_loss(const Denoiser<T>& denoise, const std::vector<TrainSample<T>>& batch, TaskMode mode, double shift,
                    double t_boundary, std::vector<TeacherDraw>* draws = nullptr) {
    LBW_REQUIRE(!batch.empty(), ErrorCode::invalid_argument, "empty batch");
    Var<T> total;
    for (const auto& s : batch) {
        const Window<T>& w = *s.window;
        std::mt19937_64 rng(s.seed);
        const TeacherDraw d = draw_teacher(w.chunks(), w.layout.chunk_len, mode, shift, t_boundary, rng);
        if (draws) draws->push_back(d);
        const int n = w.tokens_per_frame, nf = w.frames();
        std::vector<T> ft(static_cast<size_t>(nf), static_cast<T>(d.t));
        std::fill(ft.begin(), ft.begin() + d.prefix_frames, T(0));
        const Mat<T> eps = gaussian<T>(w.latents.rows, w.latents.cols, rng);
        const Mat<T> xt = add_noise_frames(w.latents, ft, eps, n);
        const Var<T> x0 = denoise(w.input(constant(xt), ft), d.t);
        const Var<T> l = frame_mse(x0, w.latents, d.prefix_frames, nf, n);
        total = total ? add(total, l) : l;
    }
    return scale(total, static_cast<T>(1.0 / batch.size()));
}

/// One optimizer step on the teacher store.
template <class T>
double teacher_train_step(const MoE<T>& teacher, ParamStore<T>& store, Adam<T>& opt, const std::vector<TrainSample<T>>& batch,
                          TaskMode mode, double shift, std::vector<TeacherDraw>* draws = nullptr) {
    store.zero_grad();
    const Var<T> loss = teacher_loss(moe_denoiser(teacher), batch, mode, shift, teacher.boundary(), draws);
    backward(loss);
    opt.step(store);
    return static_cast<double>(loss.item());
}

// --- causal adaptation ------------------------------------------------------

/// Block-causal diffusion forcing: anchor clean, each later chunk at its own t.
template <class T>
Var<T> causal_adapt_loss(const Dit<T>& student, const std::vector<TrainSample<T>>& batch, const DiffusionConfig& dcfg,
                         std::vector<std::vector<double>>* chunk_ts = nullptr) {
    LBW_REQUIRE(!batch.empty(), ErrorCode::invalid_argument, "empty batch");
    Var<T> total;
    for (const auto& s : batch) {
        const Window<T>& w = *s.window;
        LBW_REQUIRE(w.chunks() >= 2, ErrorCode::contract_violation, "causal adaptation needs a chunk after the anchor");
        std::mt19937_64 rng(s.seed);
        std::vector<double> ts = sample_chunk_timesteps(w.chunks() - 1, dcfg, rng);
        ts.insert(ts.begin(), 0.0);
        if (chunk_ts) chunk_ts->push_back(ts);
        const int n = w.tokens_per_frame, nf = w.frames();
        std::vector<T> ft;
        for (int f = 0; f < nf; ++f) ft.push_back(static_cast<T>(ts[static_cast<size_t>(w.layout.frame_chunk[static_cast<size_t>(f)])]));
        const Mat<T> eps = gaussian<T>(w.latents.rows, w.latents.cols, rng);
        const Var<T> x0 = student.forward(w.input(constant(add_noise_frames(w.latents, ft, eps, n)), ft), MaskMode::block_causal).x0;
        const Var<T> l = frame_mse(x0, w.latents, 1, nf, n);
        total = total ? add(total, l) : l;
    }
    return scale(total, static_cast<T>(1.0 / batch.size()));
}

template <class T>
double causal_adapt_step(const Dit<T>& student, ParamStore<T>& store, Adam<T>& opt, const std::vector<TrainSample<T>>& batch,
                         const DiffusionConfig& dcfg) {
    store.zero_grad();
    const Var<T> loss = causal_adapt_loss(student, batch, dcfg);
    backward(loss);
    opt.step(store);
    return static_cast<double>(loss.item());
}

// --- teacher sampling -------------------------------------------------------

/// Euler on the shifted grid from t = 1 to 0, velocity (x - x0) / t. Frames
/// before prefix_frames are held clean. `noise` covers the remaining frames.
template <class T>
Mat<T> teacher_sample(const MoE<T>& teacher, const Window<T>& cond, int prefix_frames, const Mat<T>& noise, int steps,
                      double shift, std::vector<Expert>* path = nullptr) {
    const int n = cond.tokens_per_frame, nf = cond.frames();
    LBW_REQUIRE(prefix_frames >= 1 && prefix_frames < nf, ErrorCode::invalid_argument, "prefix must leave frames to sample");
    LBW_REQUIRE(noise.rows == (nf - prefix_frames) * n && noise.cols == cond.latents.cols, ErrorCode::invalid_argument,
                "noise shape does not match the frames to sample");
    const auto grid = sampling_grid(steps, shift);
    Mat<T> x = cond.latents;
    std::copy(noise.v.begin(), noise.v.end(), x.v.begin() + static_cast<std::ptrdiff_t>(prefix_frames) * n * x.cols);
    const size_t head = static_cast<size_t>(prefix_frames) * n * x.cols;
    for (int k = 0; k < steps; ++k) {
        const double t = grid[static_cast<size_t>(k)], t_next = grid[static_cast<size_t>(k) + 1];
        if (path) path->push_back(route_expert(t, teacher.boundary()));
        std::vector<T> ft(static_cast<size_t>(nf), static_cast<T>(t));
        std::fill(ft.begin(), ft.begin() + prefix_frames, T(0));
        const Mat<T> x0 = teacher.route(t).forward(cond.input(constant(x), ft), MaskMode::bidirectional).x0.value();
        for (size_t i = head; i < x.v.size(); ++i) {
            if (t_next == 0.0) {
                x.v[i] = x0.v[i];
            } else {
                const double vel = (static_cast<double>(x.v[i]) - x0.v[i]) / t;
                x.v[i] = static_cast<T>(x.v[i] + (t_next - t) * vel);
            }
        }
    }
    return x;
}

inline int count_switches(const std::vector<Expert>& path) {
    int s = 0;
    for (size_t i = 1; i < path.size(); ++i) s += path[i] != path[i - 1];
    return s;
}

// --- metrics ----------------------------------------------------------------

/// PSNR in dB over [-1, 1] latents (peak-to-peak 2).
template <class T>
double psnr(const Mat<T>& a, const Mat<T>& b) {
    LBW_REQUIRE(a.v.size() == b.v.size() && !a.v.empty(), ErrorCode::invalid_argument, "psnr: shape mismatch");
    double se = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const double d = std::clamp(static_cast<double>(a.v[i]), -1.0, 1.0) - static_cast<double>(b.v[i]);
        se += d * d;
    }
    const double m = se / static_cast<double>(a.v.size());
    return m <= 0 ? 100.0 : 10 * std::log10(4.0 / m);
}

}  // namespace lbw
