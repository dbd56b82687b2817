// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training drivers over clips: teacher, causal adaptation, distillation,
// plus the plain student rollout used for evaluation.

#include <functional>
#include <random>
#include <vector>

#include "lbw/diffusion.hpp"
#include "lbw/distill.hpp"

namespace lbw {

/// Called after every optimizer step with (step, loss).
using Progress = std::function<void(int, double)>;

/// Windows of `chunks` chunks at every start where one fits, `stride` frames apart.
template <class T>
std::vector<Window<T>> clip_windows(const ClipTensors<T>& clip, int chunks, int text_vocab, int stride = 1) {
    std::vector<Window<T>> out;
    for (int s = 0; clip.max_chunks(s) >= chunks; s += std::max(stride, 1)) out.push_back(make_window(clip, s, chunks, text_vocab));
    return out;
}

template <class T>
std::vector<ClipTensors<T>> tensors_of(const std::vector<ClipRecord>& clips, const ModelConfig& cfg) {
    std::vector<ClipTensors<T>> out;
    for (const auto& c : clips) out.push_back(clip_tensors<T>(c, cfg));
    return out;
}

namespace detail {

/// Uniform draw of batch windows of `chunks` chunks over all clips.
template <class T>
std::vector<Window<T>> draw_windows(const std::vector<ClipTensors<T>>& clips, int chunks, int text_vocab, int batch,
                                    std::mt19937_64& rng) {
    std::vector<std::pair<int, int>> starts;
    for (int c = 0; c < static_cast<int>(clips.size()); ++c)
        for (int s = 0; clips[static_cast<size_t>(c)].max_chunks(s) >= chunks; ++s) starts.emplace_back(c, s);
    LBW_REQUIRE(!starts.empty(), ErrorCode::insufficient_frames,
                "no clip holds a window of " + std::to_string(chunks) + " chunks");
    std::uniform_int_distribution<size_t> pick(0, starts.size() - 1);
    std::vector<Window<T>> out;
    for (int b = 0; b < batch; ++b) {
        const auto [c, s] = starts[pick(rng)];
        out.push_back(make_window(clips[static_cast<size_t>(c)], s, chunks, text_vocab));
    }
    return out;
}

template <class T>
std::vector<TrainSample<T>> samples(const std::vector<Window<T>>& ws, std::mt19937_64& rng) {
    std::vector<TrainSample<T>> out;
    for (const auto& w : ws) out.push_back({&w, rng()});
    return out;
}

}  // namespace detail

struct TeacherTrainConfig {
    Curriculum curriculum;
    TaskMode mode = TaskMode::i2v;
    int batch = 1;
    double lr = 1e-3;
    double grad_clip = 1.0;
};

/// Runs the curriculum; window length follows the phase, capped by the clips.
template <class T>
std::vector<double> train_teacher(const MoE<T>& teacher, ParamStore<T>& store, const std::vector<ClipTensors<T>>& clips,
                                  const TeacherTrainConfig& cfg, std::uint64_t seed, const Progress& progress = {}) {
    cfg.curriculum.validate();
    const int vocab = teacher.high().config().text_vocab;
    int longest = 0;
    for (const auto& c : clips) longest = std::max(longest, c.max_chunks(0));
    Adam<T> opt(cfg.lr);
    opt.grad_clip = cfg.grad_clip;
    std::mt19937_64 rng(seed);
    std::vector<double> losses;
    for (int step = 0; step < cfg.curriculum.total_steps(); ++step) {
        const CurriculumPhase& ph = cfg.curriculum.at(step);
        const auto ws = detail::draw_windows(clips, std::min(ph.chunks, longest), vocab, cfg.batch, rng);
        losses.push_back(teacher_train_step(teacher, store, opt, detail::samples(ws, rng), cfg.mode, ph.shift));
        if (progress) progress(step, losses.back());
    }
    return losses;
}

/// Mean teacher loss over fixed draws; no update.
template <class T>
double teacher_eval(const MoE<T>& teacher, const std::vector<Window<T>>& windows, TaskMode mode, double shift, int draws,
                    std::uint64_t seed) {
    std::vector<TrainSample<T>> batch;
    std::mt19937_64 rng(seed);
    for (int d = 0; d < draws; ++d)
        for (const auto& w : windows) batch.push_back({&w, rng()});
    return static_cast<double>(teacher_loss(moe_denoiser(teacher), batch, mode, shift, teacher.boundary()).item());
}

struct CausalTrainConfig {
    int chunks = 4;  // chunks after the anchor per window
    int steps = 200;
    int batch = 1;
    double lr = 1e-3;
    double grad_clip = 1.0;
    DiffusionConfig diffusion;
};

template <class T>
std::vector<double> train_causal(const Dit<T>& student, ParamStore<T>& store, const std::vector<ClipTensors<T>>& clips,
                                 const CausalTrainConfig& cfg, std::uint64_t seed, const Progress& progress = {}) {
    Adam<T> opt(cfg.lr);
    opt.grad_clip = cfg.grad_clip;
    std::mt19937_64 rng(seed);
    std::vector<double> losses;
    for (int step = 0; step < cfg.steps; ++step) {
        const auto ws = detail::draw_windows(clips, cfg.chunks, student.config().text_vocab, cfg.batch, rng);
        losses.push_back(causal_adapt_step(student, store, opt, detail::samples(ws, rng), cfg.diffusion));
        if (progress) progress(step, losses.back());
    }
    return losses;
}

/// Outer distillation steps over random windows of horizon chunks.
template <class T>
std::vector<DistillMetrics> train_distill(DistillState<T>& s, const std::vector<ClipTensors<T>>& clips, int steps,
                                          std::uint64_t seed, const Progress& progress = {}) {
    std::mt19937_64 rng(seed);
    std::vector<DistillMetrics> out;
    for (int step = 0; step < steps; ++step) {
        const auto ws = detail::draw_windows(clips, s.cfg.horizon, s.model.text_vocab, 1, rng);
        out.push_back(self_rollout_train_step(s, ws[0], rng()));
        if (progress) progress(step, out.back().dmd);
    }
    return out;
}

/// Anchor from the window, then every chunk generated in order on a rolling
/// cache of M chunks with `steps` student steps. Returns the full latents.
template <class T>
Mat<T> student_rollout(const Dit<T>& student, const Window<T>& w, int steps, int cache_chunks, std::uint64_t seed,
                       const DiffusionConfig& dcfg = {}) {
    std::mt19937_64 rng(seed);
    KVCache<T> cache(cache_chunks);
    commit_clean(student, cache, select_frames(w, {0}, constant(w.frame_rows(0, 1)), {T(0)}));
    const auto ts = student_timesteps(steps, dcfg);
    Mat<T> out = w.latents;
    const int n = w.tokens_per_frame;
    for (int c = 1; c < w.chunks(); ++c) {
        const auto frames = frames_of_chunks(w, {c});
        const Var<T> x = student_generate<T>(student, cache, select_frames(w, frames, Var<T>(), {}), ts, rng, false);
        std::copy(x.value().v.begin(), x.value().v.end(), out.row(frames.front() * n));
    }
    return out;
}

/// PSNR of each chunk of `a` against `b` (anchor chunk excluded).
template <class T>
std::vector<double> chunk_psnr(const Window<T>& w, const Mat<T>& a, const Mat<T>& b) {
    std::vector<double> out;
    for (int c = 1; c < w.chunks(); ++c) {
        const auto f = frames_of_chunks(w, {c});
        out.push_back(psnr(gather_frames(a, f, w.tokens_per_frame), gather_frames(b, f, w.tokens_per_frame)));
    }
    return out;
}

}  // namespace lbw
