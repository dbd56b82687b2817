// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "lbw/pipeline.hpp"

using namespace lbw;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.frame_height = c.frame_width = 8;
    c.patch = 4;
    c.dim = 16;
    c.blocks = 1;
    c.heads = 2;
    c.chunk_len = 2;
    c.mlp_ratio = 2;
    c.text_vocab = 16;
    c.time_freqs = 4;
    return c;
}

// 16 steps of pi/8: anchor + 8 chunks
const std::vector<ClipTensors<float>>& clips() {
    static const std::vector<ClipTensors<float>> c = [] {
        ClipSpec s;
        s.kind = TrajectoryKind::rotation;
        s.seed = 2;
        s.height = s.width = 8;
        s.angular_speed = std::numbers::pi;
        return tensors_of<float>({generate_clip(s)}, tiny());
    }();
    return c;
}

template <class T>
void randomize(ParamStore<T>& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& [_, p] : s.items()) p.mutable_value() = normal_init<T>(p.rows(), p.cols(), 0.3, rng);
}

}  // namespace

TEST(Windows, StartsAndStride) {
    ASSERT_EQ(clips()[0].frames(), 17);
    EXPECT_EQ(clip_windows(clips()[0], 4, 16).size(), 9u);  // starts 0..8
    const auto w = clip_windows(clips()[0], 4, 16, 3);
    ASSERT_EQ(w.size(), 3u);
    EXPECT_EQ(w[2].chunks(), 5);
    EXPECT_EQ(w[2].frames(), 9);
    const int n = clips()[0].tokens_per_frame;
    const auto& lat = clips()[0].latents;
    const std::vector<float> frame6(lat.v.begin() + 6 * n * lat.cols, lat.v.begin() + 7 * n * lat.cols);
    EXPECT_EQ(w[2].frame_rows(0, 1).v, frame6);
    EXPECT_TRUE(clip_windows(clips()[0], 9, 16).empty());
}

TEST(Windows, DrawRejectsClipsTooShort) {
    std::mt19937_64 rng(1);
    try {
        (void)detail::draw_windows(clips(), 9, 16, 1, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::insufficient_frames);
    }
    EXPECT_EQ(detail::draw_windows(clips(), 8, 16, 3, rng).size(), 3u);
}

TEST(ChunkPsnr, PerChunkAgainstHandValue) {
    const auto w = make_window(clips()[0], 0, 8, 16);
    Mat<float> other = w.latents;
    // offset chunk 3 (frames 5, 6) by 0.2: mse 0.04, psnr 10 log10(4 / 0.04) = 20
    const int n = w.tokens_per_frame;
    for (int r = 5 * n; r < 7 * n; ++r)
        for (int c = 0; c < other.cols; ++c) other(r, c) = std::clamp(other(r, c), -0.8f, 0.8f) + 0.2f;
    Mat<float> base = w.latents;
    for (int r = 5 * n; r < 7 * n; ++r)
        for (int c = 0; c < base.cols; ++c) base(r, c) = std::clamp(base(r, c), -0.8f, 0.8f);
    const auto p = chunk_psnr(w, other, base);
    ASSERT_EQ(p.size(), 8u);
    for (size_t i = 0; i < p.size(); ++i) {
        if (i == 2)
            EXPECT_NEAR(p[i], 20.0, 1e-4);
        else
            EXPECT_EQ(p[i], 100.0);
    }
}

TEST(StudentRollout, AnchorKeptDeterministicAndCacheBound) {
    const ModelConfig m = tiny();
    ParamStore<float> s;
    Dit<float> student(m, s, "student.", 1);
    randomize(s, 3);
    const auto w = make_window(clips()[0], 0, 8, 16);
    const auto a = student_rollout(student, w, 4, 9, 5), b = student_rollout(student, w, 4, 9, 5);
    EXPECT_EQ(a.v, b.v);
    const int n = w.tokens_per_frame;
    for (int i = 0; i < n * a.cols; ++i) ASSERT_EQ(a.v[static_cast<size_t>(i)], w.latents.v[static_cast<size_t>(i)]);
    EXPECT_NE(a.v, w.latents.v);
    // a cache that holds every chunk is unbounded in effect; a two-chunk cache is not
    EXPECT_EQ(student_rollout(student, w, 4, 64, 5).v, a.v);
    EXPECT_NE(student_rollout(student, w, 4, 2, 5).v, a.v);
    EXPECT_NE(student_rollout(student, w, 4, 9, 6).v, a.v);
}

TEST(Drivers, StepCountsAndProgress) {
    const ModelConfig m = tiny();
    ParamStore<float> ts;
    MoE<float> teacher(m, ts, "teacher.", 1);
    TeacherTrainConfig tc;
    tc.curriculum.phases = {{2, 1.0, 3}, {4, 3.0, 2}};
    int calls = 0;
    const auto h0 = ts.hash();
    const auto losses = train_teacher(teacher, ts, clips(), tc, 7, [&](int step, double) { EXPECT_EQ(step, calls++); });
    EXPECT_EQ(losses.size(), 5u);
    EXPECT_EQ(calls, 5);
    EXPECT_NE(ts.hash(), h0);
    for (double l : losses) EXPECT_TRUE(std::isfinite(l));

    ParamStore<float> ss;
    Dit<float> student(m, ss, "student.", 2);
    CausalTrainConfig cc;
    cc.chunks = 3;
    cc.steps = 4;
    EXPECT_EQ(train_causal(student, ss, clips(), cc, 8).size(), 4u);

    DistillConfig dc;
    dc.horizon = 2;
    dc.keep_chunks = 1;
    dc.ttur = 2;
    dc.disc_hidden = 4;
    DistillState<float> ds(m, dc, DiffusionConfig{}, 3);
    ds.init_from(ts, &ss);
    EXPECT_EQ(train_distill(ds, clips(), 3, 9).size(), 3u);
    EXPECT_EQ(ds.student_updates, 3);
    EXPECT_EQ(ds.fake_updates, 6);
}
