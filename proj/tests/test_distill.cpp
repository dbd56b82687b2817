// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>
#include <memory>

#include "gradcheck.hpp"
#include "lbw/distill.hpp"

using namespace lbw;
using lbw::testing::all_params;
using lbw::testing::gradcheck;
using lbw::testing::worst;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.frame_height = c.frame_width = 8;
    c.patch = 4;
    c.dim = 16;
    c.blocks = 2;
    c.heads = 2;
    c.chunk_len = 2;
    c.mlp_ratio = 2;
    c.text_vocab = 32;
    c.time_freqs = 4;
    return c;
}

DistillConfig small_distill() {
    DistillConfig d;
    d.horizon = 3;
    d.keep_chunks = 2;
    d.ttur = 2;
    d.cache_chunks = 8;
    d.lambda_adv = 0.05;
    d.disc_hidden = 8;
    return d;
}

const ClipRecord& tiny_clip() {
    static const ClipRecord clip = [] {
        ClipSpec spec;
        spec.kind = TrajectoryKind::rotation;
        spec.seed = 5;
        spec.height = spec.width = 8;
        spec.angular_speed = std::numbers::pi / 2;
        return generate_clip(spec);
    }();
    return clip;
}

const Window<double>& tiny_window() {
    static const Window<double> w = make_window(clip_tensors<double>(tiny_clip(), tiny()), 0, 3, tiny().text_vocab);
    return w;
}

template <class T>
void randomize(ParamStore<T>& s, std::uint64_t seed, double sd = 0.3) {
    std::mt19937_64 rng(seed);
    for (auto& [_, p] : s.items()) p.mutable_value() = normal_init<T>(p.rows(), p.cols(), sd, rng);
}

/// State whose real and fake scores start from one random teacher.
std::unique_ptr<DistillState<double>> make_state(const DistillConfig& d = small_distill(), std::uint64_t seed = 3) {
    const auto cfg = tiny();
    auto s = std::make_unique<DistillState<double>>(cfg, d, DiffusionConfig{}, seed);
    ParamStore<double> teacher_store;
    MoE<double> teacher(cfg, teacher_store, "teacher.", seed);
    randomize(teacher_store, seed + 100, 0.2);
    s->init_from(teacher_store, nullptr);
    randomize(s->disc_store, seed + 200, 0.5);
    return s;
}

double grad_norm(const ParamStore<double>& store) {
    double sq = 0;
    for (const auto& [_, p] : store.items())
        if (p.has_grad())
            for (double g : p.grad().v) sq += g * g;
    return std::sqrt(sq);
}

bool touched(const ParamStore<double>& store) { return grad_norm(store) > 0; }

void zero_all(DistillState<double>& s) {
    s.real_store.zero_grad();
    s.fake_store.zero_grad();
    s.student_store.zero_grad();
    s.disc_store.zero_grad();
}

/// A single clean chunk held as a leaf, placed at `chunk` with data context.
SelfRollout<double> leaf_rollout(const Window<double>& w, int chunk, const Mat<double>& x) {
    SelfRollout<double> r;
    r.latents = w.latents;
    GeneratedChunk<double> g;
    g.chunk = chunk;
    g.frames = frames_of_chunks(w, {chunk});
    std::vector<int> ctx;
    for (int c = 0; c < chunk; ++c) ctx.push_back(c);
    g.context_frames = frames_of_chunks(w, ctx);
    g.x = parameter(x);
    r.kept.push_back(g);
    return r;
}

Mat<double> oracle_velocity(const MoE<double>& net, const DitInput<double>& in, int rows, double t) {
    const Mat<double> x0 = net.route(t).forward(in, MaskMode::bidirectional).x0.value();
    const Mat<double>& x = in.x.value();
    Mat<double> v(rows, x.cols);
    const int r0 = x.rows - rows;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < x.cols; ++j) v(i, j) = (x(r0 + i, j) - x0(r0 + i, j)) / t;
    return v;
}

}  // namespace

// --- schedule helpers -------------------------------------------------------

TEST(StudentSchedule, TimestepSubsetsAndAnneal) {
    const DiffusionConfig d;
    EXPECT_EQ(student_timesteps(4, d), (std::vector<double>{1, 0.75, 0.5, 0.25}));
    EXPECT_EQ(student_timesteps(2, d), (std::vector<double>{1, 0.5}));
    EXPECT_EQ(student_timesteps(1, d), (std::vector<double>{1}));
    EXPECT_THROW(student_timesteps(0, d), Error);
    EXPECT_THROW(student_timesteps(5, d), Error);
    DistillConfig c;
    c.steps_start = 4, c.steps_end = 1, c.anneal_steps = 30;
    EXPECT_EQ(c.student_steps(0), 4);
    EXPECT_EQ(c.student_steps(10), 3);
    EXPECT_EQ(c.student_steps(30), 1);
    EXPECT_EQ(c.student_steps(1000), 1);
}

TEST(StudentSchedule, NoiseLevelsComeFromShiftedGrid) {
    DistillConfig c;
    const auto grid = sampling_grid(c.noise_grid, c.noise_shift);
    std::mt19937_64 rng(4);
    std::map<double, int> seen;
    for (int i = 0; i < 4000; ++i) ++seen[draw_noise_level(c, rng)];
    EXPECT_EQ(static_cast<int>(seen.size()), c.noise_grid);
    for (const auto& [t, n] : seen) {
        EXPECT_GT(t, 0.0);
        EXPECT_NE(std::find(grid.begin(), grid.end(), t), grid.end());
        EXPECT_NEAR(n / 4000.0, 1.0 / c.noise_grid, 0.03);
    }
}

TEST(DistillConfig, Validation) {
    DistillConfig c;
    c.keep_chunks = 9;
    c.horizon = 8;
    EXPECT_THROW(c.validate(), Error);
    c = DistillConfig{};
    c.steps_start = 5;
    EXPECT_THROW(c.validate(), Error);
    c = DistillConfig{};
    c.ttur = 0;
    EXPECT_THROW(c.validate(), Error);
    KvConfig kv;
    kv.set("distill.ttur", "3");
    kv.set("distill.keep_chunks", "1");
    const auto d = DistillConfig::from_kv(kv);
    EXPECT_EQ(d.ttur, 3);
    EXPECT_EQ(d.keep_chunks, 1);
}

// --- student generation -----------------------------------------------------

TEST(StudentGenerate, UnboundedCacheMatchesLargeCacheAndIsDeterministic) {
    auto cfg = small_distill();
    auto run = [&](int m, std::uint64_t seed) {
        cfg.cache_chunks = m;
        auto s = make_state(cfg);
        std::mt19937_64 rng(seed);
        return self_rollout(*s, tiny_window(), rng, 2).latents;
    };
    const auto inf = run(1 << 20, 9), exact = run(4, 9), again = run(4, 9);
    EXPECT_EQ(inf.v, exact.v);
    EXPECT_EQ(exact.v, again.v);
    EXPECT_NE(run(4, 10).v, exact.v);
    EXPECT_NE(run(1, 9).v, exact.v);  // eviction does change the context
}

TEST(StudentGenerate, SameSeedSameChunk) {
    auto s = make_state();
    const auto& w = tiny_window();
    auto chunk = [&](std::uint64_t seed) {
        KVCache<double> cache(8);
        commit_clean(s->student, cache, select_frames(w, {0}, constant(w.frame_rows(0, 1)), {0.0}));
        std::mt19937_64 rng(seed);
        const auto x = student_generate(s->student, cache, select_frames(w, frames_of_chunks(w, {1}), Var<double>(), {}),
                                        student_timesteps(4, s->diffusion), rng, false);
        EXPECT_EQ(cache.chunks(), 2);
        return x.value();
    };
    EXPECT_EQ(chunk(1).v, chunk(1).v);
    EXPECT_NE(chunk(1).v, chunk(2).v);
}

TEST(StudentGenerate, CacheWidthMismatch) {
    auto s = make_state();
    const auto& w = tiny_window();
    auto narrow = tiny();
    narrow.blocks = 1;
    ParamStore<double> store;
    Dit<double> other(narrow, store, "student.", 1);
    KVCache<double> cache(8);
    commit_clean(other, cache, select_frames(w, {0}, constant(w.frame_rows(0, 1)), {0.0}));
    std::mt19937_64 rng(1);
    try {
        (void)student_generate(s->student, cache, select_frames(w, frames_of_chunks(w, {1}), Var<double>(), {}), {1.0},
                               rng, false);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::contract_violation);
    }
}

TEST(StudentGenerate, RolloutKeepsExactlyMinKChunks) {
    for (int k : {1, 2, 3}) {
        auto cfg = small_distill();
        cfg.keep_chunks = k;
        auto s = make_state(cfg);
        std::mt19937_64 rng(2);
        const auto r = self_rollout(*s, tiny_window(), rng, 1);
        ASSERT_EQ(static_cast<int>(r.kept.size()), k);
        EXPECT_EQ(r.kept.back().chunk, cfg.horizon);
        EXPECT_EQ(r.kept.front().chunk, cfg.horizon - k + 1);
        // the anchor is data, generated chunks replace the rest
        for (int i = 0; i < tiny_window().tokens_per_frame; ++i) EXPECT_EQ(r.latents(i, 0), tiny_window().latents(i, 0));
    }
    auto cfg = small_distill();
    cfg.horizon = 5;
    cfg.keep_chunks = 1;
    auto s = make_state(cfg);
    std::mt19937_64 rng(2);
    EXPECT_THROW(self_rollout(*s, tiny_window(), rng, 1), Error);
}

// --- DMD ----------------------------------------------------------------------

TEST(Dmd, IdenticalScoresGiveExactlyZeroGradient) {
    auto s = make_state();
    std::mt19937_64 rng(5);
    const auto r = self_rollout(*s, tiny_window(), rng, 2);
    zero_all(*s);
    const auto loss = dmd_objective(*s, tiny_window(), r, rng);
    EXPECT_EQ(loss.item(), 0.0);
    backward(loss);
    for (const auto& [name, p] : s->student_store.items())
        if (p.has_grad())
            for (double g : p.grad().v) ASSERT_EQ(g, 0.0) << name;
}

TEST(Dmd, GradientIsScoreDifference) {
    auto s = make_state();
    randomize(s->fake_store, 77, 0.2);
    const auto& w = tiny_window();
    std::mt19937_64 data(6);
    const auto x = gaussian<double>(w.tokens_per_frame * 2, tiny().token_dim(), data);
    const auto r = leaf_rollout(w, 2, x);

    std::mt19937_64 rng(11), replay(11);
    const auto loss = dmd_objective(*s, w, r, rng);
    backward(loss);

    // oracle: replay the draws and evaluate both scores at the noised point
    const double t = draw_noise_level(s->cfg, replay);
    const auto eps = gaussian<double>(x.rows, x.cols, replay);
    Mat<double> xt(x.rows, x.cols);
    for (size_t i = 0; i < x.v.size(); ++i) xt.v[i] = (1 - t) * x.v[i] + t * eps.v[i];
    const auto in = score_input(w, r.kept[0], w.latents, constant(xt), t);
    const auto mr = oracle_velocity(s->real, in, x.rows, t), mf = oracle_velocity(s->fake, in, x.rows, t);
    double half_sq = 0, max_err = 0, scale_ref = 0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        const double delta = mr.v[i] - mf.v[i];
        half_sq += 0.5 * delta * delta;
        max_err = std::max(max_err, std::abs(r.kept[0].x.grad().v[i] - delta));
        scale_ref = std::max(scale_ref, std::abs(delta));
    }
    EXPECT_GT(scale_ref, 1e-3);
    EXPECT_LE(max_err, 1e-12 * std::max(1.0, scale_ref));
    EXPECT_NEAR(loss.item(), half_sq, 1e-9 * half_sq);
}

TEST(Dmd, FiniteDifferenceWithStopGradientTargetHeld) {
    std::mt19937_64 rng(8);
    const auto x0 = gaussian<double>(6, 5, rng), mr = gaussian<double>(6, 5, rng), mf = gaussian<double>(6, 5, rng);
    Var<double> x = parameter(x0);
    backward(dmd_loss(x, mr, mf));
    const Mat<double> analytic = x.grad();
    // the sg[] target is a constant: freeze it at the base point and differentiate
    Mat<double> target = x0;
    for (size_t i = 0; i < target.v.size(); ++i) target.v[i] -= mr.v[i] - mf.v[i];
    const auto rep = gradcheck({{"x", x}}, [&] { return scale(sum_sq(sub(x, constant(target))), 0.5); }, 30);
    EXPECT_LE(worst(rep), 1e-4);
    x.zero_grad();
    backward(scale(sum_sq(sub(x, constant(target))), 0.5));
    for (size_t i = 0; i < analytic.v.size(); ++i) {
        EXPECT_NEAR(analytic.v[i], mr.v[i] - mf.v[i], 1e-14);
        EXPECT_NEAR(analytic.v[i], x.grad().v[i], 1e-14);
    }
    EXPECT_THROW(dmd_loss(x, Mat<double>(2, 2), mf), Error);
}

TEST(Dmd, NoGradientIntoRealOrFakeScore) {
    auto s = make_state();
    randomize(s->fake_store, 78, 0.2);
    s->real_store.set_all_trainable(true);  // the graph itself must not reach it
    std::mt19937_64 rng(12);
    const auto r = self_rollout(*s, tiny_window(), rng, 2);
    zero_all(*s);
    backward(dmd_objective(*s, tiny_window(), r, rng));
    EXPECT_FALSE(touched(s->real_store));
    EXPECT_FALSE(touched(s->fake_store));
    EXPECT_FALSE(touched(s->disc_store));
    EXPECT_TRUE(touched(s->student_store));
}

// --- fake score -------------------------------------------------------------

TEST(FakeScore, LearnsConstantVideo) {
    // rig width: token_dim 48 needs dim >= 48 for an exact linear cancel
    auto cfg = tiny();
    cfg.dim = 64;
    cfg.heads = 4;
    cfg.blocks = 1;
    auto d = small_distill();
    d.lr_fake = 3e-3;
    DistillState<double> s(cfg, d, DiffusionConfig{}, 4);
    const auto w = make_window(clip_tensors<double>(tiny_clip(), cfg), 0, 3, cfg.text_vocab);
    Mat<double> x(2 * w.tokens_per_frame, cfg.token_dim());
    for (auto& v : x.v) v = 0.25;
    SelfRollout<double> r = leaf_rollout(w, 1, x);
    r.kept.push_back(leaf_rollout(w, 2, x).kept[0]);
    for (int c = 1; c < 4; ++c)
        for (int i = w.tokens_per_frame * (1 + 2 * (c - 1)); i < w.tokens_per_frame * (1 + 2 * c); ++i)
            for (int j = 0; j < x.cols; ++j) r.latents(i, j) = 0.25;
    std::mt19937_64 rng(1);
    double first = 0, last = 0, tail = 0;
    const int steps = 2000;
    for (int i = 0; i < steps; ++i) {
        last = fake_score_step(s, w, r, rng);
        if (i == 0) first = last;
        if (i >= steps - 50) tail += last / 50;
    }
    EXPECT_EQ(s.fake_updates, steps);
    EXPECT_GT(first, 1e-2);
    EXPECT_LT(tail, 1e-3) << "first " << first;
}

TEST(FakeScore, TouchesFakeScoreOnly) {
    auto s = make_state();
    std::mt19937_64 rng(13);
    const auto r = self_rollout(*s, tiny_window(), rng, 2);
    zero_all(*s);
    backward(fake_score_loss(*s, tiny_window(), r, rng));
    EXPECT_TRUE(touched(s->fake_store));
    EXPECT_FALSE(touched(s->student_store));
    EXPECT_FALSE(touched(s->real_store));
    EXPECT_FALSE(touched(s->disc_store));
}

// --- adversarial --------------------------------------------------------------

TEST(Gan, ZeroDiscriminatorValues) {
    const std::vector<Var<double>> zero{constant(Mat<double>(1, 1)), constant(Mat<double>(1, 1))};
    const double sp1 = std::log1p(std::exp(1.0)), sp0 = std::log(2.0);
    EXPECT_NEAR(gan_g_loss(zero).item(), 1.31326168751822, 1e-12);
    EXPECT_NEAR(gan_g_loss(zero).item(), sp1, 1e-14);
    EXPECT_NEAR(gan_d_loss(zero, zero).item(), sp0 - sp1, 1e-14);
    EXPECT_NEAR(gan_d_loss(zero, zero).item(), 0.69314718055995 - 1.31326168751822, 1e-12);
    EXPECT_THROW(gan_g_loss<double>({}), Error);
}

TEST(Gan, HeadWithZeroOutputLayerGivesZeroLogit) {
    ParamStore<double> store;
    DiscHead<double> head(store, "disc.", 16, 8, 1);
    store.get("disc.w2").mutable_value() = Mat<double>(8, 1);
    std::mt19937_64 rng(2);
    EXPECT_EQ(head(constant(gaussian<double>(5, 16, rng))).item(), 0.0);
}

TEST(Gan, DiscLossTouchesHeadOnly) {
    auto s = make_state();
    std::mt19937_64 rng(14);
    const auto r = self_rollout(*s, tiny_window(), rng, 2);
    zero_all(*s);
    const auto ld = disc_loss(*s, tiny_window(), r, rng);
    backward(ld);
    EXPECT_FALSE(touched(s->fake_store));
    EXPECT_FALSE(touched(s->student_store));
    EXPECT_FALSE(touched(s->real_store));
    for (const std::string n : {"disc.w1", "disc.w2", "disc.b2"}) {
        const auto& p = s->disc_store.get(n);
        ASSERT_TRUE(p.has_grad()) << n;
        double sq = 0;
        for (double g : p.grad().v) sq += g * g;
        EXPECT_GT(sq, 0.0) << n;
    }
}

TEST(Gan, LossGradientsMatchFiniteDifferences) {
    ParamStore<double> store;
    DiscHead<double> head(store, "disc.", 6, 5, 3);
    randomize(store, 4, 0.7);
    std::mt19937_64 rng(5);
    Var<double> real = parameter(gaussian<double>(4, 6, rng)), fake1 = parameter(gaussian<double>(4, 6, rng)),
                fake2 = parameter(gaussian<double>(3, 6, rng));
    auto vars = all_params(store);
    vars.emplace_back("real", real);
    vars.emplace_back("fake1", fake1);
    vars.emplace_back("fake2", fake2);
    const auto g = gradcheck(vars, [&] { return gan_g_loss<double>({head(fake1), head(fake2)}); });
    EXPECT_LE(worst(g), 1e-4);
    const auto d = gradcheck(vars, [&] { return gan_d_loss<double>({head(real)}, {head(fake1), head(fake2)}); });
    EXPECT_LE(worst(d), 1e-4);
}

// --- outer step ---------------------------------------------------------------

TEST(SelfRollout, TruncationAudit) {
    for (int k : {3, 1}) {
        auto cfg = small_distill();
        cfg.keep_chunks = k;
        auto s = make_state(cfg);
        randomize(s->fake_store, 79, 0.2);
        const auto m = self_rollout_train_step(*s, tiny_window(), 21, true);
        ASSERT_EQ(static_cast<int>(m.chunk_grad.size()), cfg.horizon);
        EXPECT_EQ(m.kept_chunks, k);
        for (int c = 0; c < cfg.horizon; ++c) {
            if (c >= cfg.horizon - k)
                EXPECT_GT(m.chunk_grad[static_cast<size_t>(c)], 0.0) << "K=" << k << " chunk " << c;
            else
                EXPECT_EQ(m.chunk_grad[static_cast<size_t>(c)], 0.0) << "K=" << k << " chunk " << c;
        }
    }
}

TEST(SelfRollout, RealScoreFrozenAndTturBookkeeping) {
    auto cfg = small_distill();
    cfg.ttur = 3;
    cfg.horizon = 2;
    cfg.keep_chunks = 1;
    cfg.anneal_steps = 50;
    auto s = make_state(cfg);
    const auto real0 = s->real_store.hash(), fake0 = s->fake_store.hash(), student0 = s->student_store.hash(),
               disc0 = s->disc_store.hash();
    const auto w = make_window(clip_tensors<double>(tiny_clip(), tiny()), 0, 2, tiny().text_vocab);
    for (int i = 0; i < 100; ++i) {
        const auto m = self_rollout_train_step(*s, w, 1000 + i);
        ASSERT_TRUE(std::isfinite(m.dmd) && std::isfinite(m.g) && std::isfinite(m.d) && std::isfinite(m.fake));
        EXPECT_EQ(m.student_steps, cfg.student_steps(i));
    }
    EXPECT_EQ(s->real_store.hash(), real0);
    EXPECT_NE(s->fake_store.hash(), fake0);
    EXPECT_NE(s->student_store.hash(), student0);
    EXPECT_NE(s->disc_store.hash(), disc0);
    EXPECT_EQ(s->outer_steps, 100);
    EXPECT_EQ(s->student_updates, 100);
    EXPECT_EQ(s->fake_updates, cfg.ttur * s->student_updates);
    EXPECT_EQ(s->disc_updates, s->student_updates);
    EXPECT_EQ(s->opt_fake.steps(), 300);
}

TEST(SelfRollout, IsolationMatrix) {
    auto s = make_state();
    randomize(s->fake_store, 80, 0.2);
    const auto& w = tiny_window();
    std::mt19937_64 rng(15);
    const auto r = self_rollout(*s, w, rng, 2);
    // rows: DMD, fake diffusion, L_D, L_G; columns: student, fake, head, real
    const std::vector<std::array<bool, 4>> expected{
        {true, false, false, false}, {false, true, false, false}, {false, false, true, false}, {true, false, false, false}};
    std::vector<std::array<bool, 4>> seen;
    auto audit = [&] {
        seen.push_back({touched(s->student_store), touched(s->fake_store), touched(s->disc_store), touched(s->real_store)});
        zero_all(*s);
    };
    zero_all(*s);
    backward(dmd_objective(*s, w, r, rng));
    audit();
    backward(fake_score_loss(*s, w, r, rng));
    audit();
    backward(disc_loss(*s, w, r, rng));
    audit();
    {
        FreezeScope<double> f1(s->fake_store), f2(s->disc_store);
        backward(generator_adv_loss(*s, w, r, rng));
    }
    audit();
    EXPECT_EQ(seen, expected);
}

TEST(DistillState, InitializationCopiesTeacher) {
    auto s = make_state();
    for (const auto& [name, p] : s->fake_store.items()) {
        const auto src = "teacher." + name.substr(5);
        EXPECT_EQ(p.value().v, s->real_store.get(src).value().v) << name;
    }
    for (const auto& [name, p] : s->student_store.items())
        EXPECT_EQ(p.value().v, s->real_store.get("teacher.high." + name.substr(8)).value().v) << name;
    for (const auto& [_, p] : s->real_store.items()) EXPECT_FALSE(p.requires_grad());
}
