// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lbw/config.hpp"
#include "lbw/diffusion.hpp"
#include "lbw/model.hpp"
#include "lbw/nn.hpp"

namespace lbw {

struct DistillConfig {
    int ttur = 5;             // fake-score updates per student update
    double lambda_adv = 0.05;
    int keep_chunks = 2;      // K: chunks that carry gradient
    int cache_chunks = 8;     // M
    int horizon = 8;          // chunks generated per outer step
    int steps_start = 4, steps_end = 1, anneal_steps = 100;
    int noise_grid = 8;       // DMD / fake-score t is drawn from this shifted grid
    double noise_shift = 3;
    double lr_student = 1e-4, lr_fake = 4e-4, lr_disc = 1e-4;
    int disc_hidden = 32;

    void validate() const {
        LBW_REQUIRE(ttur >= 1, ErrorCode::invalid_argument, "ttur ratio must be >= 1");
        LBW_REQUIRE(keep_chunks >= 1 && horizon >= 1 && cache_chunks >= 1, ErrorCode::invalid_argument,
                    "K, horizon and M must be positive");
        LBW_REQUIRE(keep_chunks <= horizon, ErrorCode::invalid_argument, "K cannot exceed the rollout horizon");
        LBW_REQUIRE(steps_start >= 1 && steps_start <= 4 && steps_end >= 1 && steps_end <= 4, ErrorCode::invalid_argument,
                    "student steps must be in 1..4");
        LBW_REQUIRE(noise_grid >= 1 && noise_shift >= 1 && lambda_adv >= 0 && disc_hidden >= 1, ErrorCode::invalid_argument,
                    "bad distillation config");
    }

    static DistillConfig from_kv(const KvConfig& c) {
        DistillConfig d;
        d.ttur = c.get("distill.ttur", d.ttur);
        d.lambda_adv = c.get("distill.lambda_adv", d.lambda_adv);
        d.keep_chunks = c.get("distill.keep_chunks", d.keep_chunks);
        d.cache_chunks = c.get("distill.cache_chunks", d.cache_chunks);
        d.horizon = c.get("distill.horizon", d.horizon);
        d.steps_start = c.get("distill.steps_start", d.steps_start);
        d.steps_end = c.get("distill.steps_end", d.steps_end);
        d.anneal_steps = c.get("distill.anneal_steps", d.anneal_steps);
        d.noise_grid = c.get("distill.noise_grid", d.noise_grid);
        d.noise_shift = c.get("distill.noise_shift", d.noise_shift);
        d.lr_student = c.get("distill.lr_student", d.lr_student);
        d.lr_fake = c.get("distill.lr_fake", d.lr_fake);
        d.lr_disc = c.get("distill.lr_disc", d.lr_disc);
        d.disc_hidden = c.get("distill.disc_hidden", d.disc_hidden);
        d.validate();
        return d;
    }

    /// Linear anneal from steps_start to steps_end.
    int student_steps(long outer_step) const {
        const double f = anneal_steps <= 0 ? 1.0 : std::min(1.0, static_cast<double>(outer_step) / anneal_steps);
        return static_cast<int>(std::lround(steps_start + (steps_end - steps_start) * f));
    }
};

/// n timesteps taken evenly from the (descending) target set.
inline std::vector<double> student_timesteps(int n, const DiffusionConfig& dcfg) {
    LBW_REQUIRE(n >= 1 && n <= static_cast<int>(dcfg.targets.size()), ErrorCode::invalid_argument,
                "student steps must be between 1 and the number of target timesteps");
    std::vector<double> ts;
    const size_t m = dcfg.targets.size();
    for (int i = 0; i < n; ++i) ts.push_back(dcfg.targets[static_cast<size_t>(i) * m / static_cast<size_t>(n)]);
    return ts;
}

/// Uniform pick from the nonzero points of a shifted grid.
inline double draw_noise_level(const DistillConfig& cfg, std::mt19937_64& rng) {
    const auto grid = sampling_grid(cfg.noise_grid, cfg.noise_shift);
    std::uniform_int_distribution<int> pick(0, cfg.noise_grid - 1);
    return grid[static_cast<size_t>(pick(rng))];
}

// --- frame selection ------------------------------------------------------

template <class T>
std::vector<int> frames_of_chunks(const Window<T>& w, const std::vector<int>& chunks) {
    std::vector<int> f;
    for (int c : chunks)
        for (int i = 0; i < w.layout.chunk_frames(c); ++i) f.push_back(w.layout.first_frame(c) + i);
    return f;
}

/// Model input for an arbitrary frame subset of a window.
template <class T>
DitInput<T> select_frames(const Window<T>& w, const std::vector<int>& frames, Var<T> x, std::vector<T> frame_t) {
    DitInput<T> in;
    in.x = std::move(x);
    in.frame_t = std::move(frame_t);
    in.actions = Mat<T>(static_cast<int>(frames.size()), kActionFeatures);
    for (size_t i = 0; i < frames.size(); ++i) {
        const auto f = static_cast<size_t>(frames[i]);
        in.frame_chunk.push_back(w.layout.frame_chunk[f]);
        in.frame_slot.push_back(w.layout.frame_slot[f]);
        in.frame_prompt.push_back(w.frame_prompt[f]);
        std::copy_n(w.actions.row(frames[i]), kActionFeatures, in.actions.row(static_cast<int>(i)));
    }
    in.prompts = w.prompts;
    return in;
}

template <class T>
Mat<T> gather_frames(const Mat<T>& latents, const std::vector<int>& frames, int tokens_per_frame) {
    Mat<T> m(static_cast<int>(frames.size()) * tokens_per_frame, latents.cols);
    for (size_t i = 0; i < frames.size(); ++i)
        std::copy_n(latents.row(frames[i] * tokens_per_frame), static_cast<size_t>(tokens_per_frame) * latents.cols,
                    m.row(static_cast<int>(i) * tokens_per_frame));
    return m;
}

// --- student generation ---------------------------------------------------

/// Cuts the graph of cache entries from chunk `first` on.
template <class T>
void detach_from(KVCache<T>& cache, int first) {
    for (auto& e : cache.entries())
        if (e.chunk >= first)
            for (size_t b = 0; b < e.k.size(); ++b) e.k[b] = detach(e.k[b]), e.v[b] = detach(e.v[b]);
}

/// Few-step chunk generation on top of the cache: denoise from pure noise
/// through the timesteps, renoising each x0 estimate to the next level, then
/// commit the clean chunk to the cache with a t = 0 pass. Only the final
/// denoising pass and the commit pass keep the autograd graph, and only when
/// keep_graph is set. `proto` supplies the chunk's frames and conditioning.
template <class T>
Var<T> student_generate(const Dit<T>& student, KVCache<T>& cache, DitInput<T> proto, const std::vector<double>& ts,
                        std::mt19937_64& rng, bool keep_graph, const Var<T>* probe = nullptr,
                        Mat<T>* last_input = nullptr) {
    LBW_REQUIRE(!ts.empty() && ts.size() <= 4, ErrorCode::invalid_argument, "student uses 1 to 4 steps");
    const int n = student.config().tokens_per_frame(), nf = proto.frames();
    const int cols = student.config().token_dim();
    if (cache.chunks() > 0)
        LBW_REQUIRE(cache.entries().back().k.size() == static_cast<size_t>(student.config().blocks), ErrorCode::contract_violation,
                    "cache width does not match the student");
    Mat<T> x = gaussian<T>(nf * n, cols, rng);
    Var<T> x0;
    for (size_t i = 0; i < ts.size(); ++i) {
        proto.x = constant(x);
        proto.frame_t.assign(static_cast<size_t>(nf), static_cast<T>(ts[i]));
        const bool last = i + 1 == ts.size();
        const DitOutput<T> out = student.forward(proto, MaskMode::block_causal, &cache);
        if (last) {
            if (last_input) *last_input = x;
            x0 = keep_graph ? out.x0 : detach(out.x0);
        } else {
            x = add_noise(out.x0.value(), ts[i + 1], gaussian<T>(nf * n, cols, rng));
        }
    }
    if (probe) x0 = add(x0, *probe);
    proto.x = x0;
    proto.frame_t.assign(static_cast<size_t>(nf), T(0));
    const DitOutput<T> committed = student.forward(proto, MaskMode::block_causal, &cache);
    commit_to_cache(cache, proto, committed, n);
    if (!keep_graph) detach_from(cache, proto.frame_chunk.front());
    return x0;
}

/// Commits clean frames (the anchor, or any given chunk) to the cache without gradient.
template <class T>
void commit_clean(const Dit<T>& student, KVCache<T>& cache, DitInput<T> in) {
    in.x = detach(in.x);
    in.frame_t.assign(static_cast<size_t>(in.frames()), T(0));
    const DitOutput<T> out = student.forward(in, MaskMode::block_causal, &cache);
    commit_to_cache(cache, in, out, student.config().tokens_per_frame());
    detach_from(cache, in.frame_chunk.front());
}

// --- scores -------------------------------------------------------------------

/// Flow velocity (x_t - x0_pred) / t on the last `chunk_rows` rows.
template <class T>
Mat<T> velocity(const Mat<T>& xt, const Mat<T>& x0, double t) {
    Mat<T> v(xt.rows, xt.cols);
    for (size_t i = 0; i < v.v.size(); ++i) v.v[i] = static_cast<T>((static_cast<double>(xt.v[i]) - x0.v[i]) / t);
    return v;
}

/// Score of one network on [clean context | noised chunk], velocity on the chunk rows.
template <class T>
Mat<T> score_velocity(const MoE<T>& net, const DitInput<T>& in, int chunk_rows, double t) {
    const Mat<T> x0 = net.route(t).forward(in, MaskMode::bidirectional).x0.value();
    const int r0 = x0.rows - chunk_rows;
    const Mat<T> xt = slice_rows(in.x, r0, x0.rows).value();
    return velocity(xt, slice_rows(constant(x0), r0, x0.rows).value(), t);
}

/// 0.5 || x~ - sg[x~ - (mu_real - mu_fake)] ||^2; gradient w.r.t. x~ is mu_real - mu_fake.
template <class T>
Var<T> dmd_loss(const Var<T>& x_gen, const Mat<T>& mu_real, const Mat<T>& mu_fake) {
    LBW_REQUIRE(x_gen.value().same_shape(mu_real) && mu_real.same_shape(mu_fake), ErrorCode::invalid_argument,
                "dmd_loss: shape mismatch");
    Mat<T> target = x_gen.value();
    for (size_t i = 0; i < target.v.size(); ++i) target.v[i] -= mu_real.v[i] - mu_fake.v[i];
    return scale(sum_sq(sub(x_gen, constant(std::move(target)))), T(0.5));
}

// --- discriminator --------------------------------------------------------

/// Mean-pooled features -> hidden (silu) -> scalar logit.
template <class T>
class DiscHead {
public:
    DiscHead() = default;
    DiscHead(ParamStore<T>& store, const std::string& prefix, int dim, int hidden, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        w1_ = store.add(prefix + "w1", normal_init<T>(dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)), rng));
        b1_ = store.add(prefix + "b1", Mat<T>(1, hidden));
        w2_ = store.add(prefix + "w2", normal_init<T>(hidden, 1, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
        b2_ = store.add(prefix + "b2", Mat<T>(1, 1));
    }

    Var<T> operator()(const Var<T>& features) const {
        return add_row(matmul(silu(add_row(matmul(mean_rows(features), w1_), b1_)), w2_), b2_);
    }

private:
    Var<T> w1_, b1_, w2_, b2_;
};

/// Mid-layer features of the fake score on the chunk rows.
template <class T>
Var<T> fake_features(const MoE<T>& fake, const DitInput<T>& in, int chunk_rows, double t) {
    const Var<T> mid = fake.route(t).forward(in, MaskMode::bidirectional).mid;
    return slice_rows(mid, mid.rows() - chunk_rows, mid.rows());
}

/// softplus(1 - D(fake)) averaged over the logits.
template <class T>
Var<T> gan_g_loss(const std::vector<Var<T>>& fake_logits) {
    LBW_REQUIRE(!fake_logits.empty(), ErrorCode::invalid_argument, "gan_g_loss: no samples");
    Var<T> acc;
    for (const auto& d : fake_logits) {
        const Var<T> term = softplus(add_scalar(scale(d, T(-1)), T(1)));
        acc = acc ? add(acc, term) : term;
    }
    return scale(acc, static_cast<T>(1.0 / fake_logits.size()));
}

/// E softplus(D(real)) - E softplus(1 - D(fake)).
template <class T>
Var<T> gan_d_loss(const std::vector<Var<T>>& real_logits, const std::vector<Var<T>>& fake_logits) {
    LBW_REQUIRE(!real_logits.empty(), ErrorCode::invalid_argument, "gan_d_loss: no real samples");
    Var<T> acc;
    for (const auto& d : real_logits) {
        const Var<T> term = softplus(d);
        acc = acc ? add(acc, term) : term;
    }
    return sub(scale(acc, static_cast<T>(1.0 / real_logits.size())), gan_g_loss(fake_logits));
}

// --- state --------------------------------------------------------------------

template <class T>
struct DistillState {
    ModelConfig model;
    DistillConfig cfg;
    DiffusionConfig diffusion;
    ParamStore<T> real_store, fake_store, student_store, disc_store;
    MoE<T> real, fake;
    Dit<T> student;
    DiscHead<T> disc;
    Adam<T> opt_student, opt_fake, opt_disc;
    long outer_steps = 0, student_updates = 0, fake_updates = 0, disc_updates = 0;

    DistillState(const ModelConfig& m, const DistillConfig& c, const DiffusionConfig& d, std::uint64_t seed)
        : model(m), cfg(c), diffusion(d), real(m, real_store, "teacher.", seed), fake(m, fake_store, "fake.", seed + 10),
          student(m, student_store, "student.", seed + 20), disc(disc_store, "disc.", m.dim, c.disc_hidden, seed + 30),
          opt_student(c.lr_student), opt_fake(c.lr_fake), opt_disc(c.lr_disc) {
        c.validate();
        real_store.set_all_trainable(false);
    }

    DistillState(const DistillState&) = delete;
    DistillState& operator=(const DistillState&) = delete;

    /// Real and fake scores from a teacher store ("teacher.*"); student from
    /// a causal student store ("student.*"), or from the teacher's high expert.
    void init_from(const ParamStore<T>& teacher, const ParamStore<T>* causal_student) {
        real_store.copy_values_from(teacher, "teacher.", "teacher.");
        fake_store.copy_values_from(teacher, "teacher.", "fake.");
        if (causal_student)
            student_store.copy_values_from(*causal_student, "student.", "student.");
        else
            student_store.copy_values_from(teacher, "teacher.high.", "student.");
    }
};

struct DistillMetrics {
    double dmd = 0, g = 0, d = 0, fake = 0;
    int student_steps = 0;
    int kept_chunks = 0;
    std::vector<double> chunk_grad;  // probe gradient norm per generated chunk (audit mode)
};

/// One generated chunk and the frames the scores see as its clean context.
template <class T>
struct GeneratedChunk {
    int chunk = 0;
    std::vector<int> context_frames, frames;
    Var<T> x;  // carries the graph for kept chunks
};

template <class T>
struct SelfRollout {
    std::vector<GeneratedChunk<T>> kept;  // last K chunks
    Mat<T> latents;                       // anchor from data, then generated values
};

/// Generates `horizon` chunks after the window anchor with a rolling cache;
/// only the last K keep their graph. With `probes`, a zero leaf is added to
/// every chunk so the gradient reaching each chunk can be audited.
template <class T>
SelfRollout<T> self_rollout(DistillState<T>& s, const Window<T>& w, std::mt19937_64& rng, int student_steps,
                        std::vector<Var<T>>* probes = nullptr) {
    const int n = w.tokens_per_frame, H = s.cfg.horizon, K = s.cfg.keep_chunks;
    LBW_REQUIRE(w.chunks() - 1 >= H, ErrorCode::insufficient_frames, "window shorter than the rollout horizon");
    const auto ts = student_timesteps(student_steps, s.diffusion);
    KVCache<T> cache(s.cfg.cache_chunks);
    commit_clean(s.student, cache, select_frames(w, {0}, constant(w.frame_rows(0, 1)), {T(0)}));
    SelfRollout<T> r;
    r.latents = w.latents;
    for (int c = 1; c <= H; ++c) {
        GeneratedChunk<T> g;
        g.chunk = c;
        g.frames = frames_of_chunks(w, {c});
        std::vector<int> ctx{0};
        for (int p = std::max(1, c - (s.cfg.cache_chunks - 1)); p < c; ++p) ctx.push_back(p);
        g.context_frames = frames_of_chunks(w, ctx);
        const bool keep = c > H - K;
        Var<T> probe;
        if (probes) {
            probe = parameter(Mat<T>(static_cast<int>(g.frames.size()) * n, w.latents.cols));
            probes->push_back(probe);
        }
        g.x = student_generate(s.student, cache, select_frames(w, g.frames, Var<T>(), {}), ts, rng, keep,
                               probes ? &probe : nullptr);
        const auto& v = g.x.value();
        std::copy(v.v.begin(), v.v.end(), r.latents.row(g.frames.front() * n));
        if (keep) r.kept.push_back(std::move(g));
    }
    return r;
}

/// [clean context | chunk] input for the score networks.
template <class T>
DitInput<T> score_input(const Window<T>& w, const GeneratedChunk<T>& g, const Mat<T>& context_latents, Var<T> chunk_x,
                        double t) {
    const int n = w.tokens_per_frame;
    std::vector<int> frames = g.context_frames;
    frames.insert(frames.end(), g.frames.begin(), g.frames.end());
    std::vector<T> ft(g.context_frames.size(), T(0));
    ft.resize(frames.size(), static_cast<T>(t));
    const Var<T> ctx = constant(gather_frames(context_latents, g.context_frames, n));
    return select_frames(w, frames, concat_rows(std::vector<Var<T>>{ctx, std::move(chunk_x)}), std::move(ft));
}

/// Mean DMD loss over the kept chunks. The scores are evaluated as plain values.
template <class T>
Var<T> dmd_objective(const DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    Var<T> acc;
    for (const auto& g : r.kept) {
        const double t = draw_noise_level(s.cfg, rng);
        const Mat<T> xt = add_noise(g.x.value(), t, gaussian<T>(g.x.rows(), g.x.cols(), rng));
        const DitInput<T> in = score_input(w, g, r.latents, constant(xt), t);
        const Var<T> l = dmd_loss(g.x, score_velocity(s.real, in, xt.rows, t), score_velocity(s.fake, in, xt.rows, t));
        acc = acc ? add(acc, l) : l;
    }
    return scale(acc, static_cast<T>(1.0 / r.kept.size()));
}

/// L_G on the kept chunks. Hold a FreezeScope on the fake and head stores
/// through backward() so only the student is reached.
template <class T>
Var<T> generator_adv_loss(const DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    std::vector<Var<T>> logits;
    for (const auto& g : r.kept) {
        const double t = draw_noise_level(s.cfg, rng);
        const Var<T> xt = add_noise(g.x, t, gaussian<T>(g.x.rows(), g.x.cols(), rng));
        logits.push_back(s.disc(fake_features(s.fake, score_input(w, g, r.latents, xt, t), g.x.rows(), t)));
    }
    return gan_g_loss(logits);
}

/// DMD + lambda * L_G.
template <class T>
Var<T> student_objective(const DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng,
                         DistillMetrics* m = nullptr) {
    Var<T> total = dmd_objective(s, w, r, rng);
    if (m) m->dmd = static_cast<double>(total.item());
    if (s.cfg.lambda_adv > 0) {
        const Var<T> gl = generator_adv_loss(s, w, r, rng);
        if (m) m->g = static_cast<double>(gl.item());
        total = add(total, scale(gl, static_cast<T>(s.cfg.lambda_adv)));
    }
    return total;
}

/// Diffusion loss of the fake score on detached student chunks.
template <class T>
Var<T> fake_score_loss(const DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    Var<T> acc;
    for (const auto& g : r.kept) {
        const double t = draw_noise_level(s.cfg, rng);
        const Mat<T> x = g.x.value();
        const Mat<T> xt = add_noise(x, t, gaussian<T>(x.rows, x.cols, rng));
        const Var<T> x0 = s.fake.route(t).forward(score_input(w, g, r.latents, constant(xt), t), MaskMode::bidirectional).x0;
        const Var<T> l = mse(slice_rows(x0, x0.rows() - x.rows, x0.rows()), constant(x));
        acc = acc ? add(acc, l) : l;
    }
    return scale(acc, static_cast<T>(1.0 / r.kept.size()));
}

/// L_D with features cut from the fake backbone: only the head sees gradient.
template <class T>
Var<T> disc_loss(const DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    std::vector<Var<T>> real_logits, fake_logits;
    for (const auto& g : r.kept) {
        const double t = draw_noise_level(s.cfg, rng);
        const int rows = g.x.rows();
        const Mat<T> real_x = gather_frames(w.latents, g.frames, w.tokens_per_frame);
        const Mat<T> real_t = add_noise(real_x, t, gaussian<T>(rows, real_x.cols, rng));
        const Mat<T> fake_t = add_noise(g.x.value(), t, gaussian<T>(rows, real_x.cols, rng));
        const Var<T> fr = fake_features(s.fake, score_input(w, g, w.latents, constant(real_t), t), rows, t);
        const Var<T> ff = fake_features(s.fake, score_input(w, g, r.latents, constant(fake_t), t), rows, t);
        real_logits.push_back(s.disc(detach(fr)));
        fake_logits.push_back(s.disc(detach(ff)));
    }
    return gan_d_loss(real_logits, fake_logits);
}

/// One optimizer step on the fake score; returns the loss before the step.
template <class T>
double fake_score_step(DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    s.fake_store.zero_grad();
    const Var<T> l = fake_score_loss(s, w, r, rng);
    backward(l);
    s.opt_fake.step(s.fake_store);
    ++s.fake_updates;
    return static_cast<double>(l.item());
}

template <class T>
double disc_step(DistillState<T>& s, const Window<T>& w, const SelfRollout<T>& r, std::mt19937_64& rng) {
    s.disc_store.zero_grad();
    const Var<T> l = disc_loss(s, w, r, rng);
    backward(l);
    s.opt_disc.step(s.disc_store);
    ++s.disc_updates;
    return static_cast<double>(l.item());
}

/// One outer step: rollout, student update, r fake-score updates, one head update.
template <class T>
DistillMetrics self_rollout_train_step(DistillState<T>& s, const Window<T>& w, std::uint64_t seed, bool audit = false) {
    std::mt19937_64 rng(seed);
    DistillMetrics m;
    m.student_steps = s.cfg.student_steps(s.outer_steps);
    std::vector<Var<T>> probes;
    const SelfRollout<T> r = self_rollout(s, w, rng, m.student_steps, audit ? &probes : nullptr);
    m.kept_chunks = static_cast<int>(r.kept.size());

    s.student_store.zero_grad();
    {
        FreezeScope<T> f1(s.fake_store), f2(s.disc_store);
        const Var<T> loss = student_objective(s, w, r, rng, &m);
        backward(loss);
    }
    for (const auto& p : probes) {
        double sq = 0;
        if (p.has_grad())
            for (T g : p.grad().v) sq += static_cast<double>(g) * g;
        m.chunk_grad.push_back(std::sqrt(sq));
    }
    s.opt_student.step(s.student_store);
    ++s.student_updates;

    for (int i = 0; i < s.cfg.ttur; ++i) m.fake = fake_score_step(s, w, r, rng);
    if (s.cfg.lambda_adv > 0) m.d = disc_step(s, w, r, rng);
    ++s.outer_steps;
    return m;
}

}  // namespace lbw
