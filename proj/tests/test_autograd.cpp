// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "lbw/autograd.hpp"
#include "lbw/nn.hpp"

using namespace lbw;
using lbw::testing::gradcheck;
using lbw::testing::worst;

namespace {

Var<double> rand_param(int r, int c, std::mt19937_64& rng, double sd = 1.0) { return parameter(normal_init<double>(r, c, sd, rng)); }

}  // namespace

TEST(Autograd, ElementwiseAndReductions) {
    std::mt19937_64 rng(1);
    auto a = rand_param(3, 4, rng), b = rand_param(3, 4, rng), r = rand_param(1, 4, rng);
    auto loss = [&] {
        auto x = mul(add(a, b), sub(a, scale(b, 0.5)));
        x = add_row(silu(x), r);
        return add(sum_sq(softplus(x)), mean_all(add_scalar(x, 2.0)));
    };
    EXPECT_LE(worst(gradcheck({{"a", a}, {"b", b}, {"r", r}}, loss, 12)), 1e-6);
}

TEST(Autograd, MatmulGatherConcatSlice) {
    std::mt19937_64 rng(2);
    auto a = rand_param(4, 3, rng), w = rand_param(3, 5, rng), e = rand_param(6, 5, rng);
    auto loss = [&] {
        auto y = matmul(a, w);
        auto g = gather_rows(e, {0, 3, 3, 5});
        auto c = concat_rows(std::vector<Var<double>>{y, g});
        auto s = slice_rows(c, 2, 7);
        auto t = concat_cols(std::vector<Var<double>>{slice_cols(s, 0, 2), slice_cols(s, 3, 5)});
        return sum_sq(mean_rows(t));
    };
    EXPECT_LE(worst(gradcheck({{"a", a}, {"w", w}, {"e", e}}, loss, 12)), 1e-6);
}

TEST(Autograd, LayerNormGradient) {
    std::mt19937_64 rng(3);
    auto x = rand_param(5, 7, rng, 2.0);
    auto probe = constant(normal_init<double>(5, 7, 1.0, rng));
    auto loss = [&] { return sum_all(mul(layer_norm(x), probe)); };
    EXPECT_LE(worst(gradcheck({{"x", x}}, loss, 20)), 1e-6);
}

TEST(Autograd, LayerNormStatistics) {
    std::mt19937_64 rng(4);
    const auto y = layer_norm(constant(normal_init<double>(3, 16, 3.0, rng)), 0.0).value();
    for (int r = 0; r < 3; ++r) {
        double m = 0, v = 0;
        for (int c = 0; c < 16; ++c) m += y(r, c);
        m /= 16;
        for (int c = 0; c < 16; ++c) v += (y(r, c) - m) * (y(r, c) - m);
        EXPECT_NEAR(m, 0, 1e-12);
        EXPECT_NEAR(v / 16, 1, 1e-12);
    }
}

TEST(Autograd, CrossEntropyUniformIsLogK) {
    const auto loss = cross_entropy(constant(Mat<double>(3, 5)), {0, 2, 4});
    EXPECT_NEAR(loss.item(), std::log(5.0), 1e-12);
}

TEST(Autograd, CrossEntropyGradient) {
    std::mt19937_64 rng(5);
    auto l = rand_param(4, 5, rng);
    EXPECT_LE(worst(gradcheck({{"l", l}}, [&] { return cross_entropy(l, {1, 0, 4, 2}); }, 20)), 1e-6);
}

TEST(Autograd, SoftplusStableForLargeInputs) {
    EXPECT_NEAR(softplus_value(800.0), 800.0, 1e-9);
    EXPECT_NEAR(softplus_value(-800.0), 0.0, 1e-300);
    EXPECT_NEAR(softplus_value(1.0), 1.3132616875182228, 1e-15);
}

TEST(Autograd, FrozenLeafGetsNoGradient) {
    std::mt19937_64 rng(6);
    auto a = rand_param(2, 2, rng), b = rand_param(2, 2, rng);
    b.set_requires_grad(false);
    backward(sum_sq(matmul(a, b)));
    EXPECT_TRUE(a.has_grad());
    EXPECT_FALSE(b.has_grad());
}

TEST(Autograd, DetachCutsGraph) {
    std::mt19937_64 rng(7);
    auto a = rand_param(2, 2, rng);
    backward(sum_sq(add(a, detach(scale(a, 3.0)))));
    // d/da sum (a + c)^2 with c = 3a held constant
    for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.grad().v[i], 2 * 4 * a.value().v[i], 1e-12);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    auto a = parameter(Mat<double>(1, 1, 3.0));
    auto y = mul(a, a);
    backward(sum_all(add(y, y)));
    EXPECT_DOUBLE_EQ(a.grad().v[0], 12.0);
}

// --- attention --------------------------------------------------------------

TEST(Attention, TwoTokenUniformIsMeanOfValues) {
    // zero queries: q.k^T = 0 so weights are uniform
    Mat<double> q(2, 2), k(2, 2, std::vector<double>{1, 0, 0, 1}), v(2, 2, std::vector<double>{1, 2, 5, -4});
    const auto o = attention(constant(q), constant(k), constant(v), 1, full_mask()).value();
    for (int r = 0; r < 2; ++r) {
        EXPECT_DOUBLE_EQ(o(r, 0), 3.0);
        EXPECT_DOUBLE_EQ(o(r, 1), -1.0);
    }
}

TEST(Attention, MatchesDenseReference) {
    std::mt19937_64 rng(8);
    const auto q = normal_init<double>(8, 8, 1.0, rng), k = normal_init<double>(8, 8, 1.0, rng),
               v = normal_init<double>(8, 8, 1.0, rng);
    for (const auto& mask : {full_mask(), build_block_causal_mask(4, 2)}) {
        const auto fast = attention(constant(q), constant(k), constant(v), 2, mask).value();
        EXPECT_LE(max_abs_diff(fast, attention_reference(q, k, v, 2, mask)), 1e-6);
    }
    const auto qf = q.cast<float>(), kf = k.cast<float>(), vf = v.cast<float>();
    const auto mask = build_block_causal_mask(4, 2);
    EXPECT_LE(max_abs_diff(attention(constant(qf), constant(kf), constant(vf), 2, mask).value(),
                           attention_reference(qf, kf, vf, 2, mask)),
              1e-6f);
}

TEST(Attention, CausalChunkIgnoresFutureKeys) {
    std::mt19937_64 rng(9);
    const auto q = normal_init<double>(4, 4, 1.0, rng);
    auto k = normal_init<double>(4, 4, 1.0, rng), v = normal_init<double>(4, 4, 1.0, rng);
    const auto mask = build_block_causal_mask(2, 2);
    const auto a = attention(constant(q), constant(k), constant(v), 2, mask).value();
    for (int r = 2; r < 4; ++r)
        for (int c = 0; c < 4; ++c) k(r, c) += 10.0 * (c + 1), v(r, c) -= 7.0;
    const auto b = attention(constant(q), constant(k), constant(v), 2, mask).value();
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c) EXPECT_EQ(a(r, c), b(r, c));
}

TEST(Attention, AllMaskedRowIsZero) {
    std::mt19937_64 rng(10);
    AttnMask m;
    m.kind = AttnMask::Kind::same;
    m.q_group = {0, 1, 2};
    m.k_group = {0, 0, 1};
    auto q = rand_param(3, 4, rng), k = rand_param(3, 4, rng), v = rand_param(3, 4, rng);
    const auto o = attention(q, k, v, 2, m);
    for (int c = 0; c < 4; ++c) EXPECT_EQ(o.value()(2, c), 0.0);
    backward(sum_sq(o));
    for (int c = 0; c < 4; ++c) EXPECT_EQ(q.grad()(2, c), 0.0);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    auto q = rand_param(6, 8, rng), k = rand_param(5, 8, rng), v = rand_param(5, 8, rng);
    AttnMask m;
    m.kind = AttnMask::Kind::causal;
    m.q_group = {0, 0, 1, 1, 2, 2};
    m.k_group = {0, 0, 1, 2, 2};
    auto probe = constant(normal_init<double>(6, 8, 1.0, rng));
    auto loss = [&] { return sum_all(mul(attention(q, k, v, 2, m), probe)); };
    EXPECT_LE(worst(gradcheck({{"q", q}, {"k", k}, {"v", v}}, loss, 24)), 1e-6);
}

TEST(Mask, SingleChunkIsBidirectional) {
    const auto m = build_block_causal_mask(1, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) EXPECT_TRUE(m.allowed(i, j));
}

TEST(Mask, TwoChunks) {
    const auto m = build_block_causal_mask(2, 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_EQ(m.allowed(i, j), j < 2);
    for (int i = 2; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_TRUE(m.allowed(i, j));
}

TEST(Mask, ThreeChunksHaveSixBlocks) {
    const auto m = build_block_causal_mask(3, 1);
    int blocks = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) blocks += m.allowed(i, j);
    EXPECT_EQ(blocks, 6);
}

TEST(Adam, MinimizesQuadratic) {
    ParamStore<double> s;
    auto x = s.add("x", Mat<double>(1, 3, std::vector<double>{3, -2, 5}));
    Adam<double> opt(0.1);
    for (int i = 0; i < 500; ++i) {
        s.zero_grad();
        backward(sum_sq(x));
        opt.step(s);
    }
    for (double v : x.value().v) EXPECT_NEAR(v, 0.0, 1e-2);
}

TEST(Adam, SkipsFrozenParameters) {
    ParamStore<double> s;
    auto a = s.add("a", Mat<double>(1, 1, 1.0));
    auto b = s.add("b", Mat<double>(1, 1, 1.0));
    s.set_trainable("b", false);
    Adam<double> opt(0.1);
    backward(sum_sq(mul(a, b)));
    EXPECT_EQ(opt.step(s), 1);
    EXPECT_EQ(b.value().v[0], 1.0);
    EXPECT_NE(a.value().v[0], 1.0);
}

TEST(ParamStore, HashTracksValues) {
    ParamStore<float> s;
    s.add("w", Mat<float>(2, 2, 1.0f));
    const auto h = s.hash();
    EXPECT_EQ(h, s.hash());
    s.get("w").mutable_value().v[3] = 2.0f;
    EXPECT_NE(h, s.hash());
}
