#include "dipcg/denoiser.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

using namespace dipcg;

namespace {

DenoiserConfig tiny(CondMode mode) {
    DenoiserConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.n_param_tokens = 4;
    c.cond_width = 8;
    c.cond_tokens = 4;
    c.time_freq = 8;
    c.mode = mode;
    c.patch = 4;
    c.image_size = 8; // 2x2 grid -> M = 4
    return c;
}

} // namespace

TEST(Denoiser, GradientsMatchFiniteDifferencesExternal) {
    const auto cfg = tiny(CondMode::External);
    const auto r = testing_support::gradient_check(cfg, 7);
    EXPECT_LE(r.max_rel_error, 1e-4) << "worst tensor: " << r.worst_tensor;
    EXPECT_GT(r.checked, 0u);
}

TEST(Denoiser, GradientsMatchFiniteDifferencesPatch) {
    const auto cfg = tiny(CondMode::Patch);
    const auto r = testing_support::gradient_check(cfg, 11);
    EXPECT_LE(r.max_rel_error, 1e-4) << "worst tensor: " << r.worst_tensor;
}

TEST(Denoiser, ZeroHeadGivesZeroOutput) {
    DenoiserConfig cfg = DenoiserConfig::desk(6);
    cfg.n_layers = 2;
    cfg.d_model = 32;
    Denoiser<float> net(cfg);
    auto w = net.init_weights(3);
    Image img(64, 64, 0.3f);
    auto cond = net.encode(w, net.cond_rows({&img}));
    nn::Mat<float> x = nn::Mat<float>::Random(1, 6);
    auto eps = net.forward(w, x, {500}, cond);
    EXPECT_EQ(eps.cols(), 6);
    EXPECT_EQ(eps.norm(), 0.0f);
}

TEST(Denoiser, OutputLengthMatchesParameterCount) {
    for (int n : {6, 8, 13}) {
        DenoiserConfig cfg = tiny(CondMode::External);
        cfg.n_param_tokens = n;
        Denoiser<double> net(cfg);
        auto w = net.init_weights(1);
        ConditionTokens tok;
        tok.tokens = nn::Mat<float>::Ones(4, 8);
        auto cond = net.encode(w, net.cond_rows({&tok}));
        auto out = net.forward(w, nn::Mat<double>::Zero(1, n), {10}, cond);
        EXPECT_EQ(out.cols(), n);
        EXPECT_EQ(out.rows(), 1);
    }
}

TEST(Denoiser, InitIsDeterministic) {
    Denoiser<float> net(tiny(CondMode::Patch));
    auto a = net.init_weights(42), b = net.init_weights(42), c = net.init_weights(43);
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        all_equal = all_equal && a[i] == b[i];
        any_diff = any_diff || a[i] != c[i];
    }
    EXPECT_TRUE(all_equal);
    EXPECT_TRUE(any_diff);
}

TEST(Denoiser, InvalidConfigRejected) {
    DenoiserConfig c = tiny(CondMode::External);
    c.n_heads = 3;
    EXPECT_THROW(Denoiser<float>{c}, InvalidInput);
    c = tiny(CondMode::External);
    c.n_layers = 0;
    EXPECT_THROW(Denoiser<float>{c}, InvalidInput);
}

TEST(Denoiser, ShapeMismatchRejected) {
    Denoiser<double> net(tiny(CondMode::External));
    auto w = net.init_weights(1);
    ConditionTokens tok;
    tok.tokens = nn::Mat<float>::Ones(4, 8);
    auto cond = net.encode(w, net.cond_rows({&tok}));
    EXPECT_THROW(net.forward(w, nn::Mat<double>::Zero(1, 5), {10}, cond), InvalidInput);
    ConditionTokens bad;
    bad.tokens = nn::Mat<float>::Ones(3, 8);
    EXPECT_THROW(net.cond_rows({&bad}), InvalidInput);
}

TEST(Denoiser, KeyValuePermutationSensitivity) {
    // Without positional codes on the condition tokens attention is invariant
    // to reordering them; the patch embedder adds fixed 2D codes, so reordering
    // the raw patches changes the prediction.
    auto cfg = tiny(CondMode::External);
    Denoiser<double> net(cfg);
    auto w = testing_support::randomized_weights(net, 5);
    Rng rng(9);
    ConditionTokens tok;
    tok.tokens.resize(4, 8);
    for (Eigen::Index i = 0; i < tok.tokens.size(); ++i) tok.tokens.data()[i] = static_cast<float>(rng.normal());
    ConditionTokens perm = tok;
    perm.tokens.row(0).swap(perm.tokens.row(2));
    nn::Mat<double> x(1, 4);
    x << 0.1, -0.3, 0.7, 0.2;
    auto a = net.forward(w, x, {50}, net.encode(w, net.cond_rows({&tok})));
    auto b = net.forward(w, x, {50}, net.encode(w, net.cond_rows({&perm})));
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);

    auto pcfg = tiny(CondMode::Patch);
    Denoiser<double> pnet(pcfg);
    auto pw = testing_support::randomized_weights(pnet, 5);
    Image img(8, 8);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    nn::Mat<double> rows = pnet.cond_rows({&img});
    nn::Mat<double> swapped = rows;
    swapped.row(0).swap(swapped.row(3));
    auto c = pnet.forward(pw, x, {50}, pnet.encode(pw, rows));
    auto d = pnet.forward(pw, x, {50}, pnet.encode(pw, swapped));
    EXPECT_GT((c - d).cwiseAbs().maxCoeff(), 1e-6);
    // Permuting the positional codes along with the tokens restores invariance.
    auto tok_a = pnet.raw_tokens(pw, rows);
    nn::Mat<double> tok_b = tok_a;
    tok_b.row(0).swap(tok_b.row(3));
    EXPECT_NEAR((tok_a.row(0) - tok_b.row(3)).norm(), 0.0, 1e-12);
}

TEST(Denoiser, ZeroHeadLossIsUnitVariance) {
    auto cfg = DenoiserConfig::desk(8);
    cfg.n_layers = 1;
    Denoiser<float> net(cfg);
    auto w = net.init_weights(1);
    std::vector<Image> imgs(64, Image(64, 64, 0.5f));
    std::vector<const Image*> ptrs;
    for (auto& i : imgs) ptrs.push_back(&i);
    Batch<float> batch{nn::Mat<float>::Random(64, 8), net.cond_rows(ptrs)};
    auto sched = default_schedule();
    auto r = net.loss_and_grad(w, batch, sched, 1234);
    EXPECT_NEAR(r.loss, 1.0, 0.1);
    auto r2 = net.loss_and_grad(w, batch, sched, 1234);
    EXPECT_EQ(r.loss, r2.loss);
    for (std::size_t i = 0; i < r.grad.size(); ++i) EXPECT_TRUE(r.grad[i] == r2.grad[i]) << r.grad.names[i];
    EXPECT_THROW(net.loss_and_grad(w, Batch<float>{nn::Mat<float>(0, 8), nn::Mat<float>(0, 64)}, sched, 1),
                 InvalidInput);
}

TEST(Denoiser, CountParamsShapeArithmetic) {
    DenoiserConfig c = tiny(CondMode::External);
    c.d_model = 16;
    c.n_layers = 0;
    const std::size_t d = 16, n = 4, f = 8, cw = 8, hid = 16;
    const std::size_t expected = n * d + d + n * d          // token embedding + positions
                                 + (f * d + d) + (d * d + d) // timestep MLP
                                 + (d * 6 * d + 6 * d)       // shared modulation
                                 + (cw * hid + hid) + (hid * d + d) // condition projector
                                 + (d * 2 * d + 2 * d)       // final modulation
                                 + (d + 1);                  // head
    EXPECT_EQ(count_params(c), expected);
    std::size_t prev = count_params(c);
    for (int l = 1; l <= 4; ++l) {
        c.n_layers = l;
        const std::size_t now = count_params(c);
        EXPECT_GT(now, prev);
        prev = now;
    }
}

TEST(Denoiser, FullScaleParameterBudget) {
    const double n = static_cast<double>(count_params(DenoiserConfig::full_scale(48)));
    EXPECT_GT(n, 7.6e6 * 0.85);
    EXPECT_LT(n, 7.6e6 * 1.15);
}
