#include "bsk/streaming.hpp"
#include "bsk/stochastic.hpp"

#include <gtest/gtest.h>

#include <chrono>

using namespace bsk;

namespace {

std::vector<StreamSample> fbm_samples(Index n, std::uint64_t seed, double hurst = 0.3)
{
    Path bm = fbm_davies_harte({n, hurst, 1.0, seed});
    std::vector<StreamSample> out;
    for (Index j = 0; j < n; ++j) {
        double t = bm.grid()[static_cast<std::size_t>(j)];
        out.push_back({t, bm.values().row(j).transpose(), Eigen::Vector2d(t, bm.values()(j, 0))});
    }
    return out;
}

StreamConfig config(Index window, int cadence, Method method = Method::derivative_ansatz)
{
    StreamConfig c;
    c.method = method;
    c.window = window;
    c.cadence = cadence;
    c.solve.ridge = 1e-10;
    return c;
}

std::vector<StreamSample> head(const std::vector<StreamSample>& s, Index n)
{
    return {s.begin(), s.begin() + n};
}

const LinearODESpec oscillator = LinearODESpec::scalar({10, 5, 1}, {0, 0});

}  // namespace

TEST(StreamInit, WindowChecks)
{
    auto s = fbm_samples(30, 1);
    EXPECT_THROW(StreamState(head(s, 2), oscillator, config(1, 10)), InvalidInput);
    EXPECT_THROW(StreamState(head(s, 5), oscillator, config(10, 10)), InvalidInput);
    StreamState ok(head(s, 11), oscillator, config(10, 10));
    EXPECT_EQ(ok.size(), 11);
}

TEST(StreamInit, BatchMatchesDirectSolve)
{
    auto s = fbm_samples(40, 2);
    StreamState st(head(s, 40), oscillator, config(39, 10));
    std::vector<double> grid;
    Mat path(40, 2), f(40, 1);
    for (Index j = 0; j < 40; ++j) {
        grid.push_back(s[static_cast<std::size_t>(j)].t);
        path.row(j) = s[static_cast<std::size_t>(j)].path.transpose();
        f.row(j) = s[static_cast<std::size_t>(j)].forcing.transpose();
    }
    KernelSpec ks;
    auto gs = std::make_shared<GramStack>(grid, gram(build_features(path, ks).normalized, ks), 2);
    SolverFit direct = fit_linear(Method::derivative_ansatz, oscillator, gs, f, {0.0, 1e-10});
    EXPECT_LE((st.alpha() - direct.alpha).cwiseAbs().maxCoeff(), 1e-12 * direct.alpha.cwiseAbs().maxCoeff());
}

TEST(OnlineLinear, RowResidualAndIncrementalGram)
{
    for (Method method : {Method::derivative_ansatz, Method::volterra}) {
        auto s = fbm_samples(80, 3);
        StreamState st(head(s, 41), oscillator, config(40, StreamConfig::never, method));
        for (Index j = 41; j < 80; ++j) {
            StepRecord r = st.online_update_linear(s[static_cast<std::size_t>(j)]);
            EXPECT_LE(r.row_residual, 1e-12);
        }
        // appended signature and Gram rows equal a from-scratch build
        Mat path(80, 2);
        std::vector<double> grid;
        for (Index j = 0; j < 80; ++j) {
            path.row(j) = s[static_cast<std::size_t>(j)].path.transpose();
            grid.push_back(s[static_cast<std::size_t>(j)].t);
        }
        KernelSpec ks;
        Features f40 = build_features(path.topRows(41), ks);
        SignatureMatrix raw = stream_prefix_signatures(path, ks.depth);
        Mat k = gram(f40.scaler.apply(raw.rows), ks);
        GramStack scratch(grid, k, 2);
        for (int lv = 0; lv <= 2; ++lv)
            EXPECT_LE((st.gram().level(lv) - scratch.level(lv)).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(OnlineLinear, DuplicateTimestampRejected)
{
    auto s = fbm_samples(20, 4);
    StreamState st(head(s, 11), oscillator, config(10, 10));
    StreamSample dup = s[10];
    EXPECT_THROW(st.online_update_linear(dup), Error);
}

TEST(OnlineLinear, HandUnrolledFirstOrder)
{
    // u' = f, u(0) = 0, linear kernel on (t): alpha_new = (f - sum_k K[n][k] alpha_k) / K[n][n]
    LinearODESpec s = LinearODESpec::scalar({0.0, 1.0}, {0.0});
    std::vector<StreamSample> samples;
    for (int j = 0; j < 4; ++j) samples.push_back({0.5 * j, Vec::Constant(1, 1.0 + j), Vec::Constant(1, 0.5 * j)});
    StreamConfig c = config(2, StreamConfig::never);
    c.kernel.flavor = KernelFlavor::linear;
    c.kernel.normalization = Normalization::none;
    c.kernel.depth = 2;
    c.solve.ridge = 0.0;
    StreamState st(head(samples, 3), s, c);
    Mat a = st.alpha();
    StepRecord r = st.online_update_linear(samples[3]);
    auto sig = [](double x) { return Eigen::Vector3d(1.0, x, x * x / 2.0); };
    Vec k(4);
    for (int i = 0; i < 4; ++i) k(i) = sig(0.5 * i).dot(sig(1.5));
    double expect = (4.0 - k.head(3).dot(a.col(0))) / k(3);
    EXPECT_NEAR(r.alpha(0), expect, 1e-12);
}

TEST(OnlineNonlinear, ZeroTermEqualsLinear)
{
    auto s = fbm_samples(60, 5);
    NonlinearTerm zero;
    zero.value = [](double, const std::vector<Vec>& u) { return Vec::Zero(u[0].size()); };
    zero.jacobian = [](double, const std::vector<Vec>& u, int) { return Mat::Zero(u[0].size(), u[0].size()); };
    StreamState a(head(s, 31), oscillator, config(30, StreamConfig::never), zero);
    StreamState b = a;
    for (Index j = 31; j < 60; ++j) {
        StepRecord lin = a.online_update_linear(s[static_cast<std::size_t>(j)]);
        StepRecord nl = b.online_update_nonlinear(s[static_cast<std::size_t>(j)]);
        EXPECT_FALSE(nl.newton_fallback);
        EXPECT_LE(std::abs(lin.alpha(0) - nl.alpha(0)), 1e-12 * std::max(1.0, std::abs(lin.alpha(0))));
    }
}

TEST(OnlineNonlinear, TinyGammaNearLinear)
{
    auto s = fbm_samples(50, 6);
    NonlinearODESpec d = duffing(5, 10, 1e-8, 0, 1);
    StreamState a(head(s, 31), d.linear, config(30, StreamConfig::never), d.term);
    StreamState b = a;
    for (Index j = 31; j < 50; ++j) {
        StepRecord lin = a.online_update_linear(s[static_cast<std::size_t>(j)]);
        StepRecord nl = b.online_update_nonlinear(s[static_cast<std::size_t>(j)]);
        EXPECT_LE((lin.u - nl.u).norm(), 1e-6 * std::max(1.0, lin.u.norm()));
    }
}

TEST(OnlineNonlinear, DuffingNewtonIterations)
{
    auto s = fbm_samples(500, 0, 0.4);
    NonlinearODESpec d = duffing(5, 10, 10, 0, 1);
    StreamConfig c = config(349, 10);
    c.kernel.depth = 2;
    c.lbfgs.ridge = 1e-10 / 350;
    StreamRun run = run_stream(s, d.linear, c, d.term);
    int ok = 0;
    for (const auto& r : run.steps) ok += r.newton_iterations <= 3;
    EXPECT_GE(static_cast<double>(ok), 0.95 * static_cast<double>(run.steps.size()));
    EXPECT_EQ(run.fallbacks, 0);
}

TEST(Retrain, ImmediateRetrainKeepsAlpha)
{
    auto s = fbm_samples(30, 7);
    StreamState st(head(s, 21), oscillator, config(20, 10));
    Mat before = st.alpha();
    st.retrain();
    EXPECT_LE((st.alpha() - before).cwiseAbs().maxCoeff(), 1e-10 * before.cwiseAbs().maxCoeff());
}

TEST(Retrain, NotWorseThanFrozenOnWindow)
{
    for (Method method : {Method::derivative_ansatz, Method::volterra}) {
        auto s = fbm_samples(120, 8);
        StreamState st(head(s, 61), oscillator, config(60, StreamConfig::never, method));
        for (Index j = 61; j < 71; ++j) st.online_update(s[static_cast<std::size_t>(j)]);
        double frozen = st.window_residual();
        st.retrain();
        EXPECT_EQ(st.size(), 61);
        EXPECT_DOUBLE_EQ(st.anchor_time(), s[10].t);
        EXPECT_LE(st.window_residual(), frozen + 1e-12) << "method " << static_cast<int>(method);
    }
}

TEST(Retrain, ExactWindowKeepsSize)
{
    auto s = fbm_samples(30, 9);
    StreamState st(head(s, 11), oscillator, config(10, 10));
    EXPECT_NO_THROW(st.retrain());
    EXPECT_EQ(st.size(), 11);
    EXPECT_DOUBLE_EQ(st.anchor_time(), 0.0);
}

TEST(RunStream, CadenceSemantics)
{
    auto s = fbm_samples(90, 10);
    EXPECT_EQ(run_stream(s, oscillator, config(59, 1)).retrains, 30);
    EXPECT_EQ(run_stream(s, oscillator, config(59, 10)).retrains, 3);
    StreamRun never = run_stream(s, oscillator, config(59, StreamConfig::never));
    EXPECT_EQ(never.retrains, 0);
    EXPECT_EQ(never.steps.size(), 30u);
    EXPECT_THROW(run_stream(s, oscillator, config(59, 0)), InvalidInput);
}

TEST(RunStream, StepCostGrowsAtMostLinearly)
{
    auto s = fbm_samples(460, 11);
    std::vector<double> cost;
    for (Index n : {100, 200, 400}) {
        StreamState st(head(s, n + 1), oscillator, config(n, StreamConfig::never));
        auto t0 = std::chrono::steady_clock::now();
        for (Index j = n + 1; j < n + 51; ++j) st.online_update_linear(s[static_cast<std::size_t>(j)]);
        cost.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    double slope = std::log(cost[2] / cost[0]) / std::log(4.0);
    EXPECT_LT(slope, 1.5) << cost[0] << " " << cost[1] << " " << cost[2];
}
