#include "bsk/stochastic.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace bsk;

namespace {

std::vector<double> uniform(Index n, double horizon = 1.0)
{
    std::vector<double> g(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = horizon * static_cast<double>(i) / static_cast<double>(n - 1);
    return g;
}

}  // namespace

TEST(Fbm, Deterministic)
{
    Path a = fbm_davies_harte({200, 0.3, 1.0, 42});
    Path b = fbm_davies_harte({200, 0.3, 1.0, 42});
    Path c = fbm_davies_harte({200, 0.3, 1.0, 43});
    EXPECT_EQ(a.values(), b.values());
    EXPECT_NE(a.values(), c.values());
    EXPECT_EQ(a.values()(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(a.grid().back(), 1.0);
    EXPECT_EQ(a.samples(), 200);
    EXPECT_THROW(fbm_davies_harte({200, 1.0, 1.0, 0}), InvalidInput);
    EXPECT_THROW(fbm_davies_harte({1, 0.3, 1.0, 0}), InvalidInput);
}

TEST(Fbm, BrownianIncrements)
{
    FbmSampler sampler({101, 0.5, 1.0, 0});
    Rng rng(1);
    double dt = 0.01, sum = 0.0, sq = 0.0;
    Index count = 0;
    for (int d = 0; d < 100; ++d) {
        Vec v = sampler.draw(rng);
        for (Index k = 0; k + 1 < v.size(); ++k) {
            double inc = v(k + 1) - v(k);
            sum += inc;
            sq += inc * inc;
            ++count;
        }
    }
    double mean = sum / static_cast<double>(count);
    double var = sq / static_cast<double>(count) - mean * mean;
    EXPECT_NEAR(var / dt, 1.0, 0.05);
}

TEST(Fbm, TerminalVarianceAndCovariance)
{
    for (double h : {0.2, 0.3, 0.4}) {
        FbmSampler sampler({101, h, 1.0, 0});
        Rng rng(2024);
        const int draws = 5000;
        double v1 = 0.0, c1 = 0.0, c2 = 0.0;
        for (int d = 0; d < draws; ++d) {
            Vec b = sampler.draw(rng);
            v1 += b(100) * b(100);
            c1 += b(25) * b(75);
            c2 += b(50) * b(100);
        }
        auto cov = [h](double s, double t) { return 0.5 * (std::pow(s, 2 * h) + std::pow(t, 2 * h) - std::pow(std::abs(t - s), 2 * h)); };
        EXPECT_NEAR(v1 / draws, 1.0, 0.05) << "H=" << h;
        EXPECT_NEAR(c1 / draws / cov(0.25, 0.75), 1.0, 0.1) << "H=" << h;
        EXPECT_NEAR(c2 / draws / cov(0.5, 1.0), 1.0, 0.1) << "H=" << h;
    }
}

TEST(Fgn, Examples)
{
    Path line({0, 0.5, 1.5}, (Mat(3, 1) << 1, 2, 4).finished());
    Mat eta = fgn(line);
    ASSERT_EQ(eta.rows(), 2);
    EXPECT_DOUBLE_EQ(eta(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(eta(1, 0), 2.0);

    Path bm = fbm_davies_harte({1001, 0.5, 1.0, 3});
    Mat e = fgn(bm);
    double dt = 1e-3, acc = bm.values()(0, 0);
    for (Index k = 0; k < e.rows(); ++k) {
        acc += e(k, 0) * dt;
        EXPECT_NEAR(acc, bm.values()(k + 1, 0), 1e-12);
    }
    double var = (e.array() - e.mean()).square().sum() / static_cast<double>(e.rows());
    EXPECT_NEAR(var * dt, 1.0, 0.1);
}

TEST(Arias, Examples)
{
    auto g = uniform(1000);
    Vec one = arias_intensity(Vec::Ones(1000), g);
    EXPECT_NEAR(one(999), std::numbers::pi / 19.62, 1e-12);
    EXPECT_EQ(arias_intensity(Vec::Zero(1000), g), Vec::Zero(1000));
    Vec t = Eigen::Map<const Vec>(g.data(), 1000);
    Vec lin = arias_intensity(t, g);
    EXPECT_NEAR(lin(999) / (std::numbers::pi / (2 * gravity) / 3.0), 1.0, 5e-3);
    EXPECT_EQ(lin(0), 0.0);
}

TEST(Arias, NonDecreasing)
{
    Path bm = fbm_davies_harte({500, 0.2, 1.0, 5});
    Vec ia = arias_intensity(bm.values().col(0), bm.grid());
    for (Index k = 1; k < ia.size(); ++k) EXPECT_GE(ia(k), ia(k - 1));
}

TEST(Kuramoto, FreeRotation)
{
    KuramotoSpec s;
    s.omega = Eigen::Vector3d(-1, -0.3, 1.5);
    s.theta0 = Eigen::Vector3d(0.1, 0.2, 0.3);
    auto g = uniform(11);
    Mat th = euler_kuramoto(s, g);
    for (Index k = 0; k < 11; ++k)
        for (Index i = 0; i < 3; ++i) EXPECT_NEAR(th(k, i), s.theta0(i) + s.omega(i) * g[static_cast<std::size_t>(k)], 1e-14);
}

TEST(Kuramoto, OneNoisyStep)
{
    KuramotoSpec s;
    s.omega = Eigen::Vector2d(2, -1);
    s.theta0 = Eigen::Vector2d(0.5, 0.0);
    s.noise = (Mat(2, 2) << 0, 0, 0.3, -0.2).finished();
    Mat th = euler_kuramoto(s, {0.0, 0.1});
    EXPECT_NEAR(th(1, 0), 0.5 + 0.2 + 0.3, 1e-15);
    EXPECT_NEAR(th(1, 1), -0.1 - 0.2, 1e-15);
}

TEST(Kuramoto, BenchmarkTrajectoryReproducible)
{
    Path noise = fbm_channels({1000, 0.4, 1.0, 0}, 3);
    KuramotoSpec s;
    s.omega = Eigen::Vector3d(-1, -0.3, 1.5);
    s.coupling = 3;
    s.theta0 = Eigen::Vector3d(0.3, 1.1, 2.0);
    s.noise = noise.values();
    Mat a = euler_kuramoto(s, noise.grid());
    Mat b = euler_kuramoto(s, noise.grid());
    EXPECT_EQ(a, b);
    EXPECT_TRUE(a.allFinite());
}

TEST(Kuramoto, StrongCouplingSynchronizes)
{
    KuramotoSpec s;
    s.omega = Eigen::Vector3d(-0.1, 0.0, 0.1);
    s.coupling = 20;
    s.theta0 = Eigen::Vector3d(-1.0, 0.2, 1.0);
    auto g = uniform(2001, 4.0);
    Mat th = euler_kuramoto(s, g);
    auto spread = [&](Index k) { return (th.row(k).array() - th.row(k).mean()).abs().sum(); };
    for (Index k = 200; k < 2001; ++k) EXPECT_LE(spread(k), spread(k - 1) + 1e-12);
}

TEST(Kuramoto, TermJacobianMatchesFiniteDifferences)
{
    Vec omega = Eigen::Vector3d(-1, -0.3, 1.5);
    NonlinearTerm term = kuramoto_term(omega, 3.0);
    Vec th = Eigen::Vector3d(0.4, -0.7, 2.1);
    Mat j = term.jacobian(0.0, {th}, 0);
    for (Index c = 0; c < 3; ++c) {
        Vec up = th, dn = th;
        up(c) += 1e-6;
        dn(c) -= 1e-6;
        Vec fd = (term.value(0.0, {up}) - term.value(0.0, {dn})) / 2e-6;
        EXPECT_LE((j.col(c) - fd).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Reference, Rk4Exponential)
{
    OdeRhs f = [](double, const Vec& y) { return y; };
    Mat out = reference_integrate(f, Vec::Ones(1), uniform(101), Integrator::rk4);
    EXPECT_NEAR(out(100, 0), std::exp(1.0), 1e-8);
}

TEST(Reference, Rk4FourthOrder)
{
    OdeRhs f = [](double t, const Vec& y) { return Vec(y * std::cos(t)); };
    double exact = std::exp(std::sin(2.0));
    std::vector<double> err;
    for (Index n : {11, 21, 41}) err.push_back(std::abs(reference_integrate(f, Vec::Ones(1), uniform(n, 2.0), Integrator::rk4)(n - 1, 0) - exact));
    EXPECT_NEAR(std::log2(err[0] / err[1]), 4.0, 0.3);
    EXPECT_NEAR(std::log2(err[1] / err[2]), 4.0, 0.3);
}

TEST(Reference, AdaptiveEnergyConservation)
{
    OdeRhs f = [](double, const Vec& y) { return Vec(Eigen::Vector2d(y(1), -y(0))); };
    Vec y0 = Eigen::Vector2d(1.0, 0.0);
    Mat out = reference_integrate(f, y0, uniform(101, 20 * std::numbers::pi), Integrator::adaptive);
    for (Index k = 0; k < out.rows(); ++k) EXPECT_LE(std::abs(out.row(k).squaredNorm() - 1.0), 1e-6);
}

TEST(Reference, FirstOrderReduction)
{
    // u'' + 2u' + u = 0, u(0)=1, u'(0)=0 -> u = (1 + t) e^{-t}
    LinearODESpec s = LinearODESpec::scalar({1, 2, 1}, {1, 0});
    OdeRhs f = first_order_system(s, [](double) { return Vec::Zero(1); });
    auto g = uniform(51, 3.0);
    Mat out = reference_integrate(f, stacked_initial(s), g, Integrator::adaptive);
    for (Index k = 0; k < 51; ++k) {
        double t = g[static_cast<std::size_t>(k)];
        EXPECT_NEAR(out(k, 0), (1 + t) * std::exp(-t), 1e-9);
        EXPECT_NEAR(out(k, 1), -t * std::exp(-t), 1e-9);
    }
}

TEST(Reference, EulerMatchesHandStep)
{
    OdeRhs f = [](double t, const Vec& y) { return Vec::Constant(1, t + y(0)); };
    Mat out = reference_integrate(f, Vec::Ones(1), {0.0, 0.5}, Integrator::euler, 2);
    // two substeps of 0.25: 1 -> 1.25 -> 1.25 + 0.25 * (0.25 + 1.25)
    EXPECT_NEAR(out(1, 0), 1.625, 1e-15);
}
