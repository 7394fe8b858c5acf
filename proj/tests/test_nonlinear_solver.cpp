#include "bsk/nonlinear_solver.hpp"
#include "bsk/stochastic.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace bsk;

namespace {

struct Instance {
    std::vector<double> grid;
    Mat forcing;
    std::shared_ptr<GramStack> gram;
};

Instance fbm_setup(Index n, std::uint64_t seed, int depth = 2)
{
    Path bm = fbm_davies_harte({n, 0.4, 1.0, seed});
    Mat v(n, 2);
    for (Index j = 0; j < n; ++j) v(j, 0) = bm.grid()[static_cast<std::size_t>(j)];
    v.col(1) = bm.values().col(0);
    KernelSpec ks;
    ks.depth = depth;
    return {bm.grid(), bm.values(), std::make_shared<GramStack>(bm.grid(), gram(build_features(v, ks).normalized, ks), 2)};
}

Vec random_vec(Index n, std::uint64_t seed, double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Vec v(n);
    for (Index i = 0; i < n; ++i) v(i) = scale * normal(rng);
    return v;
}

}  // namespace

TEST(Residual, GammaZeroIsLinear)
{
    Instance s = fbm_setup(15, 1);
    NonlinearODESpec d = duffing(5, 10, 0.0, 0.2, 1.0);
    NonlinearProblem prob(d, s.gram, s.forcing);
    Mat alpha = to_blocks(random_vec(15, 2), 1);
    CollocationSystem sys = assemble_method1(d.linear, *s.gram, s.forcing);
    Vec lin = sys.block_kernel * from_blocks(alpha) - sys.rhs;
    EXPECT_LE((from_blocks(prob.residual(alpha)) - lin).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Residual, ZeroDataZeroResidual)
{
    Instance s = fbm_setup(12, 3);
    NonlinearProblem prob(duffing(5, 10, 7.0, 0.0, 0.0), s.gram, Mat::Zero(12, 1));
    EXPECT_EQ(prob.residual(Mat::Zero(12, 1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Residual, HandEvaluatedDuffing)
{
    Instance s = fbm_setup(5, 4);
    double k0 = 5, k1 = 10, gamma = 3, a = 0.3, b = -0.8;
    NonlinearProblem prob(duffing(k0, k1, gamma, a, b), s.gram, s.forcing);
    Vec alpha = random_vec(5, 5);
    Mat r = prob.residual(to_blocks(alpha, 1));
    for (Index j = 0; j < 5; ++j) {
        double t = s.grid[static_cast<std::size_t>(j)];
        double udd = s.gram->level(0).row(j).dot(alpha);
        double ud = s.gram->level(1).row(j).dot(alpha) + b;
        double u = s.gram->level(2).row(j).dot(alpha) + a + b * t;
        EXPECT_NEAR(r(j, 0), udd + k1 * ud + k0 * u + gamma * u * u * u - s.forcing(j, 0), 1e-12);
    }
}

TEST(Residual, NonFiniteTermNamesNode)
{
    Instance s = fbm_setup(6, 1);
    NonlinearODESpec d = duffing(1, 1, 1, 0, 0);
    d.term.value = [](double t, const std::vector<Vec>&) -> Vec {
        return Vec::Constant(1, t > 0.5 ? std::numeric_limits<double>::quiet_NaN() : 0.0);
    };
    NonlinearProblem prob(d, s.gram, s.forcing);
    try {
        prob.residual(Mat::Zero(6, 1));
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("node 3"), std::string::npos);
    }
}

TEST(Gradient, MatchesCentralDifferences)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Instance s = fbm_setup(10, seed);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.5, 3.0);
        NonlinearProblem prob(duffing(u(rng), u(rng), u(rng), 0.1, -0.2), s.gram, s.forcing, 1e-3);
        Vec a = random_vec(10, seed + 100, 0.3);
        Vec g;
        prob.loss_and_grad(a, g);
        Vec fd(10);
        for (Index i = 0; i < 10; ++i) {
            double h = 1e-6 * std::max(1.0, std::abs(a(i)));
            Vec up = a, dn = a, tmp;
            up(i) += h;
            dn(i) -= h;
            fd(i) = (prob.loss_and_grad(up, tmp) - prob.loss_and_grad(dn, tmp)) / (2 * h);
        }
        EXPECT_LT((g - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff(), 1e-5) << "seed " << seed;
    }
}

TEST(Gradient, FiniteDifferenceJacobianFallback)
{
    Instance s = fbm_setup(10, 9);
    NonlinearODESpec analytic = duffing(2, 3, 4, 0.1, 0.1);
    NonlinearODESpec numeric = analytic;
    numeric.term.jacobian = nullptr;
    Vec a = random_vec(10, 3, 0.2), ga, gn;
    NonlinearProblem(analytic, s.gram, s.forcing).loss_and_grad(a, ga);
    NonlinearProblem(numeric, s.gram, s.forcing).loss_and_grad(a, gn);
    EXPECT_LE((ga - gn).cwiseAbs().maxCoeff(), 1e-6 * ga.cwiseAbs().maxCoeff());
}

TEST(Gradient, GammaZeroClosedForm)
{
    Instance s = fbm_setup(10, 2);
    NonlinearODESpec d = duffing(5, 10, 0.0, 0.0, 1.0);
    double ridge = 0.01;
    NonlinearProblem prob(d, s.gram, s.forcing, ridge);
    CollocationSystem sys = assemble_method1(d.linear, *s.gram, s.forcing);
    Vec a = random_vec(10, 8), g;
    prob.loss_and_grad(a, g);
    Vec expect = 2.0 / 10.0 * sys.block_kernel.transpose() * (sys.block_kernel * a - sys.rhs) + 2 * ridge * a;
    EXPECT_LE((g - expect).cwiseAbs().maxCoeff(), 1e-10 * expect.cwiseAbs().maxCoeff());
}

TEST(Lbfgs, QuadraticConvergesToLinearSolve)
{
    // ridge 1e-2 keeps the Hessian condition near 1e4; at 1e-4 it is 1e6 and any
    // L-BFGS with memory 10 needs ~1e3 iterations
    Instance s = fbm_setup(12, 6);
    NonlinearODESpec d = duffing(5, 10, 0.0, 0.0, 1.0);
    NonlinearProblem prob(d, s.gram, s.forcing, 1e-2);
    SolveOptions opt;
    opt.ridge = 1e-2 * 12;
    SolverFit lin = fit_linear(Method::derivative_ansatz, d.linear, s.gram, s.forcing, opt);
    Vec target = from_blocks(lin.alpha);
    LbfgsConfig cfg;
    cfg.max_iterations = 500;
    cfg.gradient_tolerance = 1e-9;
    LbfgsResult res = lbfgs_minimize(prob, Vec::Zero(12), cfg);
    EXPECT_LE((res.x - target).norm(), 1e-6 * target.norm());
    for (std::size_t k = 1; k < res.history.size(); ++k) EXPECT_LE(res.history[k], res.history[k - 1]);

    LbfgsResult again = lbfgs_minimize(prob, res.x, cfg);
    EXPECT_LE((again.x - target).norm(), 1e-6 * target.norm());
}

TEST(Lbfgs, ExactLinearSolutionHasTinyLoss)
{
    Instance s = fbm_setup(12, 7);
    NonlinearODESpec d = duffing(5, 10, 0.0, 0.0, 1.0);
    NonlinearProblem prob(d, s.gram, s.forcing);
    SolverFit lin = fit_linear(Method::derivative_ansatz, d.linear, s.gram, s.forcing);
    Vec g;
    EXPECT_LE(prob.loss_and_grad(from_blocks(lin.alpha), g), 1e-16 * s.forcing.squaredNorm());
}

TEST(Lbfgs, WarmStartNotWorseThanZero)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Instance s = fbm_setup(60, seed);
        NonlinearProblem prob(duffing(5, 10, 10, 0, 1), s.gram, s.forcing, 1e-12);
        LbfgsConfig cfg;
        cfg.max_iterations = 300;
        double warm = fit_nonlinear(prob, cfg).optimizer.loss;
        Vec zero = Vec::Zero(60);
        double cold = fit_nonlinear(prob, cfg, &zero).optimizer.loss;
        EXPECT_LE(warm, cold * (1 + 1e-9) + 1e-14) << "seed " << seed;
    }
}

TEST(Reduction, GammaZeroMatchesLinearFit)
{
    Instance s = fbm_setup(40, 11);
    NonlinearODESpec d = duffing(5, 10, 0.0, 0.0, 1.0);
    double ridge = 1e-10;
    NonlinearProblem prob(d, s.gram, s.forcing, ridge / 40);
    LbfgsConfig cfg;
    cfg.gradient_tolerance = 1e-14;
    NonlinearFit nf = fit_nonlinear(prob, cfg);
    SolveOptions opt;
    opt.ridge = ridge;
    SolverFit lin = fit_linear(Method::derivative_ansatz, d.linear, s.gram, s.forcing, opt);
    for (int p = 0; p <= 2; ++p) {
        Mat a = reconstruct_derivative(nf.fit, p), b = reconstruct_derivative(lin, p);
        EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-6 * b.cwiseAbs().maxCoeff()) << "order " << p;
    }
    Prediction at0 = predict_nonlinear(nf.fit, 0.0);
    EXPECT_NEAR(at0.derivatives[0](0), 0.0, 1e-15);
    EXPECT_NEAR(at0.derivatives[1](0), 1.0, 1e-15);
    EXPECT_NEAR(at0.derivatives[2](0), s.gram->level(0).row(0).dot(nf.fit.alpha.col(0)), 1e-12);
}

TEST(Newton, CubicRoot)
{
    auto g = [](const Vec& x) { return Vec::Constant(1, x(0) * x(0) * x(0) - 8.0); };
    auto j = [](const Vec& x) { return Mat::Constant(1, 1, 3.0 * x(0) * x(0)); };
    NewtonResult r = newton_block(g, j, Vec::Constant(1, 3.0), 1e-12, 50);
    EXPECT_NEAR(r.x(0), 2.0, 1e-10);
    EXPECT_LE(r.iterations, 6);
}

TEST(Newton, LinearIsOneStep)
{
    Mat a(2, 2);
    a << 3, 1, 1, 2;
    Vec b(2);
    b << 1, -1;
    NewtonResult r = newton_block([&](const Vec& x) { return Vec(a * x - b); }, [&](const Vec&) { return a; }, Vec::Zero(2));
    EXPECT_LE((r.x - a.lu().solve(b)).norm(), 1e-14);
    EXPECT_LE(r.iterations, 1);
    NewtonResult warm = newton_block([&](const Vec& x) { return Vec(a * x - b); }, [&](const Vec&) { return a; }, r.x);
    EXPECT_EQ(warm.iterations, 0);
}

TEST(Newton, Failures)
{
    EXPECT_THROW(newton_block([](const Vec& x) { return Vec::Constant(1, x(0) * x(0) + 1.0); },
                              [](const Vec&) { return Mat::Zero(1, 1); }, Vec::Zero(1)),
                 ConditioningError);
    EXPECT_THROW(newton_block([](const Vec& x) { return Vec::Constant(1, std::atan(x(0)) + 1e-3 * x(0) - 1.5); },
                              [](const Vec& x) { return Mat::Constant(1, 1, 1.0 / (1 + x(0) * x(0)) + 1e-3); },
                              Vec::Constant(1, 30.0), 1e-12, 5),
                 NewtonDiverged);
}
