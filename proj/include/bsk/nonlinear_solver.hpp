#pragma once

#include "core.hpp"
#include "kernel.hpp"
#include "lbfgs.hpp"
#include "linear_solver.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bsk {

// Node-wise nonlinear term N(t, u, u', ..., u^(m-1)) with optional Jacobians d N / d u^(r).
struct NonlinearTerm {
    std::function<Vec(double, const std::vector<Vec>&)> value;
    std::function<Mat(double, const std::vector<Vec>&, int)> jacobian;
};

// sum_r A_r u^(r) + N(u, ..., u^(m-1)) = f
struct NonlinearODESpec {
    LinearODESpec linear;
    NonlinearTerm term;
};

// u'' + k1 u' + k0 u + gamma u^3 = f, u(t0) = a, u'(t0) = b
inline NonlinearODESpec duffing(double k0, double k1, double gamma, double a, double b)
{
    NonlinearODESpec s;
    s.linear = LinearODESpec::scalar({k0, k1, 1.0}, {a, b});
    s.term.value = [gamma](double, const std::vector<Vec>& u) -> Vec { return gamma * u[0].array().cube().matrix(); };
    s.term.jacobian = [gamma](double, const std::vector<Vec>& u, int r) -> Mat {
        if (r != 0) return Mat::Zero(1, 1);
        return Mat::Constant(1, 1, 3.0 * gamma * u[0](0) * u[0](0));
    };
    return s;
}

// Central-difference Jacobian of the nonlinear term with respect to u^(r).
inline Mat finite_difference_jacobian(const NonlinearTerm& term, double t, std::vector<Vec> u, int r)
{
    Vec& x = u[static_cast<std::size_t>(r)];
    Index d = x.size();
    Vec base = term.value(t, u);
    Mat jac(base.size(), d);
    for (Index c = 0; c < d; ++c) {
        double orig = x(c), h = 1e-6 * std::max(1.0, std::abs(orig));
        x(c) = orig + h;
        Vec fp = term.value(t, u);
        x(c) = orig - h;
        Vec fm = term.value(t, u);
        x(c) = orig;
        jac.col(c) = (fp - fm) / (2.0 * h);
    }
    return jac;
}

// Method I collocation problem with a nonlinear term, ready for evaluation.
class NonlinearProblem {
public:
    NonlinearProblem(NonlinearODESpec spec, std::shared_ptr<const GramStack> gram, Mat forcing, double ridge = 0.0)
        : spec_(std::move(spec)), gram_(std::move(gram)), forcing_(std::move(forcing)), ridge_(ridge)
    {
        const auto& lin = spec_.linear;
        lin.validate();
        require(gram_->order() >= lin.order, "nonlinear problem: GramStack lacks integrated levels");
        require(forcing_.rows() == gram_->size() && forcing_.cols() == lin.dim,
                "nonlinear problem: forcing shape mismatch");
        coef_ = NodeCoefficients(lin, gram_->grid());
        t0_ = gram_->grid().front();
        rhs_ = reduced_forcing(lin, coef_, gram_->grid(), forcing_, t0_);
        for (int r = 0; r < lin.order; ++r) taylor_.push_back(taylor_rows(lin, lin.order - r, gram_->grid(), t0_));
    }

    Index nodes() const { return gram_->size(); }
    Index dim() const { return spec_.linear.dim; }
    const NonlinearODESpec& spec() const { return spec_; }
    const std::shared_ptr<const GramStack>& gram() const { return gram_; }
    const NodeCoefficients& coefficients() const { return coef_; }
    const Mat& forcing() const { return forcing_; }
    const Mat& reduced() const { return rhs_; }
    double ridge() const { return ridge_; }

    // u^(r) at all nodes for r < m, each n x d.
    std::vector<Mat> reconstructions(const Mat& alpha) const
    {
        int m = spec_.linear.order;
        std::vector<Mat> u;
        for (int r = 0; r < m; ++r) u.push_back(gram_->level(m - r) * alpha + taylor_[static_cast<std::size_t>(r)]);
        return u;
    }

    Mat residual(const Mat& alpha) const
    {
        Mat r = apply_block_kernel(coef_, *gram_, alpha) - rhs_;
        if (!spec_.term.value) return r;
        auto u = reconstructions(alpha);
        std::vector<Vec> at(u.size());
        for (Index j = 0; j < r.rows(); ++j) {
            for (std::size_t k = 0; k < u.size(); ++k) at[k] = u[k].row(j).transpose();
            double t = gram_->grid()[static_cast<std::size_t>(j)];
            Vec nv = spec_.term.value(t, at);
            if (!nv.allFinite())
                throw NumericError("nonlinear term is not finite at node " + std::to_string(j) + " (t=" + std::to_string(t) + ")");
            r.row(j) += nv.transpose();
        }
        return r;
    }

    // |R|^2 / n + ridge |alpha|^2 and its gradient (row-blocked).
    double loss_and_grad(const Vec& alpha_flat, Vec& grad) const
    {
        int m = spec_.linear.order;
        Index n = nodes();
        Mat alpha = to_blocks(alpha_flat, dim());
        Mat r = apply_block_kernel(coef_, *gram_, alpha) - rhs_;
        std::vector<Mat> u;
        std::vector<std::vector<Mat>> jac;  // [j][r]
        if (spec_.term.value) {
            u = reconstructions(alpha);
            jac.resize(static_cast<std::size_t>(n));
            std::vector<Vec> at(u.size());
            for (Index j = 0; j < n; ++j) {
                for (std::size_t k = 0; k < u.size(); ++k) at[k] = u[k].row(j).transpose();
                double t = gram_->grid()[static_cast<std::size_t>(j)];
                Vec nv = spec_.term.value(t, at);
                if (!nv.allFinite())
                    throw NumericError("nonlinear term is not finite at node " + std::to_string(j) + " (t=" + std::to_string(t) + ")");
                r.row(j) += nv.transpose();
                for (int k = 0; k < m; ++k)
                    jac[static_cast<std::size_t>(j)].push_back(spec_.term.jacobian ? spec_.term.jacobian(t, at, k)
                                                                                    : finite_difference_jacobian(spec_.term, t, at, k));
            }
        }
        double loss = r.squaredNorm() / static_cast<double>(n) + ridge_ * alpha_flat.squaredNorm();
        Mat g = Mat::Zero(n, dim());
        Mat w(n, dim());
        for (int k = 0; k <= m; ++k) {
            for (Index j = 0; j < n; ++j) {
                Vec rj = r.row(j).transpose();
                Vec wj = coef_(k, j).transpose() * rj;
                if (k < m && !jac.empty()) wj += jac[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)].transpose() * rj;
                w.row(j) = wj.transpose();
            }
            g.noalias() += gram_->level(m - k).transpose() * w;
        }
        grad = (2.0 / static_cast<double>(n)) * from_blocks(g) + 2.0 * ridge_ * alpha_flat;
        return loss;
    }

    // Solution of the linear part (nonlinear term dropped); zero if that system is singular.
    Vec linear_warm_start() const
    {
        CollocationSystem sys = assemble_method1(spec_.linear, *gram_, forcing_, false);
        if (sys.scalar_kernel.size() == 0) sys.block_kernel = block_kernel_matrix(sys.coefficients, *gram_);
        SolveOptions opt;
        opt.ridge = ridge_ * static_cast<double>(nodes());
        try {
            return solve_fit(sys, opt).alpha;
        } catch (const ConditioningError&) {
            return Vec::Zero(nodes() * dim());
        }
    }

private:
    NonlinearODESpec spec_;
    std::shared_ptr<const GramStack> gram_;
    Mat forcing_;
    double ridge_ = 0.0;
    NodeCoefficients coef_;
    double t0_ = 0.0;
    Mat rhs_;
    std::vector<Mat> taylor_;
};

struct NonlinearFit {
    SolverFit fit;
    LbfgsResult optimizer;
};

inline LbfgsResult lbfgs_minimize(const NonlinearProblem& problem, Vec alpha0, const LbfgsConfig& cfg = {})
{
    return lbfgs_minimize([&](const Vec& a, Vec& g) { return problem.loss_and_grad(a, g); }, std::move(alpha0), cfg);
}

inline SolverFit to_solver_fit(const NonlinearProblem& problem, const Vec& alpha)
{
    SolverFit fit;
    fit.method = Method::derivative_ansatz;
    fit.spec = problem.spec().linear;
    fit.gram = problem.gram();
    fit.forcing = problem.forcing();
    fit.alpha = to_blocks(alpha, problem.dim());
    fit.ridge = problem.ridge();
    fit.residual_norm = problem.residual(fit.alpha).norm();
    return fit;
}

// Warm-started (or explicitly started) L-BFGS fit of a nonlinear problem.
inline NonlinearFit fit_nonlinear(const NonlinearProblem& problem, const LbfgsConfig& cfg = {}, const Vec* start = nullptr)
{
    Vec a0 = start ? *start : problem.linear_warm_start();
    LbfgsResult res = lbfgs_minimize(problem, a0, cfg);
    return {to_solver_fit(problem, res.x), res};
}

// Forcing implied by a nonlinear fit: L alpha + N(u...) + sum A_r p.
inline Mat reconstruct_forcing(const NonlinearProblem& problem, const Mat& alpha)
{
    return problem.residual(alpha) + problem.forcing();
}

inline Prediction predict_nonlinear(const SolverFit& fit, double tau)
{
    return predict(fit, tau);
}

struct NewtonResult {
    Vec x;
    int iterations = 0;
    double residual = 0.0;
};

struct NewtonDiverged : Error {
    Vec last;
    NewtonDiverged(const std::string& what, Vec x) : Error(what), last(std::move(x)) {}
};

// Newton iteration on a small d-dimensional system g(x) = 0.
inline NewtonResult newton_block(const std::function<Vec(const Vec&)>& g, const std::function<Mat(const Vec&)>& jac,
                                 Vec x0, double tol = 1e-12, int max_iter = 50)
{
    NewtonResult res;
    res.x = std::move(x0);
    Vec gx = g(res.x);
    for (int it = 0; it <= max_iter; ++it) {
        res.residual = gx.norm();
        if (!std::isfinite(res.residual)) throw NewtonDiverged("newton_block: residual is not finite", res.x);
        if (res.residual <= tol) return res;
        if (it == max_iter) break;
        Mat j = jac(res.x);
        Eigen::FullPivLU<Mat> lu(j);
        if (lu.rank() < j.rows() || lu.rcond() < 1e-14)
            throw ConditioningError("newton_block: singular Jacobian at iteration " + std::to_string(it));
        res.x -= lu.solve(gx);
        ++res.iterations;
        gx = g(res.x);
    }
    throw NewtonDiverged("newton_block: no convergence after " + std::to_string(max_iter) + " iterations", res.x);
}

}  // namespace bsk
