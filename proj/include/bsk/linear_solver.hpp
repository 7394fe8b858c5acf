#pragma once

#include "core.hpp"
#include "kernel.hpp"
#include "path.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bsk {

// Method I puts the kernel ansatz on u^(m); Method II on u after m-fold integration.
enum class Method { derivative_ansatz, volterra };

using CoefficientFn = std::function<Mat(double)>;

// sum_r A_r(t) u^(r)(t) = f(t), u^(p)(t0) = g_p
struct LinearODESpec {
    int order = 1;
    Index dim = 1;
    std::vector<CoefficientFn> coefficients;  // A_0 .. A_m
    std::vector<Vec> initial;                 // g_0 .. g_{m-1}
    double max_leading_condition = 1e12;

    static LinearODESpec constant(std::vector<Mat> a, std::vector<Vec> g)
    {
        LinearODESpec s;
        require(a.size() >= 2, "LinearODESpec: need at least A_0 and A_1");
        s.order = static_cast<int>(a.size()) - 1;
        s.dim = a.front().rows();
        for (auto& m : a) {
            require(m.rows() == s.dim && m.cols() == s.dim, "LinearODESpec: coefficient shape mismatch");
            s.coefficients.push_back([m](double) { return m; });
        }
        s.initial = std::move(g);
        s.validate();
        return s;
    }

    // Scalar ODE with constant coefficients a = (A_0..A_m) and initial data g.
    static LinearODESpec scalar(const std::vector<double>& a, const std::vector<double>& g)
    {
        std::vector<Mat> am;
        for (double v : a) am.push_back(Mat::Constant(1, 1, v));
        std::vector<Vec> gv;
        for (double v : g) gv.push_back(Vec::Constant(1, v));
        return constant(std::move(am), std::move(gv));
    }

    void validate() const
    {
        require(order >= 1, "LinearODESpec: order must be >= 1");
        require(dim >= 1, "LinearODESpec: dimension must be >= 1");
        require(static_cast<int>(coefficients.size()) == order + 1,
                "LinearODESpec: expected " + std::to_string(order + 1) + " coefficients");
        require(static_cast<int>(initial.size()) == order,
                "LinearODESpec: expected " + std::to_string(order) + " initial vectors");
        for (const auto& g : initial) require(g.size() == dim, "LinearODESpec: initial data dimension mismatch");
    }

    Mat coefficient(int r, double t) const
    {
        Mat a = coefficients[static_cast<std::size_t>(r)](t);
        require(a.rows() == dim && a.cols() == dim, "LinearODESpec: coefficient function returned wrong shape");
        return a;
    }
};

// p_{k-1}(t) = sum_{l<k} (t-t0)^l / l! g_{m-k+l}
inline Vec taylor_poly(const std::vector<Vec>& g, int m, int k, double t, double t0 = 0.0)
{
    require(k >= 0, "taylor_poly: k must be >= 0");
    require(k <= m, "taylor_poly: k must not exceed the order");
    require(static_cast<int>(g.size()) == m, "taylor_poly: initial data length must equal the order");
    Vec p = Vec::Zero(g.empty() ? 0 : g.front().size());
    double pw = 1.0, dt = t - t0;
    for (int l = 0; l < k; ++l) {
        p += pw / factorial(l) * g[static_cast<std::size_t>(m - k + l)];
        pw *= dt;
    }
    return p;
}

// q(t) = sum_{r=1}^m A_r sum_{l<r} (t-t0)^{m-r+l}/(m-r+l)! g_l, differentiated `deriv` times.
inline Vec q_poly(const LinearODESpec& spec, double t, double t0, int deriv = 0)
{
    int m = spec.order;
    Vec q = Vec::Zero(spec.dim);
    double dt = t - t0;
    for (int r = 1; r <= m; ++r) {
        Vec inner = Vec::Zero(spec.dim);
        for (int l = 0; l < r; ++l) {
            int e = m - r + l - deriv;
            if (e < 0) continue;
            inner += std::pow(dt, e) / factorial(e) * spec.initial[static_cast<std::size_t>(l)];
        }
        q += spec.coefficient(r, t) * inner;
    }
    return q;
}

// Row-blocked coefficient vector <-> (n x d) matrix with alpha_i in row i.
inline Mat to_blocks(const Vec& alpha, Index d)
{
    Index n = alpha.size() / d;
    Mat a(n, d);
    for (Index i = 0; i < n; ++i) a.row(i) = alpha.segment(i * d, d).transpose();
    return a;
}

inline Vec from_blocks(const Mat& a)
{
    Vec v(a.size());
    for (Index i = 0; i < a.rows(); ++i) v.segment(i * a.cols(), a.cols()) = a.row(i).transpose();
    return v;
}

// A_r(t_j) for every node; isotropic when every A_r(t_j) is a multiple of the identity.
struct NodeCoefficients {
    std::vector<std::vector<Mat>> at;  // [r][j]
    bool isotropic = true;

    NodeCoefficients() = default;
    NodeCoefficients(const LinearODESpec& spec, const std::vector<double>& grid)
    {
        spec.validate();
        at.resize(static_cast<std::size_t>(spec.order + 1));
        for (int r = 0; r <= spec.order; ++r)
            for (double t : grid) {
                Mat a = spec.coefficient(r, t);
                if (!a.allFinite()) throw NumericError("coefficient A_" + std::to_string(r) + " not finite at t=" + std::to_string(t));
                if ((a - a(0, 0) * Mat::Identity(a.rows(), a.cols())).norm() != 0.0) isotropic = false;
                at[static_cast<std::size_t>(r)].push_back(a);
            }
        const auto& lead = at.back();
        for (std::size_t j = 0; j < lead.size(); ++j) {
            Eigen::JacobiSVD<Mat> svd(lead[j]);
            double smin = svd.singularValues().minCoeff(), smax = svd.singularValues().maxCoeff();
            if (!(smin > 0.0) || smax / smin > spec.max_leading_condition)
                throw ConditioningError("leading coefficient A_" + std::to_string(spec.order) +
                                        " is not invertible at t=" + std::to_string(grid[j]));
        }
    }

    int order() const { return static_cast<int>(at.size()) - 1; }
    const Mat& operator()(int r, Index j) const { return at[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)]; }
};

// (L alpha) as an n x d matrix, without forming L.
inline Mat apply_block_kernel(const NodeCoefficients& c, const GramStack& gram, const Mat& alpha)
{
    int m = c.order();
    Mat out = Mat::Zero(alpha.rows(), alpha.cols());
    for (int r = 0; r <= m; ++r) {
        Mat v = gram.level(m - r) * alpha;
        for (Index j = 0; j < v.rows(); ++j) out.row(j) += (c(r, j) * v.row(j).transpose()).transpose();
    }
    return out;
}

// (L^T R) as an n x d matrix.
inline Mat apply_block_kernel_transpose(const NodeCoefficients& c, const GramStack& gram, const Mat& resid)
{
    int m = c.order();
    Mat out = Mat::Zero(resid.rows(), resid.cols());
    Mat w(resid.rows(), resid.cols());
    for (int r = 0; r <= m; ++r) {
        for (Index j = 0; j < resid.rows(); ++j) w.row(j) = (c(r, j).transpose() * resid.row(j).transpose()).transpose();
        out.noalias() += gram.level(m - r).transpose() * w;
    }
    return out;
}

// L_{ji} = sum_r A_r(t_j) K^(m-r)[j][i], dense (n d) x (n d).
inline Mat block_kernel_matrix(const NodeCoefficients& c, const GramStack& gram)
{
    int m = c.order();
    Index n = gram.size(), d = c(0, 0).rows();
    Mat l = Mat::Zero(n * d, n * d);
    for (int r = 0; r <= m; ++r) {
        auto k = gram.level(m - r);
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j) l.block(j * d, i * d, d, d) += c(r, j) * k(j, i);
    }
    return l;
}

// Scalar kernel part of an isotropic system: L_s[j][i] = sum_r a_r(t_j) K^(m-r)[j][i].
inline Mat scalar_block_kernel(const NodeCoefficients& c, const GramStack& gram)
{
    int m = c.order();
    Index n = gram.size();
    Mat l = Mat::Zero(n, n);
    for (int r = 0; r <= m; ++r) {
        auto k = gram.level(m - r);
        for (Index j = 0; j < n; ++j) l.row(j) += c(r, j)(0, 0) * k.row(j);
    }
    return l;
}

// Rows of the Taylor polynomials p_{k-1}(t_j), n x d.
inline Mat taylor_rows(const LinearODESpec& spec, int k, const std::vector<double>& grid, double t0)
{
    Mat p(static_cast<Index>(grid.size()), spec.dim);
    for (std::size_t j = 0; j < grid.size(); ++j)
        p.row(static_cast<Index>(j)) = taylor_poly(spec.initial, spec.order, k, grid[j], t0).transpose();
    return p;
}

struct CollocationSystem {
    Method method = Method::derivative_ansatz;
    NodeCoefficients coefficients;
    Mat block_kernel;         // L, (n d) x (n d)
    Mat scalar_kernel;        // L_s when isotropic, else empty
    Vec rhs;                  // reduced forcing, row-blocked
    Mat boundary;             // B, (m d) x (n d)
    Vec boundary_target;      // g' after Taylor embedding
    Index dim = 1;
};

namespace detail {

inline void check_forcing(const GramStack& gram, const Mat& forcing, const LinearODESpec& spec)
{
    require(gram.order() >= spec.order, "assemble: GramStack has levels up to " + std::to_string(gram.order()) +
                                            ", order " + std::to_string(spec.order) + " required");
    require(forcing.rows() == gram.size(), "assemble: forcing rows must match the collocation grid");
    require(forcing.cols() == spec.dim, "assemble: forcing dimension must match the ODE dimension");
}

inline void fill_boundary(CollocationSystem& sys, const LinearODESpec& spec, const GramStack& gram, double t0)
{
    int m = spec.order;
    Index n = gram.size(), d = spec.dim;
    sys.boundary = Mat::Zero(m * d, n * d);
    sys.boundary_target = Vec::Zero(m * d);
    for (int p = 0; p < m; ++p) {
        auto k = gram.level(m - p);
        for (Index i = 0; i < n; ++i) sys.boundary.block(p * d, i * d, d, d) = k(0, i) * Mat::Identity(d, d);
        sys.boundary_target.segment(p * d, d) =
            spec.initial[static_cast<std::size_t>(p)] - taylor_poly(spec.initial, m, m - p, gram.grid().front(), t0);
    }
}

}  // namespace detail

// Reduced forcing f - sum_{r<m} A_r p_{m-r-1} for Method I.
inline Mat reduced_forcing(const LinearODESpec& spec, const NodeCoefficients& c, const std::vector<double>& grid,
                           const Mat& forcing, double t0)
{
    Mat rhs = forcing;
    for (int r = 0; r < spec.order; ++r) {
        Mat p = taylor_rows(spec, spec.order - r, grid, t0);
        for (Index j = 0; j < rhs.rows(); ++j) rhs.row(j) -= (c(r, j) * p.row(j).transpose()).transpose();
    }
    return rhs;
}

// I^m f + q(t_j) for Method II.
inline Mat volterra_rhs(const LinearODESpec& spec, const std::vector<double>& grid, const Mat& forcing, double t0)
{
    Mat integ = forcing;
    for (int k = 0; k < spec.order; ++k) integ = cumtrapz_cols(grid, integ);
    for (std::size_t j = 0; j < grid.size(); ++j) integ.row(static_cast<Index>(j)) += q_poly(spec, grid[j], t0).transpose();
    return integ;
}

inline CollocationSystem assemble_common(const LinearODESpec& spec, const GramStack& gram, const Mat& forcing,
                                         bool dense)
{
    spec.validate();
    detail::check_forcing(gram, forcing, spec);
    CollocationSystem sys;
    sys.dim = spec.dim;
    sys.coefficients = NodeCoefficients(spec, gram.grid());
    if (dense) sys.block_kernel = block_kernel_matrix(sys.coefficients, gram);
    if (sys.coefficients.isotropic) sys.scalar_kernel = scalar_block_kernel(sys.coefficients, gram);
    return sys;
}

inline CollocationSystem assemble_method1(const LinearODESpec& spec, const GramStack& gram, const Mat& forcing,
                                          bool dense = true)
{
    CollocationSystem sys = assemble_common(spec, gram, forcing, dense);
    sys.method = Method::derivative_ansatz;
    double t0 = gram.grid().front();
    sys.rhs = from_blocks(reduced_forcing(spec, sys.coefficients, gram.grid(), forcing, t0));
    detail::fill_boundary(sys, spec, gram, t0);
    return sys;
}

inline CollocationSystem assemble_method2(const LinearODESpec& spec, const GramStack& gram, const Mat& forcing,
                                          bool dense = true)
{
    CollocationSystem sys = assemble_common(spec, gram, forcing, dense);
    sys.method = Method::volterra;
    double t0 = gram.grid().front();
    sys.rhs = from_blocks(volterra_rhs(spec, gram.grid(), forcing, t0));
    detail::fill_boundary(sys, spec, gram, t0);
    return sys;
}

inline CollocationSystem assemble(Method method, const LinearODESpec& spec, const GramStack& gram, const Mat& forcing,
                                  bool dense = true)
{
    return method == Method::derivative_ansatz ? assemble_method1(spec, gram, forcing, dense)
                                               : assemble_method2(spec, gram, forcing, dense);
}

struct SolveOptions {
    double boundary_weight = 0.0;
    double ridge = 0.0;
};

struct LinearSolution {
    Vec alpha;
    double residual_norm = 0.0;
};

namespace detail {

// argmin |A x - b|^2 + wb |B x - c|^2 + ridge |x|^2 for every column of b.
inline Mat least_squares(const Mat& a, const Mat& b, const Mat& bnd, const Mat& bnd_target, const SolveOptions& opt)
{
    Index n = a.cols();
    bool square_only = opt.boundary_weight <= 0.0 && opt.ridge <= 0.0 && a.rows() == n;
    if (square_only) {
        Eigen::PartialPivLU<Mat> lu(a);
        double rc = lu.rcond();
        if (!(rc >= std::sqrt(std::numeric_limits<double>::epsilon())))
            throw ConditioningError("collocation system is singular to working precision (rcond " + std::to_string(rc) +
                                    "); set a positive ridge to regularize");
        return lu.solve(b);
    }
    Index rows = a.rows();
    if (opt.boundary_weight > 0.0) rows += bnd.rows();
    if (opt.ridge > 0.0) rows += n;
    Mat stack = Mat::Zero(rows, n);
    Mat rhs = Mat::Zero(rows, b.cols());
    stack.topRows(a.rows()) = a;
    rhs.topRows(a.rows()) = b;
    Index at = a.rows();
    if (opt.boundary_weight > 0.0) {
        double w = std::sqrt(opt.boundary_weight);
        stack.middleRows(at, bnd.rows()) = w * bnd;
        rhs.middleRows(at, bnd.rows()) = w * bnd_target;
        at += bnd.rows();
    }
    if (opt.ridge > 0.0) stack.bottomRows(n) = std::sqrt(opt.ridge) * Mat::Identity(n, n);
    if (opt.ridge > 0.0) return Eigen::HouseholderQR<Mat>(stack).solve(rhs);
    Eigen::ColPivHouseholderQR<Mat> qr(stack);
    qr.setThreshold(std::sqrt(std::numeric_limits<double>::epsilon()));
    if (qr.rank() < n)
        throw ConditioningError("collocation system is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                                std::to_string(n) + "); set a positive ridge to regularize");
    return qr.solve(rhs);
}

}  // namespace detail

inline LinearSolution solve_fit(const CollocationSystem& sys, const SolveOptions& opt = {})
{
    require(opt.boundary_weight >= 0.0 && opt.ridge >= 0.0, "solve_fit: weights must be non-negative");
    LinearSolution out;
    Index d = sys.dim;
    if (sys.scalar_kernel.size() > 0) {
        // Isotropic: one factorization shared by the d channels.
        Index n = sys.scalar_kernel.rows();
        Mat b = to_blocks(sys.rhs, d);
        Index m = sys.boundary.rows() / d;
        Mat bs(m, n), bt(m, d);
        for (Index p = 0; p < m; ++p) {
            for (Index i = 0; i < n; ++i) bs(p, i) = sys.boundary(p * d, i * d);
            bt.row(p) = sys.boundary_target.segment(p * d, d).transpose();
        }
        Mat x = detail::least_squares(sys.scalar_kernel, b, bs, bt, opt);
        out.alpha = from_blocks(x);
        out.residual_norm = (sys.scalar_kernel * x - b).norm();
    } else {
        require(sys.block_kernel.size() > 0, "solve_fit: dense block kernel was not assembled");
        Mat x = detail::least_squares(sys.block_kernel, sys.rhs, sys.boundary, sys.boundary_target, opt);
        out.alpha = x.col(0);
        out.residual_norm = (sys.block_kernel * out.alpha - sys.rhs).norm();
    }
    if (!out.alpha.allFinite()) throw NumericError("solve_fit: non-finite coefficients");
    return out;
}

struct SolverFit {
    Method method = Method::derivative_ansatz;
    LinearODESpec spec;
    std::shared_ptr<const GramStack> gram;
    Mat forcing;              // observed forcing at the nodes, n x d
    Mat alpha;                // n x d
    double boundary_weight = 0.0;
    double ridge = 0.0;
    double residual_norm = 0.0;

    double t0() const { return gram->grid().front(); }
    Index nodes() const { return gram->size(); }
};

struct Prediction {
    Vec u;
    std::vector<Vec> derivatives;  // derivatives[p] = u^(p); Method II carries only p = 0
};

inline SolverFit make_fit(Method method, const LinearODESpec& spec, std::shared_ptr<const GramStack> gram,
                          const Mat& forcing, const LinearSolution& sol, const SolveOptions& opt)
{
    SolverFit fit;
    fit.method = method;
    fit.spec = spec;
    fit.gram = std::move(gram);
    fit.forcing = forcing;
    fit.alpha = to_blocks(sol.alpha, spec.dim);
    fit.boundary_weight = opt.boundary_weight;
    fit.ridge = opt.ridge;
    fit.residual_norm = sol.residual_norm;
    return fit;
}

// Assemble and solve in one call.
inline SolverFit fit_linear(Method method, const LinearODESpec& spec, std::shared_ptr<const GramStack> gram,
                            const Mat& forcing, const SolveOptions& opt = {})
{
    bool dense = true;
    CollocationSystem sys = assemble(method, spec, *gram, forcing, false);
    if (sys.scalar_kernel.size() > 0) dense = false;
    if (dense) sys.block_kernel = block_kernel_matrix(sys.coefficients, *gram);
    LinearSolution sol = solve_fit(sys, opt);
    return make_fit(method, spec, std::move(gram), forcing, sol, opt);
}

inline Prediction predict_at_node(const SolverFit& fit, Index j, double tau)
{
    const GramStack& g = *fit.gram;
    int m = fit.spec.order;
    Prediction out;
    if (fit.method == Method::volterra) {
        out.u = (g.level(0).row(j) * fit.alpha).transpose();
        out.derivatives.push_back(out.u);
        return out;
    }
    out.derivatives.resize(static_cast<std::size_t>(m + 1));
    for (int k = 0; k <= m; ++k) {
        Vec v = (g.level(k).row(j) * fit.alpha).transpose();
        v += taylor_poly(fit.spec.initial, m, k, tau, fit.t0());
        out.derivatives[static_cast<std::size_t>(m - k)] = v;
    }
    out.u = out.derivatives[0];
    return out;
}

inline Prediction predict(const SolverFit& fit, double tau)
{
    const auto& grid = fit.gram->grid();
    if (tau < grid.front() || tau > grid.back())
        throw ExtrapolationError("predict: time " + std::to_string(tau) + " outside the fitted window [" +
                                 std::to_string(grid.front()) + ", " + std::to_string(grid.back()) + "]");
    return predict_at_node(fit, floor_node(grid, tau), tau);
}

// u^(p) at every node, n x d. Method II supports p = 0 only.
inline Mat reconstruct_derivative(const SolverFit& fit, int p)
{
    const GramStack& g = *fit.gram;
    int m = fit.spec.order;
    if (fit.method == Method::volterra) {
        require(p == 0, "reconstruct_derivative: the Volterra ansatz yields u only");
        return g.level(0) * fit.alpha;
    }
    require(p >= 0 && p <= m, "reconstruct_derivative: order out of range");
    return g.level(m - p) * fit.alpha + taylor_rows(fit.spec, m - p, g.grid(), fit.t0());
}

// Method I: forcing implied by the fit. Method II: implied m-fold integrated forcing.
inline Mat reconstruct_forcing(const SolverFit& fit)
{
    const GramStack& g = *fit.gram;
    NodeCoefficients c(fit.spec, g.grid());
    Mat lf = apply_block_kernel(c, g, fit.alpha);
    if (fit.method == Method::volterra) {
        for (Index j = 0; j < lf.rows(); ++j)
            lf.row(j) -= q_poly(fit.spec, g.grid()[static_cast<std::size_t>(j)], fit.t0()).transpose();
        return lf;
    }
    Mat p;
    for (int r = 0; r < fit.spec.order; ++r) {
        p = taylor_rows(fit.spec, fit.spec.order - r, g.grid(), fit.t0());
        for (Index j = 0; j < lf.rows(); ++j) lf.row(j) += (c(r, j) * p.row(j).transpose()).transpose();
    }
    return lf;
}

// Target for reconstruct_forcing: f (Method I) or I^m f (Method II).
inline Mat forcing_target(const SolverFit& fit)
{
    if (fit.method == Method::derivative_ansatz) return fit.forcing;
    Mat integ = fit.forcing;
    for (int k = 0; k < fit.spec.order; ++k) integ = cumtrapz_cols(fit.gram->grid(), integ);
    return integ;
}

}  // namespace bsk
