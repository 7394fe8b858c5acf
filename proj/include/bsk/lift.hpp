#pragma once

#include "core.hpp"
#include "kernel.hpp"
#include "lbfgs.hpp"
#include "linear_solver.hpp"
#include "nonlinear_solver.hpp"
#include "signature.hpp"

#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace bsk {

// Feed-forward map with tanh hidden layers and a linear output layer.
struct Mlp {
    std::vector<Mat> weights;  // layer l: out x in
    std::vector<Vec> biases;

    static Mlp glorot(Index input, const std::vector<Index>& hidden, Index output, std::uint64_t seed)
    {
        require(input >= 1 && output >= 0, "Mlp: widths must be positive");
        std::vector<Index> widths{input};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(output);
        std::mt19937_64 rng(seed);
        Mlp net;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            Index in = widths[l], out = widths[l + 1];
            require(in >= 1, "Mlp: hidden widths must be positive");
            double limit = std::sqrt(6.0 / static_cast<double>(in + out));
            std::uniform_real_distribution<double> u(-limit, limit);
            Mat w(out, in);
            for (Index r = 0; r < out; ++r)
                for (Index c = 0; c < in; ++c) w(r, c) = u(rng);
            net.weights.push_back(w);
            net.biases.push_back(Vec::Zero(out));
        }
        return net;
    }

    std::size_t layers() const { return weights.size(); }
    Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
    Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }

    void validate() const
    {
        require(!weights.empty() && weights.size() == biases.size(), "Mlp: layer list is inconsistent");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            require(biases[l].size() == weights[l].rows(), "Mlp: bias length mismatch at layer " + std::to_string(l));
            if (l > 0)
                require(weights[l].cols() == weights[l - 1].rows(), "Mlp: layer shapes do not compose at layer " + std::to_string(l));
            require(weights[l].allFinite() && biases[l].allFinite(), "Mlp: non-finite parameters");
        }
    }

    Index parameter_count() const
    {
        Index c = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) c += weights[l].size() + biases[l].size();
        return c;
    }

    // Per layer: weights row-major, then biases.
    Vec flatten() const
    {
        Vec v(parameter_count());
        Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Index r = 0; r < weights[l].rows(); ++r)
                for (Index c = 0; c < weights[l].cols(); ++c) v(at++) = weights[l](r, c);
            for (Index r = 0; r < biases[l].size(); ++r) v(at++) = biases[l](r);
        }
        return v;
    }

    void unflatten(const Vec& v)
    {
        require(v.size() == parameter_count(), "Mlp: parameter vector length mismatch");
        Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Index r = 0; r < weights[l].rows(); ++r)
                for (Index c = 0; c < weights[l].cols(); ++c) weights[l](r, c) = v(at++);
            for (Index r = 0; r < biases[l].size(); ++r) biases[l](r) = v(at++);
        }
    }

    Mlp with_parameters(const Vec& v) const
    {
        Mlp copy = *this;
        copy.unflatten(v);
        return copy;
    }

    Vec forward(const Vec& x) const
    {
        require(x.size() == input_dim(), "mlp_forward: input width " + std::to_string(x.size()) + " != " +
                                             std::to_string(input_dim()));
        Vec h = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Vec z = weights[l] * h + biases[l];
            h = l + 1 < weights.size() ? Vec(z.array().tanh()) : z;
        }
        return h;
    }

    // Rows are samples; activations[l] is the input to layer l (last entry is the output).
    Mat forward_batch(const Mat& x, std::vector<Mat>* activations = nullptr) const
    {
        require(x.cols() == input_dim(), "mlp_forward: input width mismatch");
        Mat h = x;
        if (activations) activations->assign(1, h);
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Mat z = h * weights[l].transpose();
            z.rowwise() += biases[l].transpose();
            h = l + 1 < weights.size() ? Mat(z.array().tanh()) : z;
            if (activations) activations->push_back(h);
        }
        return h;
    }

    // Flat parameter gradient given dL/d(output rows).
    Vec backward_batch(const std::vector<Mat>& activations, const Mat& out_grad) const
    {
        std::vector<Mat> gw(weights.size());
        std::vector<Vec> gb(weights.size());
        Mat dz = out_grad;
        for (std::size_t l = weights.size(); l-- > 0;) {
            const Mat& in = activations[l];
            gw[l] = dz.transpose() * in;
            gb[l] = dz.colwise().sum().transpose();
            if (l == 0) break;
            Mat dh = dz * weights[l];
            dz = dh.array() * (1.0 - in.array().square());
        }
        Vec v(parameter_count());
        Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Index r = 0; r < gw[l].rows(); ++r)
                for (Index c = 0; c < gw[l].cols(); ++c) v(at++) = gw[l](r, c);
            for (Index r = 0; r < gb[l].size(); ++r) v(at++) = gb[l](r);
        }
        return v;
    }
};

inline Vec mlp_forward(const Mlp& net, const Vec& x) { return net.forward(x); }

// (original channels, learned channels); the original block is copied unchanged.
inline Mat lifted_path(const Mat& path, const Mat& extension)
{
    require(path.rows() == extension.rows(), "lifted_path: row count mismatch");
    Mat out(path.rows(), path.cols() + extension.cols());
    out.leftCols(path.cols()) = path;
    out.rightCols(extension.cols()) = extension;
    return out;
}

// (1/n) sum_i sum_ab (D^a D^b - I^ab - I^ba)^2 with left-point sums; optional gradient w.r.t. the channels.
inline double shuffle_loss(const Mat& ext, Mat* grad = nullptr)
{
    Index n = ext.rows(), m = ext.cols();
    require(n >= 2, "shuffle_loss: need at least 2 time points");
    // left-point residual Q_i = sum_{l <= i} delta_l delta_l^T
    std::vector<Mat> q(static_cast<std::size_t>(n), Mat::Zero(m, m));
    double loss = 0.0;
    for (Index i = 1; i < n; ++i) {
        Vec dl = (ext.row(i) - ext.row(i - 1)).transpose();
        q[static_cast<std::size_t>(i)] = q[static_cast<std::size_t>(i - 1)] + dl * dl.transpose();
        loss += q[static_cast<std::size_t>(i)].squaredNorm();
    }
    loss /= static_cast<double>(n);
    if (grad) {
        grad->setZero(n, m);
        Mat z = Mat::Zero(m, m);
        for (Index l = n - 1; l >= 1; --l) {
            z += q[static_cast<std::size_t>(l)];
            Vec dl = (ext.row(l) - ext.row(l - 1)).transpose();
            Vec g = (4.0 / static_cast<double>(n)) * (z * dl);
            grad->row(l) += g.transpose();
            grad->row(l - 1) -= g.transpose();
        }
    }
    return loss;
}

// Data and solver settings for lift training.
struct LiftProblem {
    Method method = Method::derivative_ansatz;
    LinearODESpec spec;
    NonlinearTerm term;
    KernelSpec kernel;
    std::vector<double> grid;
    Mat path;     // base path rows (includes the time channel), n x c
    Mat forcing;  // n x d
    double ridge = 0.0;  // weight on |alpha|^2 in the model loss
    LbfgsConfig lbfgs;

    bool nonlinear() const { return static_cast<bool>(term.value); }

    void validate() const
    {
        spec.validate();
        kernel.validate();
        require(static_cast<Index>(grid.size()) == path.rows(), "lift problem: grid/path length mismatch");
        require(forcing.rows() == path.rows() && forcing.cols() == spec.dim, "lift problem: forcing shape mismatch");
        require(!nonlinear() || method == Method::derivative_ansatz, "lift problem: nonlinear terms need the derivative ansatz");
        require(ridge >= 0.0, "lift problem: ridge must be non-negative");
    }
};

// Everything the tape needs from one forward pass.
struct LiftForward {
    std::vector<Mat> activations;
    Mat extension;
    Mat lifted;
    Features features;
    Mat k;
    std::shared_ptr<GramStack> gram;
};

inline LiftForward lift_forward(const LiftProblem& p, const Mlp& net)
{
    LiftForward f;
    f.extension = net.output_dim() > 0 ? net.forward_batch(p.path, &f.activations) : Mat(p.path.rows(), 0);
    f.lifted = lifted_path(p.path, f.extension);
    f.features = build_features(f.lifted, p.kernel);
    f.k = gram(f.features.normalized, p.kernel);
    f.gram = std::make_shared<GramStack>(p.grid, f.k, p.spec.order);
    return f;
}

namespace detail {

inline Mat lift_rhs(const LiftProblem& p, const NodeCoefficients& c)
{
    double t0 = p.grid.front();
    return p.method == Method::derivative_ansatz ? reduced_forcing(p.spec, c, p.grid, p.forcing, t0)
                                                 : volterra_rhs(p.spec, p.grid, p.forcing, t0);
}

// Residual and dL/d(K^(k) alpha) for each level k.
inline Mat lift_residual(const LiftProblem& p, const GramStack& g, const Mat& alpha, std::vector<Mat>* level_grads)
{
    int m = p.spec.order;
    Index n = g.size(), d = p.spec.dim;
    NodeCoefficients c(p.spec, p.grid);
    Mat r = apply_block_kernel(c, g, alpha) - lift_rhs(p, c);
    std::vector<Mat> u;
    std::vector<Vec> at(static_cast<std::size_t>(m));
    if (p.nonlinear()) {
        for (int k = 0; k < m; ++k) u.push_back(g.level(m - k) * alpha + taylor_rows(p.spec, m - k, p.grid, p.grid.front()));
        for (Index j = 0; j < n; ++j) {
            for (int k = 0; k < m; ++k) at[static_cast<std::size_t>(k)] = u[static_cast<std::size_t>(k)].row(j).transpose();
            r.row(j) += p.term.value(p.grid[static_cast<std::size_t>(j)], at).transpose();
        }
    }
    if (!level_grads) return r;
    Mat gr = (2.0 / static_cast<double>(n)) * r;
    level_grads->assign(static_cast<std::size_t>(m + 1), Mat::Zero(n, d));
    for (Index j = 0; j < n; ++j) {
        Vec gj = gr.row(j).transpose();
        if (p.nonlinear())
            for (int k = 0; k < m; ++k) at[static_cast<std::size_t>(k)] = u[static_cast<std::size_t>(k)].row(j).transpose();
        for (int rr = 0; rr <= m; ++rr) {
            Vec w = c(rr, j).transpose() * gj;
            if (p.nonlinear() && rr < m) {
                double t = p.grid[static_cast<std::size_t>(j)];
                Mat jac = p.term.jacobian ? p.term.jacobian(t, at, rr) : finite_difference_jacobian(p.term, t, at, rr);
                w += jac.transpose() * gj;
            }
            (*level_grads)[static_cast<std::size_t>(m - rr)].row(j) += w.transpose();
        }
    }
    return r;
}

}  // namespace detail

// |R|^2 / n + ridge |alpha|^2 on the gram stack of a lifted path.
inline double model_loss(const LiftProblem& p, const GramStack& g, const Mat& alpha)
{
    Mat r = detail::lift_residual(p, g, alpha, nullptr);
    return r.squaredNorm() / static_cast<double>(g.size()) + p.ridge * alpha.squaredNorm();
}

inline double model_loss(const LiftProblem& p, const Mlp& net, const Mat& alpha)
{
    return model_loss(p, *lift_forward(p, net).gram, alpha);
}

// Minimizer of the model loss over alpha for fixed lift parameters.
inline Mat solve_alpha(const LiftProblem& p, const std::shared_ptr<GramStack>& g, const Mat* warm = nullptr)
{
    if (p.nonlinear()) {
        NonlinearProblem prob({p.spec, p.term}, g, p.forcing, p.ridge);
        Vec start = warm ? from_blocks(*warm) : prob.linear_warm_start();
        if (warm) {
            // warm start unless the linear-only solution is already better
            Vec cold = prob.linear_warm_start(), gtmp;
            if (prob.loss_and_grad(cold, gtmp) < prob.loss_and_grad(start, gtmp)) start = cold;
        }
        return to_blocks(lbfgs_minimize(prob, start, p.lbfgs).x, p.spec.dim);
    }
    SolveOptions opt;
    opt.ridge = p.ridge * static_cast<double>(g->size());
    return fit_linear(p.method, p.spec, g, p.forcing, opt).alpha;
}

enum class GradientStrategy { finite_difference, tape };

struct LiftTrainConfig {
    double lambda_shuffle = 0.1;
    double lambda_model = 1.0;
    int iterations = 50;
    double step_size = 1e-2;
    int backtracks = 12;
    GradientStrategy gradient = GradientStrategy::finite_difference;
    std::vector<Index> hidden{32, 32, 16};
    Index extension_dim = 4;
    std::uint64_t seed = 0;
    double fd_step = 1e-6;

    void validate() const
    {
        require(lambda_shuffle >= 0.0 && lambda_model >= 0.0, "LiftTrainConfig: lambda weights must be non-negative");
        require(lambda_shuffle + lambda_model > 0.0, "LiftTrainConfig: lambda_shuffle + lambda_model must be positive");
        require(iterations >= 0 && step_size > 0.0, "LiftTrainConfig: bad iteration count or step size");
    }
};

inline double total_loss(const LiftProblem& p, const LiftTrainConfig& cfg, const Mlp& net, const Mat& alpha,
                         const LiftForward* fwd = nullptr)
{
    double loss = 0.0;
    std::unique_ptr<LiftForward> own;
    if (!fwd && cfg.lambda_model > 0.0) {
        own = std::make_unique<LiftForward>(lift_forward(p, net));
        fwd = own.get();
    }
    if (cfg.lambda_model > 0.0) loss += cfg.lambda_model * model_loss(p, *fwd->gram, alpha);
    if (cfg.lambda_shuffle > 0.0 && net.output_dim() > 0) {
        Mat ext = fwd ? fwd->extension : net.forward_batch(p.path);
        loss += cfg.lambda_shuffle * shuffle_loss(ext);
    }
    return loss;
}

// Reverse accumulation: residual -> integrated levels -> Gram -> scaling -> prefix signatures -> MLP.
inline Vec tape_gradient(const LiftProblem& p, const LiftTrainConfig& cfg, const Mlp& net, const Mat& alpha,
                         const LiftForward& fwd)
{
    Index n = p.path.rows(), m_ext = net.output_dim();
    Mat ext_grad = Mat::Zero(n, m_ext);
    if (cfg.lambda_model > 0.0 && m_ext > 0) {
        std::vector<Mat> w;
        detail::lift_residual(p, *fwd.gram, alpha, &w);
        Mat acc = w.back();
        for (int k = static_cast<int>(w.size()) - 2; k >= 0; --k)
            acc = cumtrapz_cols_adjoint(p.grid, acc) + w[static_cast<std::size_t>(k)];
        Mat k_grad = acc * alpha.transpose();
        Mat s_grad = gram_vjp(fwd.features.normalized, fwd.k, k_grad, p.kernel);
        Mat raw_grad = p.kernel.normalization == Normalization::robust
                           ? robust_normalize_vjp(fwd.features.raw.rows, fwd.features.normalized, s_grad)
                           : s_grad;
        Mat v_grad = stream_prefix_signatures_vjp(fwd.lifted, fwd.features.raw, raw_grad);
        ext_grad += cfg.lambda_model * v_grad.rightCols(m_ext);
    }
    if (cfg.lambda_shuffle > 0.0 && m_ext > 0) {
        Mat sg;
        shuffle_loss(fwd.extension, &sg);
        ext_grad += cfg.lambda_shuffle * sg;
    }
    if (m_ext == 0) return Vec::Zero(net.parameter_count());
    return net.backward_batch(fwd.activations, ext_grad);
}

// Central differences of a scalar function of the flat parameters.
inline Vec central_difference(const std::function<double(const Vec&)>& fn, const Vec& x, double h)
{
    Vec g(x.size()), xp = x;
    for (Index i = 0; i < x.size(); ++i) {
        double step = h * std::max(1.0, std::abs(x(i)));
        xp(i) = x(i) + step;
        double up = fn(xp);
        xp(i) = x(i) - step;
        double dn = fn(xp);
        xp(i) = x(i);
        g(i) = (up - dn) / (2.0 * step);
    }
    return g;
}

inline Vec lift_gradient(const LiftProblem& p, const LiftTrainConfig& cfg, const Mlp& net, const Mat& alpha,
                         const LiftForward* fwd = nullptr)
{
    if (cfg.gradient == GradientStrategy::tape) {
        if (fwd) return tape_gradient(p, cfg, net, alpha, *fwd);
        return tape_gradient(p, cfg, net, alpha, lift_forward(p, net));
    }
    auto fn = [&](const Vec& theta) { return total_loss(p, cfg, net.with_parameters(theta), alpha); };
    return central_difference(fn, net.flatten(), cfg.fd_step);
}

struct GradCheck {
    double max_relative_error = 0.0;  // best of the two step sizes
    std::vector<double> per_step;
    Vec gradient;
};

// Compare a gradient against central differences at steps h and h/10.
inline GradCheck grad_check(const std::function<double(const Vec&)>& fn, const Vec& x, const Vec& gradient,
                            double h = 1e-5)
{
    require(x.size() <= 2000, "grad_check: parameter count exceeds 2000");
    require(gradient.size() == x.size(), "grad_check: gradient length mismatch");
    GradCheck out;
    out.gradient = gradient;
    out.max_relative_error = std::numeric_limits<double>::infinity();
    for (double step : {h, h / 10.0}) {
        Vec fd = central_difference(fn, x, step);
        double scale = std::max({fd.cwiseAbs().maxCoeff(), gradient.cwiseAbs().maxCoeff(), 1e-300});
        double err = (gradient - fd).cwiseAbs().maxCoeff() / scale;
        if (fd.cwiseAbs().maxCoeff() < 1e-8 && gradient.cwiseAbs().maxCoeff() < 1e-8) err = 0.0;
        out.per_step.push_back(err);
        out.max_relative_error = std::min(out.max_relative_error, err);
    }
    return out;
}

inline GradCheck grad_check(const LiftProblem& p, const LiftTrainConfig& cfg, const Mlp& net, const Mat& alpha)
{
    auto fn = [&](const Vec& theta) { return total_loss(p, cfg, net.with_parameters(theta), alpha); };
    return grad_check(fn, net.flatten(), lift_gradient(p, cfg, net, alpha));
}

struct LiftResult {
    Mlp net;
    Mat alpha;
    std::vector<double> history;  // L_total after each alpha solve at accepted parameters
    bool degraded = false;
    std::string message;
};

// Alternating scheme: solve alpha at fixed lift, then one backtracked Adam step on the lift.
inline LiftResult train_lift(const LiftProblem& p, const LiftTrainConfig& cfg, Mlp net)
{
    p.validate();
    cfg.validate();
    net.validate();
    require(net.input_dim() == p.path.cols(), "train_lift: MLP input width must equal the path channel count");
    LiftResult res;
    Vec theta = net.flatten();
    Vec m1 = Vec::Zero(theta.size()), m2 = Vec::Zero(theta.size());
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    LiftForward fwd = lift_forward(p, net);
    Mat alpha;
    try {
        alpha = cfg.lambda_model > 0.0 ? solve_alpha(p, fwd.gram) : Mat::Zero(p.path.rows(), p.spec.dim);
    } catch (const Error& e) {
        throw Error(std::string("train_lift: initial alpha solve failed: ") + e.what());
    }
    double loss = total_loss(p, cfg, net, alpha, &fwd);
    res.history.push_back(loss);
    res.net = net;
    res.alpha = alpha;
    double lr = cfg.step_size;
    for (int it = 0; it < cfg.iterations; ++it) {
        Vec g;
        try {
            g = lift_gradient(p, cfg, net, alpha, &fwd);
        } catch (const Error& e) {
            res.degraded = true;
            res.message = std::string("gradient failed: ") + e.what();
            break;
        }
        if (!g.allFinite()) {
            res.degraded = true;
            res.message = "non-finite gradient";
            break;
        }
        m1 = b1 * m1 + (1.0 - b1) * g;
        m2 = b2 * m2 + (1.0 - b2) * g.cwiseAbs2();
        double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
        Vec dir = (m1 / c1).array() / ((m2 / c2).array().sqrt() + eps);
        bool accepted = false;
        double step = lr;
        Mlp trial = net;
        LiftForward trial_fwd;
        double trial_loss = loss;
        for (int b = 0; b <= cfg.backtracks; ++b, step /= 2.0) {
            trial.unflatten(theta - step * dir);
            try {
                trial_fwd = lift_forward(p, trial);
                trial_loss = total_loss(p, cfg, trial, alpha, &trial_fwd);
            } catch (const Error&) {
                continue;
            }
            if (std::isfinite(trial_loss) && trial_loss <= loss) {
                accepted = true;
                break;
            }
        }
        if (!accepted) continue;
        theta -= step * dir;
        net = trial;
        fwd = std::move(trial_fwd);
        loss = trial_loss;
        if (cfg.lambda_model > 0.0) {
            try {
                Mat next = solve_alpha(p, fwd.gram, &alpha);
                double next_loss = total_loss(p, cfg, net, next, &fwd);
                if (next_loss <= loss) {
                    alpha = next;
                    loss = next_loss;
                }
            } catch (const Error& e) {
                res.degraded = true;
                res.message = std::string("alpha solve failed: ") + e.what();
                res.history.push_back(loss);
                break;
            }
        }
        res.history.push_back(loss);
        res.net = net;
        res.alpha = alpha;
    }
    res.net = net;
    res.alpha = alpha;
    return res;
}

inline LiftResult train_lift(const LiftProblem& p, const LiftTrainConfig& cfg)
{
    Mlp net = Mlp::glorot(p.path.cols(), cfg.hidden, cfg.extension_dim, cfg.seed);
    return train_lift(p, cfg, std::move(net));
}

// Text checkpoint: "bsk-mlp v1", layer count, then per layer "rows cols", weights row-major, biases.
inline void save_mlp(const Mlp& net, const std::string& file)
{
    std::ofstream out(file);
    if (!out) throw Error("save_mlp: cannot open " + file + " for writing");
    out.precision(17);
    out << "bsk-mlp v1\n" << net.layers() << "\n";
    for (std::size_t l = 0; l < net.layers(); ++l) {
        const Mat& w = net.weights[l];
        out << w.rows() << " " << w.cols() << "\n";
        for (Index r = 0; r < w.rows(); ++r) {
            for (Index c = 0; c < w.cols(); ++c) out << (c ? " " : "") << w(r, c);
            out << "\n";
        }
        for (Index r = 0; r < net.biases[l].size(); ++r) out << (r ? " " : "") << net.biases[l](r);
        out << "\n";
    }
    if (!out) throw Error("save_mlp: write failed for " + file);
}

inline Mlp load_mlp(const std::string& file)
{
    std::ifstream in(file);
    if (!in) throw Error("load_mlp: cannot open " + file);
    std::string magic;
    std::getline(in, magic);
    if (magic != "bsk-mlp v1") throw InvalidInput("load_mlp: " + file + " is not a bsk-mlp v1 checkpoint");
    std::size_t layers = 0;
    in >> layers;
    Mlp net;
    for (std::size_t l = 0; l < layers; ++l) {
        Index rows = 0, cols = 0;
        in >> rows >> cols;
        if (!in || rows < 0 || cols < 1) throw InvalidInput("load_mlp: bad shape for layer " + std::to_string(l));
        Mat w(rows, cols);
        for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) in >> w(r, c);
        Vec b(rows);
        for (Index r = 0; r < rows; ++r) in >> b(r);
        if (!in) throw InvalidInput("load_mlp: truncated data in layer " + std::to_string(l));
        net.weights.push_back(w);
        net.biases.push_back(b);
    }
    net.validate();
    return net;
}

}  // namespace bsk
