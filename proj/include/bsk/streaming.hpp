#pragma once

#include "core.hpp"
#include "kernel.hpp"
#include "lbfgs.hpp"
#include "linear_solver.hpp"
#include "nonlinear_solver.hpp"
#include "signature.hpp"

#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace bsk {

struct StreamConfig {
    Method method = Method::derivative_ansatz;
    KernelSpec kernel;
    Index window = 50;  // n0: batch and retrain windows hold n0 + 1 nodes
    int cadence = 10;   // retrain every cadence-th streamed step
    SolveOptions solve;
    LbfgsConfig lbfgs;
    double newton_tolerance = 1e-12;  // relative to 1 + |f|
    int newton_max_iterations = 20;

    static constexpr int never = std::numeric_limits<int>::max();
};

// One observation: time, forcing value, and the signature-path row at that time.
struct StreamSample {
    double t = 0.0;
    Vec forcing;
    Vec path;
};

struct StepRecord {
    double t = 0.0;
    Vec alpha;
    Vec u;
    std::vector<Vec> derivatives;  // u^(p) for p < m (Method I) or u only (Method II)
    Vec forcing_hat;               // Method I: forcing; Method II: integrated forcing
    Vec forcing_target;            // what forcing_hat estimates (anchored at the current window start)
    bool retrained = false;
    bool newton_fallback = false;
    int newton_iterations = 0;
    double row_residual = 0.0;     // relative residual of the new collocation row
};

class StreamState {
public:
    // Batch fit on samples[0..n0].
    StreamState(const std::vector<StreamSample>& first, LinearODESpec spec, StreamConfig cfg,
                NonlinearTerm term = {})
        : spec_(std::move(spec)), term_(std::move(term)), cfg_(std::move(cfg))
    {
        spec_.validate();
        cfg_.kernel.validate();
        require(cfg_.cadence >= 1, "stream: cadence must be >= 1");
        require(cfg_.window >= spec_.order + 1,
                "stream: window n0 = " + std::to_string(cfg_.window) + " must be >= order + 1 = " +
                    std::to_string(spec_.order + 1));
        require(static_cast<Index>(first.size()) == cfg_.window + 1,
                "stream: initial batch needs exactly n0 + 1 = " + std::to_string(cfg_.window + 1) + " samples");
        require(!nonlinear() || cfg_.method == Method::derivative_ansatz,
                "stream: nonlinear terms require the derivative ansatz");
        samples_ = first;
        initial_ = spec_.initial;
        batch_fit();
    }

    // Copies own their Gram stack; appends to one state never reach another.
    StreamState(const StreamState& o) : StreamState(o, 0) {}
    StreamState& operator=(const StreamState& o)
    {
        if (this != &o) *this = StreamState(o);
        return *this;
    }
    StreamState(StreamState&&) noexcept = default;
    StreamState& operator=(StreamState&&) noexcept = default;

    bool nonlinear() const { return static_cast<bool>(term_.value); }
    Index size() const { return static_cast<Index>(samples_.size()); }
    Index consumed() const { return offset_ + size(); }
    int steps_since_retrain() const { return since_retrain_; }
    bool retrain_pending() const { return force_retrain_; }
    const StreamConfig& config() const { return cfg_; }
    const GramStack& gram() const { return *gram_; }
    const std::vector<Vec>& initial_data() const { return initial_; }
    double anchor_time() const { return samples_.front().t; }
    Mat alpha() const { return alpha_.topRows(size()); }

    // Fit over the current window (valid right after a batch solve).
    SolverFit fit() const
    {
        SolverFit f;
        f.method = cfg_.method;
        f.spec = window_spec();
        f.gram = std::make_shared<GramStack>(*gram_);
        f.forcing = forcing_matrix();
        f.alpha = alpha();
        f.ridge = cfg_.solve.ridge;
        return f;
    }

    // Frozen-coefficient closed-form step.
    StepRecord online_update_linear(const StreamSample& s) { return step(s, false); }

    // Newton step for the nonlinear term (falls back to the linear update on failure).
    StepRecord online_update_nonlinear(const StreamSample& s) { return step(s, true); }

    StepRecord online_update(const StreamSample& s) { return step(s, nonlinear()); }

    // Batch re-solve on the last n0 + 1 nodes, re-anchored at the first of them.
    void retrain()
    {
        Index n = size();
        require(n >= cfg_.window + 1, "retrain: window holds " + std::to_string(n) + " nodes, needs n0 + 1 = " +
                                          std::to_string(cfg_.window + 1));
        Index start = n - (cfg_.window + 1);
        if (start > 0) {
            initial_ = state_at(start);
            samples_.erase(samples_.begin(), samples_.begin() + start);
            offset_ += start;
        }
        batch_fit();
    }

    // u, u', ..., u^(m-1) at a window node from the current coefficients.
    std::vector<Vec> state_at(Index node) const
    {
        int m = spec_.order;
        Index n = size();
        Mat a = alpha();
        std::vector<Vec> out;
        double t = samples_[static_cast<std::size_t>(node)].t, t0 = anchor_time();
        if (cfg_.method == Method::derivative_ansatz) {
            for (int p = 0; p < m; ++p)
                out.push_back((gram_->level(m - p).row(node) * a).transpose() + taylor_poly(initial_, m, m - p, t, t0));
            return out;
        }
        // Volterra ansatz: derivatives from the differentiated integral relation.
        auto grid = times();
        Mat u = gram_->level(0) * a;
        std::vector<Mat> iu{u}, ifo{forcing_matrix()};
        for (int k = 1; k <= m; ++k) {
            iu.push_back(cumtrapz_cols(grid, iu.back()));
            ifo.push_back(cumtrapz_cols(grid, ifo.back()));
        }
        (void)n;
        LinearODESpec ws = window_spec();
        out.push_back(u.row(node).transpose());
        Eigen::FullPivLU<Mat> lead(ws.coefficient(m, t));
        for (int p = 1; p < m; ++p) {
            Vec rhs = ifo[static_cast<std::size_t>(m - p)].row(node).transpose() + q_poly(ws, t, t0, p);
            for (int r = 0; r <= m - p; ++r)
                rhs -= ws.coefficient(r, t) * iu[static_cast<std::size_t>(m - r - p)].row(node).transpose();
            for (int r = m - p + 1; r <= m - 1; ++r)
                rhs -= ws.coefficient(r, t) * out[static_cast<std::size_t>(r + p - m)];
            out.push_back(lead.solve(rhs));
        }
        return out;
    }

    // Nodal reconstructions on the current window: solution and forcing estimates.
    Mat solution_nodes() const
    {
        return reconstruct_derivative(fit(), 0);
    }

    Mat forcing_nodes() const
    {
        if (nonlinear()) {
            NonlinearProblem prob({window_spec(), term_}, gram_, forcing_matrix(), cfg_.lbfgs.ridge);
            return reconstruct_forcing(prob, alpha());
        }
        return reconstruct_forcing(fit());
    }

    // Residual norm of the collocation system on the current window at the current coefficients.
    double window_residual() const
    {
        if (nonlinear()) {
            NonlinearProblem prob({window_spec(), term_}, gram_, forcing_matrix(), cfg_.lbfgs.ridge);
            return prob.residual(alpha()).norm();
        }
        SolverFit f = fit();
        return (reconstruct_forcing(f) - forcing_target(f)).norm();
    }

    std::vector<double> times() const
    {
        std::vector<double> g;
        for (const auto& s : samples_) g.push_back(s.t);
        return g;
    }

private:
    LinearODESpec window_spec() const
    {
        LinearODESpec s = spec_;
        s.initial = initial_;
        return s;
    }

    Mat forcing_matrix() const
    {
        Mat f(size(), spec_.dim);
        for (Index j = 0; j < size(); ++j) f.row(j) = samples_[static_cast<std::size_t>(j)].forcing.transpose();
        return f;
    }

    Mat path_matrix() const
    {
        Mat p(size(), samples_.front().path.size());
        for (Index j = 0; j < size(); ++j) p.row(j) = samples_[static_cast<std::size_t>(j)].path.transpose();
        return p;
    }

    void batch_fit()
    {
        auto grid = times();
        Mat path = path_matrix();
        Features f = build_features(path, cfg_.kernel);
        scaler_ = f.scaler;
        raw_last_ = f.raw.rows.row(f.raw.rows.rows() - 1).transpose();
        Index cap = size() + (cfg_.cadence == StreamConfig::never ? 64 : cfg_.cadence) + 1;
        features_ = Mat(cap, f.normalized.cols());
        features_.topRows(size()) = f.normalized;
        auto stack = std::make_shared<GramStack>(grid, bsk::gram(f.normalized, cfg_.kernel), spec_.order);
        stack->reserve(cap);
        gram_ = stack;
        Mat forcing = forcing_matrix();
        LinearODESpec ws = window_spec();
        Vec a;
        if (nonlinear()) {
            NonlinearProblem prob({ws, term_}, gram_, forcing, cfg_.lbfgs.ridge);
            a = fit_nonlinear(prob, cfg_.lbfgs).optimizer.x;
        } else {
            CollocationSystem sys = assemble(cfg_.method, ws, *gram_, forcing, false);
            if (sys.scalar_kernel.size() == 0) sys.block_kernel = block_kernel_matrix(sys.coefficients, *gram_);
            a = solve_fit(sys, cfg_.solve).alpha;
        }
        alpha_ = Mat(cap, spec_.dim);
        alpha_.topRows(size()) = to_blocks(a, spec_.dim);
        since_retrain_ = 0;
        force_retrain_ = false;
    }

    void grow(Index rows)
    {
        if (features_.rows() >= rows) return;
        Index cap = std::max(rows, 2 * features_.rows());
        Mat f(cap, features_.cols());
        f.topRows(size()) = features_.topRows(size());
        features_.swap(f);
        Mat a(cap, alpha_.cols());
        a.topRows(size()) = alpha_.topRows(size());
        alpha_.swap(a);
        gram_->reserve(cap);
    }

    StepRecord step(const StreamSample& s, bool use_newton)
    {
        int m = spec_.order;
        Index d = spec_.dim, n = size();
        const StreamSample& last = samples_.back();
        if (!(s.t > last.t))
            throw ConditioningError("stream: degenerate step at t=" + std::to_string(s.t) +
                                    " (time does not advance past " + std::to_string(last.t) + ")");
        require(s.forcing.size() == d, "stream: forcing dimension mismatch");
        require(s.path.size() == last.path.size(), "stream: path dimension mismatch");
        grow(n + 1);

        // new prefix signature by Chen extension of the previous row
        int depth = cfg_.kernel.depth;
        Index pd = s.path.size();
        Vec inc = s.path - last.path, seg(sig_size(pd, depth)), raw(sig_size(pd, depth));
        detail::segment_exp(inc.data(), pd, depth, seg.data());
        detail::tensor_product(raw_last_.data(), seg.data(), pd, depth, raw.data());
        raw_last_ = raw;
        Vec feat = cfg_.kernel.normalization == Normalization::robust ? scaler_.apply_row(raw) : raw;
        features_.row(n) = feat.transpose();
        Vec kcol = kernel_column(features_.topRows(n + 1), feat, cfg_.kernel);
        gram_->append(s.t, kcol);
        samples_.push_back(s);

        double t = s.t, t0 = anchor_time();
        LinearODESpec ws = window_spec();
        std::vector<Mat> a_r;
        for (int r = 0; r <= m; ++r) a_r.push_back(ws.coefficient(r, t));
        // partial reconstructions from frozen coefficients, and diagonal kernel weights
        Mat past = alpha_.topRows(n);
        std::vector<Vec> prev(static_cast<std::size_t>(m + 1));
        std::vector<double> kappa(static_cast<std::size_t>(m + 1));
        for (int r = 0; r <= m; ++r) {
            auto lev = gram_->level(m - r);
            prev[static_cast<std::size_t>(r)] = (lev.row(n).head(n) * past).transpose();
            kappa[static_cast<std::size_t>(r)] = lev(n, n);
        }
        Mat phi = Mat::Zero(d, d);
        Vec c0 = Vec::Zero(d);
        for (int r = 0; r <= m; ++r) {
            phi += a_r[static_cast<std::size_t>(r)] * kappa[static_cast<std::size_t>(r)];
            c0 += a_r[static_cast<std::size_t>(r)] * prev[static_cast<std::size_t>(r)];
        }
        Vec rhs;
        if (cfg_.method == Method::derivative_ansatz) {
            rhs = s.forcing;
            for (int r = 0; r < m; ++r) rhs -= a_r[static_cast<std::size_t>(r)] * taylor_poly(initial_, m, m - r, t, t0);
        } else {
            Mat ifo = forcing_matrix();
            auto grid = times();
            for (int k = 0; k < m; ++k) ifo = cumtrapz_cols(grid, ifo);
            rhs = ifo.row(n).transpose() + q_poly(ws, t, t0);
        }
        Eigen::FullPivLU<Mat> lu(phi);
        if (lu.rank() < d || lu.rcond() < 1e-14)
            throw ConditioningError("stream: degenerate diagonal block at t=" + std::to_string(t));
        Vec a_lin = lu.solve(rhs - c0);

        StepRecord rec;
        rec.t = t;
        Vec a_new = a_lin;
        if (use_newton && nonlinear()) {
            // g(a) = phi a + c0 + N(u_prev + kappa a) - f~
            std::vector<Vec> base(static_cast<std::size_t>(m));
            for (int r = 0; r < m; ++r)
                base[static_cast<std::size_t>(r)] = prev[static_cast<std::size_t>(r)] + taylor_poly(initial_, m, m - r, t, t0);
            auto args = [&](const Vec& a) {
                std::vector<Vec> u(base);
                for (int r = 0; r < m; ++r) u[static_cast<std::size_t>(r)] += kappa[static_cast<std::size_t>(r)] * a;
                return u;
            };
            auto g = [&](const Vec& a) -> Vec { return phi * a + c0 + term_.value(t, args(a)) - rhs; };
            auto jac = [&](const Vec& a) -> Mat {
                auto u = args(a);
                Mat j = phi;
                for (int r = 0; r < m; ++r)
                    j += kappa[static_cast<std::size_t>(r)] *
                         (term_.jacobian ? term_.jacobian(t, u, r) : finite_difference_jacobian(term_, t, u, r));
                return j;
            };
            try {
                NewtonResult nr = newton_block(g, jac, a_lin, cfg_.newton_tolerance * (1.0 + s.forcing.norm()),
                                               cfg_.newton_max_iterations);
                a_new = nr.x;
                rec.newton_iterations = nr.iterations;
            } catch (const Error&) {
                rec.newton_fallback = true;
                force_retrain_ = true;
            }
        }
        alpha_.row(n) = a_new.transpose();
        rec.alpha = a_new;

        // residual of the new collocation row
        Vec row = phi * a_new + c0 - rhs;
        if (use_newton && nonlinear() && !rec.newton_fallback) {
            std::vector<Vec> u(static_cast<std::size_t>(m));
            for (int r = 0; r < m; ++r)
                u[static_cast<std::size_t>(r)] = prev[static_cast<std::size_t>(r)] + kappa[static_cast<std::size_t>(r)] * a_new +
                                                 taylor_poly(initial_, m, m - r, t, t0);
            row += term_.value(t, u);
        }
        rec.row_residual = row.norm() / (1.0 + rhs.norm());
        ++since_retrain_;
        fill_prediction(rec, n);
        return rec;
    }

    void fill_prediction(StepRecord& rec, Index node) const
    {
        int m = spec_.order;
        double t = samples_[static_cast<std::size_t>(node)].t, t0 = anchor_time();
        Mat a = alpha();
        rec.derivatives.clear();
        if (cfg_.method == Method::derivative_ansatz) {
            for (int p = 0; p < m; ++p)
                rec.derivatives.push_back((gram_->level(m - p).row(node) * a).transpose() + taylor_poly(initial_, m, m - p, t, t0));
        } else {
            rec.derivatives.push_back((gram_->level(0).row(node) * a).transpose());
        }
        rec.u = rec.derivatives.front();
        // implied forcing at the node
        LinearODESpec ws = window_spec();
        Vec fh = Vec::Zero(spec_.dim);
        for (int r = 0; r <= m; ++r) fh += ws.coefficient(r, t) * (gram_->level(m - r).row(node) * a).transpose();
        if (cfg_.method == Method::derivative_ansatz) {
            for (int r = 0; r < m; ++r) fh += ws.coefficient(r, t) * taylor_poly(initial_, m, m - r, t, t0);
            if (nonlinear()) fh += term_.value(t, rec.derivatives);
            rec.forcing_target = samples_[static_cast<std::size_t>(node)].forcing;
        } else {
            fh -= q_poly(ws, t, t0);
            Mat ifo = forcing_matrix().topRows(node + 1);
            auto grid = times();
            grid.resize(static_cast<std::size_t>(node + 1));
            for (int k = 0; k < m; ++k) ifo = cumtrapz_cols(grid, ifo);
            rec.forcing_target = ifo.row(node).transpose();
        }
        rec.forcing_hat = fh;
    }

public:
    // Prediction record for the newest node after a retrain.
    StepRecord latest_record() const
    {
        StepRecord rec;
        Index node = size() - 1;
        rec.t = samples_.back().t;
        rec.alpha = alpha_.row(node).transpose();
        fill_prediction(rec, node);
        return rec;
    }

private:
    StreamState(const StreamState& o, int)
        : spec_(o.spec_), term_(o.term_), cfg_(o.cfg_), samples_(o.samples_), initial_(o.initial_), offset_(o.offset_),
          scaler_(o.scaler_), raw_last_(o.raw_last_), features_(o.features_), alpha_(o.alpha_),
          gram_(o.gram_ ? std::make_shared<GramStack>(*o.gram_) : nullptr), since_retrain_(o.since_retrain_),
          force_retrain_(o.force_retrain_)
    {
    }

    LinearODESpec spec_;
    NonlinearTerm term_;
    StreamConfig cfg_;
    std::vector<StreamSample> samples_;
    std::vector<Vec> initial_;
    Index offset_ = 0;
    RobustScaler scaler_;
    Vec raw_last_;
    Mat features_;
    Mat alpha_;
    std::shared_ptr<GramStack> gram_;
    int since_retrain_ = 0;
    bool force_retrain_ = false;
};

struct StreamRun {
    std::vector<double> train_times;
    Mat train_solution;  // batch reconstruction on the initial window
    Mat train_forcing;   // implied forcing (integrated for Method II)
    Mat train_target;    // f or I^m f on the initial window
    std::vector<StepRecord> steps;
    int retrains = 0;
    int fallbacks = 0;
};

// Init on samples[0..n0], then frozen updates with a retrain every cadence-th step.
inline StreamRun run_stream(const std::vector<StreamSample>& samples, const LinearODESpec& spec, const StreamConfig& cfg,
                            const NonlinearTerm& term = {})
{
    require(cfg.cadence >= 1, "run_stream: cadence must be >= 1");
    require(static_cast<Index>(samples.size()) > cfg.window, "run_stream: fewer samples than the initial window");
    std::vector<StreamSample> first(samples.begin(), samples.begin() + cfg.window + 1);
    StreamState state(first, spec, cfg, term);
    StreamRun run;
    run.train_times = state.times();
    run.train_solution = state.solution_nodes();
    run.train_forcing = state.forcing_nodes();
    run.train_target = forcing_target(state.fit());
    for (std::size_t j = static_cast<std::size_t>(cfg.window) + 1; j < samples.size(); ++j) {
        bool due = cfg.cadence != StreamConfig::never &&
                   (static_cast<Index>(j) - cfg.window) % cfg.cadence == 0;
        bool forced = state.retrain_pending();
        StepRecord rec = state.online_update(samples[j]);
        if (due || forced) {
            state.retrain();
            StepRecord post = state.latest_record();
            post.retrained = true;
            post.row_residual = rec.row_residual;
            post.newton_fallback = rec.newton_fallback;
            post.newton_iterations = rec.newton_iterations;
            rec = post;
            ++run.retrains;
        }
        if (rec.newton_fallback) ++run.fallbacks;
        run.steps.push_back(std::move(rec));
    }
    return run;
}

}  // namespace bsk
