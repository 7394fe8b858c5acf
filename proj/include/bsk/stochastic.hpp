#pragma once

#include "core.hpp"
#include "linear_solver.hpp"
#include "nonlinear_solver.hpp"
#include "path.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace bsk {

using Rng = std::mt19937_64;

struct FbmConfig {
    Index samples = 1000;  // grid points including t = 0
    double hurst = 0.5;
    double horizon = 1.0;
    std::uint64_t seed = 0;

    void validate() const
    {
        require(samples >= 2, "FbmConfig: need at least 2 samples");
        require(hurst > 0.0 && hurst < 1.0, "FbmConfig: Hurst parameter must lie in (0, 1)");
        require(horizon > 0.0, "FbmConfig: horizon must be positive");
    }

    double step() const { return horizon / static_cast<double>(samples - 1); }
};

inline double fgn_autocovariance(Index k, double hurst)
{
    double h2 = 2.0 * hurst, kd = static_cast<double>(k);
    return 0.5 * (std::pow(std::abs(kd + 1.0), h2) + std::pow(std::abs(kd - 1.0), h2) - 2.0 * std::pow(std::abs(kd), h2));
}

// Circulant-embedding sampler; the embedding and FFT plan are built once per (samples, hurst).
class FbmSampler {
public:
    explicit FbmSampler(const FbmConfig& cfg) : cfg_(cfg)
    {
        cfg_.validate();
        incs_ = cfg_.samples - 1;
        len_ = 2 * incs_;
        buf_ = fftw_alloc_complex(static_cast<std::size_t>(len_));
        plan_ = fftw_plan_dft_1d(static_cast<int>(len_), buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
        for (Index k = 0; k < len_; ++k) {
            Index lag = k <= incs_ ? k : len_ - k;
            buf_[k][0] = fgn_autocovariance(lag, cfg_.hurst);
            buf_[k][1] = 0.0;
        }
        fftw_execute(plan_);
        eig_.resize(len_);
        for (Index k = 0; k < len_; ++k) {
            double v = buf_[k][0];
            if (v < -1e-10)
                throw NumericError("fbm_davies_harte: circulant embedding failed (eigenvalue " + std::to_string(v) +
                                   " at index " + std::to_string(k) + ")");
            eig_(k) = std::sqrt(std::max(v, 0.0) / static_cast<double>(len_));
        }
    }

    FbmSampler(const FbmSampler&) = delete;
    FbmSampler& operator=(const FbmSampler&) = delete;

    ~FbmSampler()
    {
        fftw_destroy_plan(plan_);
        fftw_free(buf_);
    }

    const FbmConfig& config() const { return cfg_; }

    // Unit-step fractional Gaussian noise, length samples - 1.
    Vec draw_fgn(Rng& rng)
    {
        std::normal_distribution<double> normal;
        Index m = incs_;
        if (m == 1) {
            Vec out(1);
            out(0) = normal(rng);
            return out;
        }
        buf_[0][0] = eig_(0) * normal(rng);
        buf_[0][1] = 0.0;
        buf_[m][0] = eig_(m) * normal(rng);
        buf_[m][1] = 0.0;
        for (Index k = 1; k < m; ++k) {
            double re = normal(rng), im = normal(rng);
            double s = eig_(k) / std::numbers::sqrt2;
            buf_[k][0] = s * re;
            buf_[k][1] = s * im;
            buf_[len_ - k][0] = s * re;
            buf_[len_ - k][1] = -s * im;
        }
        fftw_execute(plan_);
        Vec out(m);
        for (Index k = 0; k < m; ++k) out(k) = buf_[k][0];
        return out;
    }

    // B(t_0 = 0), ..., B(t_{n-1} = T).
    Vec draw(Rng& rng)
    {
        Vec g = draw_fgn(rng);
        double scale = std::pow(cfg_.step(), cfg_.hurst);
        Vec b(cfg_.samples);
        b(0) = 0.0;
        for (Index k = 0; k < g.size(); ++k) b(k + 1) = b(k) + scale * g(k);
        return b;
    }

    std::vector<double> grid() const
    {
        std::vector<double> t(static_cast<std::size_t>(cfg_.samples));
        for (Index k = 0; k < cfg_.samples; ++k) t[static_cast<std::size_t>(k)] = cfg_.step() * static_cast<double>(k);
        t.back() = cfg_.horizon;
        return t;
    }

private:
    FbmConfig cfg_;
    Index incs_ = 0, len_ = 0;
    fftw_complex* buf_ = nullptr;
    fftw_plan plan_ = nullptr;
    Vec eig_;
};

inline Path fbm_davies_harte(const FbmConfig& cfg)
{
    FbmSampler sampler(cfg);
    Rng rng(cfg.seed);
    return Path(sampler.grid(), sampler.draw(rng));
}

// Several independent fBM channels on a shared grid, columns in order.
inline Path fbm_channels(const FbmConfig& cfg, Index channels)
{
    FbmSampler sampler(cfg);
    Rng rng(cfg.seed);
    Mat v(cfg.samples, channels);
    for (Index c = 0; c < channels; ++c) v.col(c) = sampler.draw(rng);
    return Path(sampler.grid(), v);
}

// eta_k = (B(t_{k+1}) - B(t_k)) / dt_k, one row per increment.
inline Mat fgn(const Path& path)
{
    require(path.samples() >= 2, "fgn: need at least 2 samples");
    const auto& t = path.grid();
    const Mat& v = path.values();
    Mat out(path.samples() - 1, path.dim());
    for (Index k = 0; k + 1 < path.samples(); ++k)
        out.row(k) = (v.row(k + 1) - v.row(k)) / (t[static_cast<std::size_t>(k + 1)] - t[static_cast<std::size_t>(k)]);
    return out;
}

inline constexpr double gravity = 9.81;

// Left-point cumulative Arias intensity at every node (Kahan-summed).
inline Vec arias_intensity(const Vec& accel, const std::vector<double>& grid)
{
    require(static_cast<Index>(grid.size()) == accel.size(), "arias_intensity: grid/sample length mismatch");
    check_grid(grid, "arias_intensity");
    double c = std::numbers::pi / (2.0 * gravity);
    Vec out(accel.size());
    if (accel.size() == 0) return out;
    out(0) = 0.0;
    double sum = 0.0, comp = 0.0;
    for (Index k = 0; k + 1 < accel.size(); ++k) {
        double term = accel(k) * accel(k) * (grid[static_cast<std::size_t>(k + 1)] - grid[static_cast<std::size_t>(k)]);
        double y = term - comp, s = sum + y;
        comp = (s - sum) - y;
        sum = s;
        out(k + 1) = c * sum;
    }
    return out;
}

struct KuramotoSpec {
    Vec omega;
    double coupling = 0.0;
    Vec theta0;
    Mat noise;  // fBM values per node (rows) and oscillator (columns); empty for no noise

    Index oscillators() const { return omega.size(); }

    void validate(Index nodes) const
    {
        require(omega.size() > 0, "KuramotoSpec: no oscillators");
        require(theta0.size() == omega.size(), "KuramotoSpec: initial phase length must equal oscillator count");
        require(noise.size() == 0 || (noise.rows() == nodes && noise.cols() == omega.size()),
                "KuramotoSpec: noise must be nodes x oscillators");
    }
};

// Drift omega_i + (K/n) sum_j sin(theta_j - theta_i).
inline Vec kuramoto_drift(const Vec& omega, double coupling, const Vec& theta)
{
    Index n = theta.size();
    Vec out = omega;
    for (Index i = 0; i < n; ++i) {
        double s = 0.0;
        for (Index j = 0; j < n; ++j) s += std::sin(theta(j) - theta(i));
        out(i) += coupling / static_cast<double>(n) * s;
    }
    return out;
}

inline Mat euler_kuramoto(const KuramotoSpec& spec, const std::vector<double>& grid)
{
    Index nodes = static_cast<Index>(grid.size());
    spec.validate(nodes);
    check_grid(grid, "euler_kuramoto");
    Mat theta(nodes, spec.oscillators());
    theta.row(0) = spec.theta0.transpose();
    for (Index k = 0; k + 1 < nodes; ++k) {
        double dt = grid[static_cast<std::size_t>(k + 1)] - grid[static_cast<std::size_t>(k)];
        Vec cur = theta.row(k).transpose();
        Vec next = cur + kuramoto_drift(spec.omega, spec.coupling, cur) * dt;
        if (spec.noise.size()) next += (spec.noise.row(k + 1) - spec.noise.row(k)).transpose();
        theta.row(k + 1) = next.transpose();
    }
    return theta;
}

// Kuramoto in residual form theta' + N(theta) = eta with N = -drift.
inline NonlinearTerm kuramoto_term(const Vec& omega, double coupling)
{
    NonlinearTerm term;
    term.value = [omega, coupling](double, const std::vector<Vec>& u) -> Vec {
        return -kuramoto_drift(omega, coupling, u[0]);
    };
    term.jacobian = [coupling](double, const std::vector<Vec>& u, int r) -> Mat {
        Index n = u[0].size();
        Mat j = Mat::Zero(n, n);
        if (r != 0) return j;
        double c = coupling / static_cast<double>(n);
        for (Index i = 0; i < n; ++i)
            for (Index l = 0; l < n; ++l) {
                if (l == i) continue;
                double cs = std::cos(u[0](l) - u[0](i));
                j(i, l) -= c * cs;
                j(i, i) += c * cs;
            }
        return j;
    };
    return term;
}

enum class Integrator { euler, rk4, adaptive };

using OdeRhs = std::function<Vec(double, const Vec&)>;

// Piecewise-linear interpolant through nodal rows.
inline std::function<Vec(double)> linear_interpolant(const std::vector<double>& grid, const Mat& values)
{
    require(static_cast<Index>(grid.size()) == values.rows(), "linear_interpolant: length mismatch");
    return [grid, values](double t) -> Vec {
        if (grid.size() == 1 || t <= grid.front()) return values.row(0).transpose();
        if (t >= grid.back()) return values.row(values.rows() - 1).transpose();
        auto it = std::upper_bound(grid.begin(), grid.end(), t);
        Index k = static_cast<Index>(it - grid.begin()) - 1;
        double w = (t - grid[static_cast<std::size_t>(k)]) /
                   (grid[static_cast<std::size_t>(k + 1)] - grid[static_cast<std::size_t>(k)]);
        return ((1.0 - w) * values.row(k) + w * values.row(k + 1)).transpose();
    };
}

// First-order reduction y = (u, u', ..., u^(m-1)) of A_m u^(m) + ... + A_0 u + N(u) = f.
inline OdeRhs first_order_system(const LinearODESpec& spec, std::function<Vec(double)> forcing,
                                 const NonlinearTerm& term = {})
{
    spec.validate();
    return [spec, forcing = std::move(forcing), term](double t, const Vec& y) -> Vec {
        int m = spec.order;
        Index d = spec.dim;
        std::vector<Vec> u(static_cast<std::size_t>(m));
        for (int p = 0; p < m; ++p) u[static_cast<std::size_t>(p)] = y.segment(p * d, d);
        Vec rhs = forcing(t);
        for (int r = 0; r < m; ++r) rhs -= spec.coefficient(r, t) * u[static_cast<std::size_t>(r)];
        if (term.value) rhs -= term.value(t, u);
        Vec top = spec.coefficient(m, t).fullPivLu().solve(rhs);
        Vec dy(y.size());
        for (int p = 0; p + 1 < m; ++p) dy.segment(p * d, d) = u[static_cast<std::size_t>(p + 1)];
        dy.segment((m - 1) * d, d) = top;
        return dy;
    };
}

namespace detail {

inline Vec rk4_step(const OdeRhs& f, double t, const Vec& y, double h)
{
    Vec k1 = f(t, y);
    Vec k2 = f(t + h / 2.0, y + h / 2.0 * k1);
    Vec k3 = f(t + h / 2.0, y + h / 2.0 * k2);
    Vec k4 = f(t + h, y + h * k3);
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// rk4 with step doubling from a to b.
inline Vec adaptive_interval(const OdeRhs& f, double a, double b, Vec y, double tol)
{
    double t = a, h = b - a;
    double min_h = 1e-14 * std::max(1.0, std::abs(b));
    while (t < b) {
        h = std::min(h, b - t);
        Vec full = rk4_step(f, t, y, h);
        Vec half = rk4_step(f, t + h / 2.0, rk4_step(f, t, y, h / 2.0), h / 2.0);
        double err = (half - full).cwiseAbs().maxCoeff() / 15.0;
        double scale = tol * (1.0 + half.cwiseAbs().maxCoeff());
        if (!std::isfinite(err)) throw NumericError("reference_integrate: non-finite state at t=" + std::to_string(t));
        if (err <= scale) {
            y = half + (half - full) / 15.0;
            t = (b - t <= h) ? b : t + h;
            double grow = err > 0.0 ? 0.9 * std::pow(scale / err, 0.2) : 4.0;
            h *= std::min(4.0, std::max(1.0, grow));
        } else {
            h *= std::max(0.1, 0.9 * std::pow(scale / err, 0.2));
            if (h < min_h)
                throw NumericError("reference_integrate: step size underflow at t=" + std::to_string(t) +
                                   " (problem too stiff for the explicit reference)");
        }
    }
    return y;
}

}  // namespace detail

// Trajectory at the grid nodes, one state per row.
inline Mat reference_integrate(const OdeRhs& f, const Vec& y0, const std::vector<double>& grid, Integrator method,
                               int substeps = 1, double tol = 1e-10)
{
    check_grid(grid, "reference_integrate");
    require(substeps >= 1, "reference_integrate: substeps must be >= 1");
    Index n = static_cast<Index>(grid.size());
    Mat out(n, y0.size());
    Vec y = y0;
    out.row(0) = y.transpose();
    for (Index k = 0; k + 1 < n; ++k) {
        double a = grid[static_cast<std::size_t>(k)], b = grid[static_cast<std::size_t>(k + 1)];
        if (method == Integrator::adaptive) {
            y = detail::adaptive_interval(f, a, b, y, tol);
        } else {
            double h = (b - a) / substeps;
            for (int s = 0; s < substeps; ++s) {
                double t = a + h * s;
                y = method == Integrator::euler ? Vec(y + h * f(t, y)) : detail::rk4_step(f, t, y, h);
            }
        }
        if (!y.allFinite()) throw NumericError("reference_integrate: non-finite state at t=" + std::to_string(b));
        out.row(k + 1) = y.transpose();
    }
    return out;
}

// Initial state vector (g_0, ..., g_{m-1}) stacked.
inline Vec stacked_initial(const LinearODESpec& spec)
{
    Vec y(spec.order * spec.dim);
    for (int p = 0; p < spec.order; ++p) y.segment(p * spec.dim, spec.dim) = spec.initial[static_cast<std::size_t>(p)];
    return y;
}

}  // namespace bsk
