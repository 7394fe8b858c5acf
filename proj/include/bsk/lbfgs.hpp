#pragma once

#include "core.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <vector>

namespace bsk {

struct LbfgsConfig {
    int history = 10;
    int max_iterations = 500;
    double gradient_tolerance = 1e-8;  // on |g|_inf, relative to 1 + |loss|
    double c1 = 1e-4;
    double c2 = 0.9;
    int max_line_search = 40;
    double ridge = 0.0;

    void validate() const
    {
        require(0.0 < c1 && c1 < c2 && c2 < 1.0, "LbfgsConfig: need 0 < c1 < c2 < 1");
        require(history >= 1, "LbfgsConfig: history must be >= 1");
        require(max_iterations >= 0, "LbfgsConfig: max_iterations must be >= 0");
    }
};

struct LbfgsResult {
    Vec x;
    double loss = 0.0;
    int iterations = 0;
    bool converged = false;
    bool degraded = false;  // line search failed before convergence
    std::vector<double> history;
};

// Returns loss and writes the gradient.
using Objective = std::function<double(const Vec&, Vec&)>;

namespace detail {

struct LinePoint {
    double step, value, slope;
};

// Minimizer of the cubic through two points with slopes, clamped into [lo, hi].
inline double cubic_step(const LinePoint& a, const LinePoint& b, double lo, double hi)
{
    double d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.step - b.step);
    double disc = d1 * d1 - a.slope * b.slope;
    double t;
    if (disc >= 0.0) {
        double d2 = std::copysign(std::sqrt(disc), b.step - a.step);
        t = b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    } else {
        t = 0.5 * (a.step + b.step);
    }
    if (!std::isfinite(t)) t = 0.5 * (lo + hi);
    return std::clamp(t, lo, hi);
}

}  // namespace detail

// Two-loop-recursion L-BFGS with a strong Wolfe line search.
inline LbfgsResult lbfgs_minimize(const Objective& fn, Vec x0, const LbfgsConfig& cfg = {})
{
    cfg.validate();
    LbfgsResult res;
    Vec x = std::move(x0), g(x.size());
    double f = fn(x, g);
    if (!std::isfinite(f)) throw NumericError("lbfgs: loss is not finite at the initial point");
    res.history.push_back(f);
    std::deque<Vec> s_hist, y_hist;
    std::deque<double> rho_hist;
    auto converged = [&](double fv, const Vec& gv) {
        return gv.size() == 0 || gv.cwiseAbs().maxCoeff() <= cfg.gradient_tolerance * (1.0 + std::abs(fv));
    };
    Vec xn(x.size()), gn(x.size());
    for (int it = 0; it < cfg.max_iterations; ++it) {
        if (converged(f, g)) {
            res.converged = true;
            break;
        }
        // two-loop recursion
        Vec q = g;
        std::vector<double> a(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            a[static_cast<std::size_t>(i)] = rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
            q -= a[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        else gamma = 1.0 / std::max(1.0, g.cwiseAbs().maxCoeff());
        Vec dir = gamma * q;
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            double b = rho_hist[i] * y_hist[i].dot(dir);
            dir += (a[i] - b) * s_hist[i];
        }
        dir = -dir;
        double slope0 = g.dot(dir);
        if (!(slope0 < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -g / std::max(1.0, g.cwiseAbs().maxCoeff());
            slope0 = g.dot(dir);
        }

        // strong Wolfe search along dir
        double last_f = f;
        auto eval = [&](double step) {
            xn = x + step * dir;
            double v = fn(xn, gn);
            last_f = v;
            return detail::LinePoint{step, std::isfinite(v) ? v : std::numeric_limits<double>::infinity(), gn.dot(dir)};
        };
        detail::LinePoint p0{0.0, f, slope0}, prev = p0;
        bool found = false;
        Vec best_x, best_g;
        double best_f = f;
        auto remember = [&](const detail::LinePoint& p) {
            if (p.value < best_f && p.value <= f + cfg.c1 * p.step * slope0) {
                best_f = p.value;
                best_x = xn;
                best_g = gn;
            }
        };
        auto zoom = [&](detail::LinePoint lo, detail::LinePoint hi, int budget) {
            for (int k = 0; k < budget; ++k) {
                double a0 = std::min(lo.step, hi.step), a1 = std::max(lo.step, hi.step);
                double w = a1 - a0;
                double t = detail::cubic_step(lo, hi, a0 + 0.1 * w, a1 - 0.1 * w);
                detail::LinePoint pt = eval(t);
                remember(pt);
                if (pt.value > f + cfg.c1 * t * slope0 || pt.value >= lo.value) {
                    hi = pt;
                } else {
                    if (std::abs(pt.slope) <= -cfg.c2 * slope0) return true;
                    if (pt.slope * (hi.step - lo.step) >= 0.0) hi = lo;
                    lo = pt;
                }
                if (std::abs(hi.step - lo.step) < 1e-16 * std::max(1.0, lo.step)) break;
            }
            return false;
        };
        double step = 1.0;
        for (int k = 0; k < cfg.max_line_search; ++k) {
            detail::LinePoint pt = eval(step);
            remember(pt);
            if (pt.value > f + cfg.c1 * step * slope0 || (k > 0 && pt.value >= prev.value)) {
                found = zoom(prev, pt, cfg.max_line_search);
                break;
            }
            if (std::abs(pt.slope) <= -cfg.c2 * slope0) {
                found = true;
                break;
            }
            if (pt.slope >= 0.0) {
                found = zoom(pt, prev, cfg.max_line_search);
                break;
            }
            prev = pt;
            step *= 2.0;
        }
        double fn_val = last_f;
        if (!found) {
            if (best_x.size() == 0) {
                res.degraded = true;
                break;
            }
            xn = best_x;
            gn = best_g;
            fn_val = best_f;
        }
        if (!(fn_val <= f)) {
            res.degraded = true;
            break;
        }
        Vec s = xn - x, y = gn - g;
        double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > cfg.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        x = xn;
        g = gn;
        f = fn_val;
        res.iterations = it + 1;
        res.history.push_back(f);
    }
    if (!res.converged && converged(f, g)) res.converged = true;
    res.x = x;
    res.loss = f;
    return res;
}

}  // namespace bsk
