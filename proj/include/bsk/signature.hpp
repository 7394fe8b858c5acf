#pragma once

#include "core.hpp"
#include "path.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace bsk {

// Number of words of length <= depth over d letters, including the empty word.
inline Index sig_size(Index d, int depth)
{
    Index c = 0, p = 1;
    for (int k = 0; k <= depth; ++k) {
        c += p;
        p *= d;
    }
    return c;
}

// Start of the level-k block in the flattened vector.
inline Index level_offset(Index d, int k)
{
    return sig_size(d, k - 1);
}

inline Index ipow(Index d, int k)
{
    Index p = 1;
    for (int i = 0; i < k; ++i) p *= d;
    return p;
}

struct TruncatedSignature {
    Index dim = 1;
    int depth = 1;
    Vec coeffs;

    static TruncatedSignature identity(Index d, int depth)
    {
        TruncatedSignature s{d, depth, Vec::Zero(sig_size(d, depth))};
        s.coeffs(0) = 1.0;
        return s;
    }

    // Coefficient of a word given as letters 1..dim.
    double word(std::initializer_list<int> letters) const
    {
        int k = static_cast<int>(letters.size());
        Index idx = 0;
        for (int l : letters) {
            require(l >= 1 && l <= dim, "word: letter " + std::to_string(l) + " outside 1.." + std::to_string(dim));
            idx = idx * dim + (l - 1);
        }
        return coeffs(level_offset(dim, k) + idx);
    }
};

// Rows are flattened signatures of the prefixes f_0..f_N.
struct SignatureMatrix {
    Index dim = 1;
    int depth = 1;
    Mat rows;
};

namespace detail {

// Level blocks of exp(inc) written into out (size sig_size).
inline void segment_exp(const double* inc, Index d, int depth, double* out)
{
    out[0] = 1.0;
    Index prev = 0, prev_len = 1;
    for (int k = 1; k <= depth; ++k) {
        Index off = level_offset(d, k);
        double inv = 1.0 / k;
        for (Index w = 0; w < prev_len; ++w)
            for (Index c = 0; c < d; ++c) out[off + w * d + c] = out[prev + w] * inc[c] * inv;
        prev = off;
        prev_len *= d;
    }
}

// Truncated tensor product out = a (x) b; out must not alias a or b.
inline void tensor_product(const double* a, const double* b, Index d, int depth, double* out)
{
    for (int n = 0; n <= depth; ++n) {
        Index on = level_offset(d, n);
        Index len_n = ipow(d, n);
        std::fill(out + on, out + on + len_n, 0.0);
        for (int k = 0; k <= n; ++k) {
            const double* ak = a + level_offset(d, k);
            const double* bl = b + level_offset(d, n - k);
            Index len_k = ipow(d, k), len_l = ipow(d, n - k);
            for (Index u = 0; u < len_k; ++u) {
                double au = ak[u];
                if (au == 0.0) continue;
                double* o = out + on + u * len_l;
                for (Index v = 0; v < len_l; ++v) o[v] += au * bl[v];
            }
        }
    }
}

}  // namespace detail

inline TruncatedSignature segment_signature(const Vec& increment, int depth)
{
    require(depth >= 1, "segment_signature: depth must be >= 1");
    Index d = increment.size();
    require(d >= 1, "segment_signature: empty increment");
    TruncatedSignature s{d, depth, Vec(sig_size(d, depth))};
    detail::segment_exp(increment.data(), d, depth, s.coeffs.data());
    return s;
}

inline TruncatedSignature chen_concat(const TruncatedSignature& a, const TruncatedSignature& b)
{
    require(a.dim == b.dim && a.depth == b.depth, "chen_concat: mismatched depth or dimension");
    require(a.coeffs.size() == sig_size(a.dim, a.depth) && b.coeffs.size() == a.coeffs.size(),
            "chen_concat: malformed coefficient vector");
    TruncatedSignature out{a.dim, a.depth, Vec(a.coeffs.size())};
    detail::tensor_product(a.coeffs.data(), b.coeffs.data(), a.dim, a.depth, out.coeffs.data());
    return out;
}

// Signature of a whole piecewise-linear path by folding segment exponentials.
inline TruncatedSignature path_signature(const Mat& values, int depth)
{
    Index d = values.cols();
    TruncatedSignature s = TruncatedSignature::identity(d, depth);
    for (Index j = 1; j < values.rows(); ++j) {
        Vec inc = (values.row(j) - values.row(j - 1)).transpose();
        s = chen_concat(s, segment_signature(inc, depth));
    }
    return s;
}

// Row j = signature of prefix j, by Chen's identity: row_j = row_{j-1} (x) exp(x_j - x_{j-1}).
inline SignatureMatrix stream_prefix_signatures(const Mat& values, int depth)
{
    require(values.rows() >= 2, "stream_prefix_signatures: path needs at least 2 samples");
    require(depth >= 1, "stream_prefix_signatures: depth must be >= 1");
    Index d = values.cols(), c = sig_size(d, depth), n = values.rows();
    // Row-major scratch so each row is contiguous.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows(n, c);
    rows.row(0).setZero();
    rows(0, 0) = 1.0;
    Vec seg(c), inc(d);
    for (Index j = 1; j < n; ++j) {
        inc = (values.row(j) - values.row(j - 1)).transpose();
        detail::segment_exp(inc.data(), d, depth, seg.data());
        detail::tensor_product(rows.row(j - 1).data(), seg.data(), d, depth, rows.row(j).data());
    }
    return {d, depth, Mat(rows)};
}

inline SignatureMatrix stream_prefix_signatures(const Path& path, int depth)
{
    return stream_prefix_signatures(path.values(), depth);
}

// Independent per-prefix computation, O(N^2) segments in total.
inline SignatureMatrix naive_prefix_signatures(const Mat& values, int depth)
{
    require(values.rows() >= 2, "naive_prefix_signatures: path needs at least 2 samples");
    Index d = values.cols(), n = values.rows();
    SignatureMatrix out{d, depth, Mat(n, sig_size(d, depth))};
    out.rows.row(0) = TruncatedSignature::identity(d, depth).coeffs.transpose();
    for (Index j = 1; j < n; ++j)
        out.rows.row(j) = path_signature(values.topRows(j + 1), depth).coeffs.transpose();
    return out;
}

// Gradient of a scalar through stream_prefix_signatures: given dL/d(rows), return dL/d(values).
inline Mat stream_prefix_signatures_vjp(const Mat& values, const SignatureMatrix& sig, const Mat& row_grad)
{
    Index d = values.cols(), n = values.rows(), c = sig.rows.cols();
    int depth = sig.depth;
    Mat grad_values = Mat::Zero(n, d);
    Vec carry = row_grad.row(n - 1).transpose();
    Vec seg(c), seg_bar(c), prev_bar(c), inc(d), inc_bar(d);
    for (Index j = n - 1; j >= 1; --j) {
        inc = (values.row(j) - values.row(j - 1)).transpose();
        detail::segment_exp(inc.data(), d, depth, seg.data());
        Vec prev = sig.rows.row(j - 1).transpose();
        prev_bar.setZero();
        seg_bar.setZero();
        for (int nl = 0; nl <= depth; ++nl) {
            Index on = level_offset(d, nl);
            for (int k = 0; k <= nl; ++k) {
                Index ok = level_offset(d, k), ol = level_offset(d, nl - k);
                Index len_k = ipow(d, k), len_l = ipow(d, nl - k);
                for (Index u = 0; u < len_k; ++u) {
                    const double* yb = carry.data() + on + u * len_l;
                    double acc = 0.0, xu = prev(ok + u);
                    for (Index v = 0; v < len_l; ++v) {
                        acc += yb[v] * seg(ol + v);
                        seg_bar(ol + v) += yb[v] * xu;
                    }
                    prev_bar(ok + u) += acc;
                }
            }
        }
        // exp levels: E_k[w d + c] = E_{k-1}[w] inc[c] / k
        inc_bar.setZero();
        for (int k = depth; k >= 1; --k) {
            Index off = level_offset(d, k), poff = level_offset(d, k - 1), plen = ipow(d, k - 1);
            double inv = 1.0 / k;
            for (Index w = 0; w < plen; ++w)
                for (Index ch = 0; ch < d; ++ch) {
                    double g = seg_bar(off + w * d + ch) * inv;
                    seg_bar(poff + w) += g * inc(ch);
                    inc_bar(ch) += g * seg(poff + w);
                }
        }
        grad_values.row(j) += inc_bar.transpose();
        grad_values.row(j - 1) -= inc_bar.transpose();
        carry = prev_bar + row_grad.row(j - 1).transpose();
    }
    return grad_values;
}

// max over letter pairs of |S^i S^j - S^{ij} - S^{ji}|
inline double shuffle_residual(const TruncatedSignature& s)
{
    require(s.depth >= 2, "shuffle_residual: depth must be >= 2");
    Index d = s.dim, o1 = level_offset(d, 1), o2 = level_offset(d, 2);
    double worst = 0.0;
    for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < d; ++j) {
            double r = s.coeffs(o1 + i) * s.coeffs(o1 + j) - s.coeffs(o2 + i * d + j) -
                       s.coeffs(o2 + j * d + i);
            worst = std::max(worst, std::abs(r));
        }
    return worst;
}

// Type-7 quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& x, double p)
{
    double h = (static_cast<double>(x.size()) - 1.0) * p;
    auto lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

// Per-column median / inter-quartile-range scaling.
struct RobustScaler {
    static constexpr double iqr_floor = 1e-12;
    Vec center;
    Vec scale;  // 1 where the column is only centered

    static RobustScaler fit(const Mat& s)
    {
        require(s.rows() >= 2, "robust_normalize: needs at least 2 rows");
        RobustScaler r{Vec(s.cols()), Vec(s.cols())};
        std::vector<double> col(static_cast<std::size_t>(s.rows()));
        for (Index c = 0; c < s.cols(); ++c) {
            for (Index i = 0; i < s.rows(); ++i) col[static_cast<std::size_t>(i)] = s(i, c);
            std::sort(col.begin(), col.end());
            double iqr = quantile_sorted(col, 0.75) - quantile_sorted(col, 0.25);
            r.center(c) = quantile_sorted(col, 0.5);
            r.scale(c) = iqr < iqr_floor ? 1.0 : iqr;
        }
        return r;
    }

    static RobustScaler identity(Index cols) { return {Vec::Zero(cols), Vec::Ones(cols)}; }

    Mat apply(const Mat& s) const
    {
        Mat out = s.rowwise() - center.transpose();
        return out.array().rowwise() / scale.transpose().array();
    }

    Vec apply_row(const Vec& row) const { return (row - center).cwiseQuotient(scale); }
};

inline SignatureMatrix robust_normalize(const SignatureMatrix& s)
{
    return {s.dim, s.depth, RobustScaler::fit(s.rows).apply(s.rows)};
}

// Gradient through fit-then-apply robust scaling (median and IQR depend on the data).
inline Mat robust_normalize_vjp(const Mat& raw, const Mat& normalized, const Mat& out_grad)
{
    Index n = raw.rows();
    Mat g(n, raw.cols());
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index c = 0; c < raw.cols(); ++c) {
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return raw(a, c) < raw(b, c); });
        std::vector<double> sorted(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) sorted[static_cast<std::size_t>(i)] = raw(order[static_cast<std::size_t>(i)], c);
        double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
        bool divided = iqr >= RobustScaler::iqr_floor;
        double q = divided ? iqr : 1.0;
        double sum_g = out_grad.col(c).sum();
        double sum_gs = divided ? out_grad.col(c).dot(normalized.col(c)) : 0.0;
        g.col(c) = out_grad.col(c) / q;
        // d(quantile p)/d(raw): weights on the two bracketing order statistics
        auto spread = [&](double p, double coef) {
            double h = (static_cast<double>(n) - 1.0) * p;
            auto lo = static_cast<std::size_t>(std::floor(h));
            std::size_t hi = std::min(lo + 1, static_cast<std::size_t>(n) - 1);
            double frac = h - static_cast<double>(lo);
            g(order[lo], c) += coef * (1.0 - frac);
            g(order[hi], c) += coef * frac;
        };
        spread(0.5, -sum_g / q);
        if (divided) {
            spread(0.75, -sum_gs / q);
            spread(0.25, sum_gs / q);
        }
    }
    return g;
}

}  // namespace bsk
