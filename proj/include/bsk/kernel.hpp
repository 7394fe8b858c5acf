#pragma once

#include "core.hpp"
#include "path.hpp"
#include "signature.hpp"

#include <string>
#include <vector>

namespace bsk {

enum class KernelFlavor { linear, rbf };
enum class Normalization { none, robust };

struct KernelSpec {
    KernelFlavor flavor = KernelFlavor::rbf;
    double sigma = 1.0;
    int depth = 3;
    Normalization normalization = Normalization::robust;

    void validate() const
    {
        require(depth >= 1, "KernelSpec: depth must be >= 1");
        require(flavor != KernelFlavor::rbf || sigma > 0.0, "KernelSpec: sigma must be positive");
    }
};

inline double kernel_value(const Vec& a, const Vec& b, const KernelSpec& spec)
{
    if (spec.flavor == KernelFlavor::linear) return a.dot(b);
    return std::exp(-(a - b).squaredNorm() / (2.0 * spec.sigma * spec.sigma));
}

// K[j][i] = k(S_i, S_j)
inline Mat gram(const Mat& s, const KernelSpec& spec)
{
    require(s.rows() > 0, "gram: empty signature matrix");
    spec.validate();
    Mat k = s * s.transpose();
    if (spec.flavor == KernelFlavor::linear) return k;
    Vec sq = k.diagonal();
    double scale = -1.0 / (2.0 * spec.sigma * spec.sigma);
    for (Index j = 0; j < k.cols(); ++j)
        for (Index i = 0; i < k.rows(); ++i) {
            double d2 = std::max(0.0, sq(i) + sq(j) - 2.0 * k(i, j));
            k(i, j) = i == j ? 1.0 : std::exp(scale * d2);
        }
    return k;
}

// Kernel values between one feature row and every anchor row.
inline Vec kernel_column(const Mat& anchors, const Vec& query, const KernelSpec& spec)
{
    Vec out(anchors.rows());
    for (Index i = 0; i < anchors.rows(); ++i) out(i) = kernel_value(anchors.row(i).transpose(), query, spec);
    return out;
}

// dL/dS given dL/dK, for K = gram(S).
inline Mat gram_vjp(const Mat& s, const Mat& k, const Mat& k_grad, const KernelSpec& spec)
{
    Mat sym = k_grad + k_grad.transpose();
    if (spec.flavor == KernelFlavor::linear) return sym * s;
    Mat h = sym.cwiseProduct(k);
    Vec rowsum = h.rowwise().sum();
    double inv = 1.0 / (spec.sigma * spec.sigma);
    return -inv * (rowsum.asDiagonal() * s - h * s);
}

inline Vec cumtrapz(const std::vector<double>& grid, const Vec& values)
{
    require(static_cast<Index>(grid.size()) == values.size(), "cumtrapz: length mismatch");
    Vec out(values.size());
    if (values.size() == 0) return out;
    out(0) = 0.0;
    for (Index j = 1; j < values.size(); ++j) {
        double h = grid[static_cast<std::size_t>(j)] - grid[static_cast<std::size_t>(j - 1)];
        out(j) = out(j - 1) + (values(j) + values(j - 1)) * h / 2.0;
    }
    return out;
}

// cumtrapz down every column.
inline Mat cumtrapz_cols(const std::vector<double>& grid, const Mat& values)
{
    require(static_cast<Index>(grid.size()) == values.rows(), "cumtrapz: length mismatch");
    Mat out(values.rows(), values.cols());
    if (values.rows() == 0) return out;
    out.row(0).setZero();
    for (Index j = 1; j < values.rows(); ++j) {
        double h = grid[static_cast<std::size_t>(j)] - grid[static_cast<std::size_t>(j - 1)];
        out.row(j) = out.row(j - 1) + (values.row(j) + values.row(j - 1)) * (h / 2.0);
    }
    return out;
}

// Adjoint of cumtrapz_cols.
inline Mat cumtrapz_cols_adjoint(const std::vector<double>& grid, const Mat& out_grad)
{
    Index n = out_grad.rows();
    Mat g = Mat::Zero(n, out_grad.cols());
    if (n < 2) return g;
    Eigen::RowVectorXd suffix = Eigen::RowVectorXd::Zero(out_grad.cols());
    for (Index j = n - 1; j >= 1; --j) {
        suffix += out_grad.row(j);
        double h = grid[static_cast<std::size_t>(j)] - grid[static_cast<std::size_t>(j - 1)];
        g.row(j) += suffix * (h / 2.0);
        g.row(j - 1) += suffix * (h / 2.0);
    }
    return g;
}

// K and its iterated cumulative-trapezoid integrals along the row (collocation) index.
// Storage keeps spare capacity so nodes can be appended during streaming.
class GramStack {
public:
    GramStack() = default;

    GramStack(std::vector<double> grid, const Mat& k, int m) : grid_(std::move(grid)), n_(k.rows())
    {
        require(k.rows() == k.cols(), "integrated_gram_stack: K must be square");
        require(static_cast<Index>(grid_.size()) == k.rows(), "integrated_gram_stack: grid/K size mismatch");
        require(m >= 0, "integrated_gram_stack: order must be >= 0");
        check_grid(grid_, "integrated_gram_stack");
        levels_.push_back(k);
        for (int j = 1; j <= m; ++j) levels_.push_back(cumtrapz_cols(grid_, levels_.back()));
    }

    Index size() const { return n_; }
    int order() const { return static_cast<int>(levels_.size()) - 1; }
    const std::vector<double>& grid() const { return grid_; }

    Eigen::Block<const Mat> level(int k) const
    {
        require(k >= 0 && k <= order(), "GramStack: level " + std::to_string(k) + " not available");
        return levels_[static_cast<std::size_t>(k)].topLeftCorner(n_, n_);
    }

    void reserve(Index capacity)
    {
        if (capacity <= levels_.front().rows()) return;
        for (auto& l : levels_) {
            Mat grown = Mat::Zero(capacity, capacity);
            grown.topLeftCorner(n_, n_) = l.topLeftCorner(n_, n_);
            l.swap(grown);
        }
    }

    // Add node t with kcol(i) = k(f_i, f_new) for i = 0..n (last entry is the diagonal).
    void append(double t, const Vec& kcol)
    {
        require(kcol.size() == n_ + 1, "GramStack::append: column length mismatch");
        require(n_ == 0 || t > grid_.back(), "GramStack::append: time " + std::to_string(t) +
                                                 " does not advance the grid");
        if (levels_.front().rows() < n_ + 1) reserve(std::max<Index>(2 * n_, n_ + 16));
        Index n = n_;
        grid_.push_back(t);
        Mat& k0 = levels_[0];
        k0.row(n).head(n + 1) = kcol.transpose();
        k0.col(n).head(n + 1) = kcol;
        double h = n > 0 ? grid_[static_cast<std::size_t>(n)] - grid_[static_cast<std::size_t>(n - 1)] : 0.0;
        for (std::size_t k = 1; k < levels_.size(); ++k) {
            Mat& prev = levels_[k - 1];
            Mat& cur = levels_[k];
            // new row, old columns
            if (n > 0)
                cur.row(n).head(n) = cur.row(n - 1).head(n) + (prev.row(n - 1).head(n) + prev.row(n).head(n)) * (h / 2.0);
            else
                cur(0, 0) = 0.0;
            // new column
            cur(0, n) = 0.0;
            for (Index j = 1; j <= n; ++j) {
                double hj = grid_[static_cast<std::size_t>(j)] - grid_[static_cast<std::size_t>(j - 1)];
                cur(j, n) = cur(j - 1, n) + (prev(j, n) + prev(j - 1, n)) * hj / 2.0;
            }
        }
        n_ = n + 1;
    }

private:
    std::vector<double> grid_;
    std::vector<Mat> levels_;
    Index n_ = 0;
};

inline GramStack integrated_gram_stack(const Mat& k, const std::vector<double>& grid, int m)
{
    return GramStack(grid, k, m);
}

// Per-level kernel vectors at the prefix-floor node of time t.
inline std::vector<Vec> query_rows(const GramStack& stack, double t)
{
    Index j = floor_node(stack.grid(), t);
    std::vector<Vec> out;
    for (int k = 0; k <= stack.order(); ++k) out.push_back(stack.level(k).row(j).transpose());
    return out;
}

// Prefix signatures, normalization, and normalized features of one path.
struct Features {
    SignatureMatrix raw;
    RobustScaler scaler;
    Mat normalized;
};

inline Features build_features(const Mat& path_values, const KernelSpec& spec)
{
    spec.validate();
    Features f;
    f.raw = stream_prefix_signatures(path_values, spec.depth);
    f.scaler = spec.normalization == Normalization::robust ? RobustScaler::fit(f.raw.rows)
                                                           : RobustScaler::identity(f.raw.rows.cols());
    f.normalized = spec.normalization == Normalization::robust ? f.scaler.apply(f.raw.rows) : f.raw.rows;
    return f;
}

inline GramStack build_gram_stack(const Path& path, const KernelSpec& spec, int m, Features* keep = nullptr)
{
    Features f = build_features(path.values(), spec);
    GramStack stack(path.grid(), gram(f.normalized, spec), m);
    if (keep) *keep = std::move(f);
    return stack;
}

}  // namespace bsk
