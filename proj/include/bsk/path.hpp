#pragma once

#include "core.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace bsk {

// Discretely observed path, piecewise linear between samples.
// values has one row per grid time and d columns.
class Path {
public:
    Path() = default;
    Path(std::vector<double> grid, Mat values) : grid_(std::move(grid)), values_(std::move(values))
    {
        require(!grid_.empty(), "Path: empty grid");
        require(values_.rows() == static_cast<Index>(grid_.size()),
                "Path: value rows (" + std::to_string(values_.rows()) + ") != grid length (" +
                    std::to_string(grid_.size()) + ")");
        require(values_.cols() >= 1, "Path: dimension must be >= 1");
        check_grid(grid_, "Path");
    }

    static Path scalar(std::vector<double> grid, const std::vector<double>& v)
    {
        Mat m(static_cast<Index>(v.size()), 1);
        for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
        return Path(std::move(grid), std::move(m));
    }

    const std::vector<double>& grid() const { return grid_; }
    const Mat& values() const { return values_; }
    Index samples() const { return values_.rows(); }
    Index dim() const { return values_.cols(); }
    double t0() const { return grid_.front(); }
    double t_end() const { return grid_.back(); }

    // Sub-path on samples [first, last].
    Path slice(Index first, Index last) const
    {
        require(first >= 0 && last < samples() && first <= last, "Path::slice: bad range");
        std::vector<double> g(grid_.begin() + first, grid_.begin() + last + 1);
        return Path(std::move(g), values_.middleRows(first, last - first + 1));
    }

private:
    std::vector<double> grid_;
    Mat values_;
};

// One count-sampled training path. Not a Path: f_0 repeats t_0.
struct Prefix {
    std::vector<double> times;
    Mat values;
};

// Nested prefixes f_0 ... f_N of a base path.
class PathFamily {
public:
    explicit PathFamily(Path base) : base_(std::move(base)) {}

    const Path& base() const { return base_; }
    Index size() const { return base_.samples(); }

    Prefix prefix(Index i) const
    {
        require(i >= 0 && i < size(), "PathFamily::prefix: index out of range");
        const auto& g = base_.grid();
        if (i == 0) {
            Mat v(2, base_.dim());
            v.row(0) = base_.values().row(0);
            v.row(1) = base_.values().row(0);
            return {{g[0], g[0]}, v};
        }
        return {std::vector<double>(g.begin(), g.begin() + i + 1), base_.values().topRows(i + 1)};
    }

private:
    Path base_;
};

inline PathFamily count_sample(const Path& path)
{
    require(path.samples() >= 2, "count_sample: path needs at least 2 samples");
    return PathFamily(path);
}

// (t, x) with channel 0 equal to the grid.
inline Path augment_time(const Path& path)
{
    Mat v(path.samples(), path.dim() + 1);
    for (Index j = 0; j < path.samples(); ++j) v(j, 0) = path.grid()[static_cast<std::size_t>(j)];
    v.rightCols(path.dim()) = path.values();
    return Path(path.grid(), std::move(v));
}

// (t, x...) -> (t, t^alpha, x...)
inline Path augment_time_power(const Path& path, double alpha)
{
    require(alpha > 0.0 && alpha < 1.0, "augment_time_power: alpha must lie in (0,1)");
    require(path.dim() >= 1, "augment_time_power: path must be time-augmented");
    Mat v(path.samples(), path.dim() + 1);
    v.col(0) = path.values().col(0);
    for (Index j = 0; j < path.samples(); ++j) {
        double t = path.grid()[static_cast<std::size_t>(j)];
        require(t >= 0.0, "augment_time_power: negative time");
        v(j, 1) = std::pow(t, alpha);
    }
    v.rightCols(path.dim() - 1) = path.values().rightCols(path.dim() - 1);
    return Path(path.grid(), std::move(v));
}

// j(t) = max{ j : t_j <= t }
inline Index floor_node(const std::vector<double>& grid, double t)
{
    if (grid.empty() || t < grid.front())
        throw InvalidInput("query time " + std::to_string(t) + " precedes the first grid node");
    auto it = std::upper_bound(grid.begin(), grid.end(), t);
    return static_cast<Index>(it - grid.begin()) - 1;
}

}  // namespace bsk
