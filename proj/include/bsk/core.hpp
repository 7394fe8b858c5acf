#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsk {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidInput : Error {
    using Error::Error;
};

// Ill-conditioned or singular linear algebra.
struct ConditioningError : Error {
    using Error::Error;
};

// Non-finite values produced somewhere in the pipeline.
struct NumericError : Error {
    using Error::Error;
};

struct ExtrapolationError : Error {
    using Error::Error;
};

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw InvalidInput(what);
}

// sum (yhat - y)^2 / sum y^2
template <class A, class B>
double rel_mse(const A& estimate, const B& reference)
{
    double num = 0.0, den = 0.0;
    require(estimate.size() == reference.size(), "rel_mse: size mismatch");
    for (Index i = 0; i < reference.size(); ++i) {
        double e = estimate(i) - reference(i);
        num += e * e;
        den += reference(i) * reference(i);
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / den;
}

inline double rel_mse(const Mat& estimate, const Mat& reference)
{
    require(estimate.rows() == reference.rows() && estimate.cols() == reference.cols(),
            "rel_mse: shape mismatch");
    double den = reference.squaredNorm();
    double num = (estimate - reference).squaredNorm();
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / den;
}

inline double factorial(int n)
{
    double f = 1.0;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
}

inline void check_grid(const std::vector<double>& grid, const char* who)
{
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] > grid[i - 1]))
            throw InvalidInput(std::string(who) + ": grid not strictly increasing at index " +
                               std::to_string(i));
}

}  // namespace bsk
