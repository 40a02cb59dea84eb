#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "oodkit/matrix.hpp"

namespace oodkit {

// log(sum(exp(v))) with a max shift. Throws InvalidInput on empty or
// non-finite input.
double log_sum_exp(std::span<const double> v);

// softmax(v / temperature).
Vector softmax(std::span<const double> v, double temperature = 1.0);

// Column means of a samples-by-dims matrix.
Vector column_mean(const Matrix& x);

// (1/n) sum (x - m)(x - m)^T around the pooled mean. The 1/n denominator is
// the maximum-likelihood convention used by the Mahalanobis detectors; it
// rescales scores but leaves rankings untouched.
Matrix covariance(const Matrix& x);

// Tied (shared) covariance: each row is centred at the mean of its own group
// (`centers.row(groups[i])`) and the outer products are pooled with 1/n.
Matrix tied_covariance(const Matrix& x, std::span<const std::int64_t> groups,
                       const Matrix& centers);

struct SymEigResult {
    Vector eigenvalues;  // ascending
    Matrix eigenvectors; // column j pairs with eigenvalues[j]
};

// Symmetric eigendecomposition. Cyclic Jacobi up to 512 dimensions,
// Householder tridiagonalisation + implicit QL above. Each eigenvector is
// sign-normalised so its largest-magnitude component (first on ties) is
// nonnegative.
SymEigResult sym_eig(const Matrix& a);

namespace detail {
SymEigResult sym_eig_jacobi(const Matrix& a);
SymEigResult sym_eig_ql(const Matrix& a);
}  // namespace detail

// Relative ridge applied by every covariance solve: 1e-6 * tr(A) / D.
inline constexpr double kRidgeRelative = 1e-6;
double ridge_amount(const Matrix& a);

// Solves (A + ridge_amount(A) I) X = B by Cholesky.
Matrix ridge_solve(const Matrix& a, const Matrix& b);

// Linear interpolation between closest ranks on the ascending sort,
// index = p/100 * (n-1).
double percentile(std::span<const double> v, double p);

struct TopSingular {
    double sigma = 0.0;
    Vector u;  // length rows
    Vector v;  // length cols
};

// Leading singular triple by power iteration on M^T M from a seeded start.
// Stops early once the right vector is stationary to machine precision.
TopSingular top_singular(const Matrix& m, std::size_t iters, std::uint64_t seed);

// Mean logistic loss plus (l2/2)||w||^2 on the slope weights (bias
// unpenalised). `weights` holds d slopes followed by the bias.
double logistic_loss(const Matrix& x, std::span<const double> y, double l2,
                     std::span<const double> weights);

// Newton's method with backtracking on logistic_loss until the gradient norm
// drops to 1e-8 (at most 200 iterations). Returns d slopes then the bias.
Vector logistic_fit(const Matrix& x, std::span<const double> y, double l2);

struct WeibullModel {
    double shape = 1.0;
    double scale = 1.0;
    std::size_t tail_size = 0;

    double cdf(double x) const;
};

// Two-parameter Weibull MLE on the `tail` largest distances. The shape is
// the root of the profile-likelihood equation, found by safeguarded Newton.
WeibullModel weibull_tail_fit(std::span<const double> distances, std::size_t tail);

}  // namespace oodkit
