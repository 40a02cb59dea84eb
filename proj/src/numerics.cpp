#include "oodkit/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "oodkit/errors.hpp"
#include "oodkit/rng.hpp"

namespace oodkit {

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw InvalidInput("log_sum_exp of empty vector");
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        if (!std::isfinite(x)) throw InvalidInput("log_sum_exp of non-finite value");
        m = std::max(m, x);
    }
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

Vector softmax(std::span<const double> v, double temperature) {
    if (v.empty()) throw InvalidInput("softmax of empty vector");
    if (!(temperature > 0.0)) throw InvalidParam("softmax temperature must be > 0");
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        if (!std::isfinite(x)) throw InvalidInput("softmax of non-finite value");
        m = std::max(m, x);
    }
    Vector p(v.size());
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        p[i] = std::exp((v[i] - m) / temperature);
        s += p[i];
    }
    for (double& x : p) x /= s;
    return p;
}

Vector column_mean(const Matrix& x) {
    if (x.rows() == 0) throw InsufficientData("mean of zero rows");
    Vector m(x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) m[c] += x(r, c);
    for (double& v : m) v /= static_cast<double>(x.rows());
    return m;
}

namespace {

void accumulate_outer(Matrix& acc, std::span<const double> row, std::span<const double> center,
                      Vector& scratch) {
    const std::size_t d = row.size();
    for (std::size_t i = 0; i < d; ++i) scratch[i] = row[i] - center[i];
    for (std::size_t i = 0; i < d; ++i) {
        const double di = scratch[i];
        for (std::size_t j = i; j < d; ++j) acc(i, j) += di * scratch[j];
    }
}

void finish_covariance(Matrix& acc, std::size_t n) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < acc.rows(); ++i) {
        for (std::size_t j = i; j < acc.cols(); ++j) {
            acc(i, j) *= inv;
            acc(j, i) = acc(i, j);
        }
    }
}

}  // namespace

Matrix covariance(const Matrix& x) {
    if (x.rows() < 2) throw InsufficientData("covariance needs at least 2 samples");
    const Vector mean = column_mean(x);
    Matrix acc(x.cols(), x.cols());
    Vector scratch(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) accumulate_outer(acc, x.row(r), mean, scratch);
    finish_covariance(acc, x.rows());
    return acc;
}

Matrix tied_covariance(const Matrix& x, std::span<const std::int64_t> groups, const Matrix& centers) {
    if (x.rows() < 2) throw InsufficientData("covariance needs at least 2 samples");
    if (groups.size() != x.rows()) throw ShapeError("group labels do not match sample count");
    if (centers.cols() != x.cols()) throw ShapeError("center width does not match features");
    Matrix acc(x.cols(), x.cols());
    Vector scratch(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto g = groups[r];
        if (g < 0 || static_cast<std::size_t>(g) >= centers.rows())
            throw InvalidInput("group label out of range");
        accumulate_outer(acc, x.row(r), centers.row(static_cast<std::size_t>(g)), scratch);
    }
    finish_covariance(acc, x.rows());
    return acc;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition

namespace {

constexpr std::size_t kJacobiMaxDim = 512;

void jacobi_eig(Matrix& a, Vector& d, Matrix& v) {
    const std::size_t n = a.rows();
    v = Matrix::identity(n);
    double frob = 0.0;
    for (double x : a.data()) frob += x * x;
    const double tol = 1e-30 * frob;

    constexpr int kMaxSweeps = 100;
    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off <= tol) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged) throw ConvergenceError("Jacobi eigensolver did not converge in 100 sweeps");
    d.resize(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a(i, i);
}

// Householder reduction to tridiagonal form followed by implicit QL
// (the EISPACK tred2/tql2 pair).
void tridiagonal_ql_eig(const Matrix& a, Vector& d, Matrix& v) {
    const int n = static_cast<int>(a.rows());
    v = a;
    d.assign(n, 0.0);
    Vector e(n, 0.0);

    for (int j = 0; j < n; ++j) d[j] = v(n - 1, j);
    for (int i = n - 1; i > 0; --i) {
        double scale = 0.0;
        double h = 0.0;
        for (int k = 0; k < i; ++k) scale += std::abs(d[k]);
        if (scale == 0.0) {
            e[i] = d[i - 1];
            for (int j = 0; j < i; ++j) {
                d[j] = v(i - 1, j);
                v(i, j) = 0.0;
                v(j, i) = 0.0;
            }
        } else {
            for (int k = 0; k < i; ++k) {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            double f = d[i - 1];
            double g = std::sqrt(h);
            if (f > 0) g = -g;
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for (int j = 0; j < i; ++j) e[j] = 0.0;
            for (int j = 0; j < i; ++j) {
                f = d[j];
                v(j, i) = f;
                g = e[j] + v(j, j) * f;
                for (int k = j + 1; k <= i - 1; ++k) {
                    g += v(k, j) * d[k];
                    e[k] += v(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for (int j = 0; j < i; ++j) {
                e[j] /= h;
                f += e[j] * d[j];
            }
            const double hh = f / (h + h);
            for (int j = 0; j < i; ++j) e[j] -= hh * d[j];
            for (int j = 0; j < i; ++j) {
                f = d[j];
                g = e[j];
                for (int k = j; k <= i - 1; ++k) v(k, j) -= (f * e[k] + g * d[k]);
                d[j] = v(i - 1, j);
                v(i, j) = 0.0;
            }
        }
        d[i] = h;
    }
    for (int i = 0; i < n - 1; ++i) {
        v(n - 1, i) = v(i, i);
        v(i, i) = 1.0;
        const double h = d[i + 1];
        if (h != 0.0) {
            for (int k = 0; k <= i; ++k) d[k] = v(k, i + 1) / h;
            for (int j = 0; j <= i; ++j) {
                double g = 0.0;
                for (int k = 0; k <= i; ++k) g += v(k, i + 1) * v(k, j);
                for (int k = 0; k <= i; ++k) v(k, j) -= g * d[k];
            }
        }
        for (int k = 0; k <= i; ++k) v(k, i + 1) = 0.0;
    }
    for (int j = 0; j < n; ++j) {
        d[j] = v(n - 1, j);
        v(n - 1, j) = 0.0;
    }
    v(n - 1, n - 1) = 1.0;
    e[0] = 0.0;

    // QL iterations.
    for (int i = 1; i < n; ++i) e[i - 1] = e[i];
    e[n - 1] = 0.0;
    double f = 0.0;
    double tst1 = 0.0;
    const double eps = std::numeric_limits<double>::epsilon();
    for (int l = 0; l < n; ++l) {
        tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
        int m = l;
        while (m < n) {
            if (std::abs(e[m]) <= eps * tst1) break;
            ++m;
        }
        if (m == n) m = n - 1;
        if (m > l) {
            int iter = 0;
            do {
                if (++iter > 60) throw ConvergenceError("tridiagonal QL did not converge");
                double g = d[l];
                double p = (d[l + 1] - g) / (2.0 * e[l]);
                double r = std::hypot(p, 1.0);
                if (p < 0) r = -r;
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                const double dl1 = d[l + 1];
                double h = g - d[l];
                for (int i = l + 2; i < n; ++i) d[i] -= h;
                f += h;

                p = d[m];
                double c = 1.0, c2 = 1.0, c3 = 1.0;
                const double el1 = e[l + 1];
                double s = 0.0, s2 = 0.0;
                for (int i = m - 1; i >= l; --i) {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = std::hypot(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for (int k = 0; k < n; ++k) {
                        h = v(k, i + 1);
                        v(k, i + 1) = s * v(k, i) + c * h;
                        v(k, i) = c * v(k, i) - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
            } while (std::abs(e[l]) > eps * tst1);
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

SymEigResult finalize_eig(const Vector& d, const Matrix& v) {
    const std::size_t n = d.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    SymEigResult out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.eigenvalues[j] = d[src];
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (std::abs(v(i, src)) > best) {
                best = std::abs(v(i, src));
                arg = i;
            }
        }
        const double sign = v(arg, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, j) = sign * v(i, src);
    }
    return out;
}

void check_symmetric(const Matrix& a) {
    if (a.rows() != a.cols()) throw InvalidInput("sym_eig needs a square matrix");
    if (a.rows() == 0) throw InvalidInput("sym_eig of empty matrix");
    const double tol = 1e-8 * std::max(1.0, max_abs(a));
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            if (!std::isfinite(a(i, j)) || std::abs(a(i, j) - a(j, i)) > tol)
                throw InvalidInput("matrix is not symmetric within 1e-8");
        }
    }
}

Matrix symmetrized(const Matrix& a) {
    Matrix s = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) s(i, j) = s(j, i) = 0.5 * (a(i, j) + a(j, i));
    return s;
}

}  // namespace

namespace detail {

SymEigResult sym_eig_jacobi(const Matrix& a) {
    check_symmetric(a);
    Matrix work = symmetrized(a);
    Vector d;
    Matrix v;
    jacobi_eig(work, d, v);
    return finalize_eig(d, v);
}

SymEigResult sym_eig_ql(const Matrix& a) {
    check_symmetric(a);
    Vector d;
    Matrix v;
    tridiagonal_ql_eig(symmetrized(a), d, v);
    return finalize_eig(d, v);
}

}  // namespace detail

SymEigResult sym_eig(const Matrix& a) {
    if (a.rows() > 4096) throw InvalidInput("sym_eig supports at most 4096 dimensions");
    return a.rows() <= kJacobiMaxDim ? detail::sym_eig_jacobi(a) : detail::sym_eig_ql(a);
}

// ---------------------------------------------------------------------------

double ridge_amount(const Matrix& a) {
    double tr = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) tr += a(i, i);
    return std::max(0.0, kRidgeRelative * tr / static_cast<double>(a.rows()));
}

Matrix ridge_solve(const Matrix& a, const Matrix& b) {
    if (a.rows() != a.cols() || a.rows() == 0) throw InvalidInput("ridge_solve needs a square matrix");
    if (b.rows() != a.rows()) throw ShapeError("ridge_solve right-hand side has wrong row count");
    const std::size_t n = a.rows();
    const double ridge = ridge_amount(a);

    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j) + ridge;
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag))
            throw SingularMatrix("matrix is not positive definite after ridge");
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = 0.5 * (a(i, j) + a(j, i));
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }

    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = x(i, c);
            for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

double percentile(std::span<const double> v, double p) {
    if (v.empty()) throw InvalidInput("percentile of empty vector");
    if (!(p >= 0.0 && p <= 100.0)) throw InvalidInput("percentile must lie in [0, 100]");
    std::vector<double> s(v.begin(), v.end());
    std::sort(s.begin(), s.end());
    const double idx = p / 100.0 * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(idx));
    const auto hi = static_cast<std::size_t>(std::ceil(idx));
    if (lo == hi) return s[lo];
    return s[lo] + (idx - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

TopSingular top_singular(const Matrix& m, std::size_t iters, std::uint64_t seed) {
    TopSingular out;
    out.u.assign(m.rows(), 0.0);
    out.v.assign(m.cols(), 0.0);
    if (m.rows() == 0 || m.cols() == 0) throw InvalidInput("top_singular of empty matrix");
    for (double x : m.data())
        if (!std::isfinite(x)) throw InvalidInput("top_singular of non-finite matrix");
    if (max_abs(m) == 0.0) {
        out.u[0] = 1.0;
        out.v[0] = 1.0;
        return out;
    }

    SplitMix64 rng(seed);
    Vector v(m.cols());
    for (double& x : v) x = rng.normal();
    double nv = norm2(v);
    for (double& x : v) x /= nv;

    Vector mv(m.rows());
    Vector next(m.cols());
    for (std::size_t it = 0; it < std::max<std::size_t>(iters, 1); ++it) {
        mv = matvec(m, v);
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < m.cols(); ++c) next[c] += m(r, c) * mv[r];
        const double nn = norm2(next);
        if (nn == 0.0) break;  // start vector orthogonal to the row space
        double delta = 0.0;
        for (std::size_t c = 0; c < next.size(); ++c) {
            next[c] /= nn;
            delta = std::max(delta, std::abs(next[c] - v[c]));
        }
        v.swap(next);
        if (delta <= 4.0 * std::numeric_limits<double>::epsilon()) break;
    }

    // Deterministic sign: largest-magnitude entry of v nonnegative.
    std::size_t arg = 0;
    for (std::size_t c = 1; c < v.size(); ++c)
        if (std::abs(v[c]) > std::abs(v[arg])) arg = c;
    if (v[arg] < 0.0)
        for (double& x : v) x = -x;

    mv = matvec(m, v);
    out.sigma = norm2(mv);
    out.v = v;
    if (out.sigma > 0.0) {
        for (std::size_t r = 0; r < mv.size(); ++r) out.u[r] = mv[r] / out.sigma;
    } else {
        out.u[0] = 1.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Logistic regression

namespace {

double softplus(double s) { return std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))); }

double sigmoid(double s) {
    if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

double linear_score(std::span<const double> row, std::span<const double> w) {
    return dot(row, w.first(row.size())) + w[row.size()];
}

}  // namespace

double logistic_loss(const Matrix& x, std::span<const double> y, double l2,
                     std::span<const double> weights) {
    if (weights.size() != x.cols() + 1) throw ShapeError("logistic weights need d+1 entries");
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double s = linear_score(x.row(i), weights);
        loss += softplus(s) - y[i] * s;
    }
    loss /= static_cast<double>(x.rows());
    double reg = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) reg += weights[j] * weights[j];
    return loss + 0.5 * l2 * reg;
}

Vector logistic_fit(const Matrix& x, std::span<const double> y, double l2) {
    if (!(l2 > 0.0)) throw InvalidParam("logistic_fit needs l2 > 0");
    if (x.rows() != y.size() || x.rows() == 0) throw ShapeError("logistic_fit label count mismatch");
    bool has0 = false, has1 = false;
    for (double v : y) {
        if (v == 0.0) has0 = true;
        else if (v == 1.0) has1 = true;
        else throw InvalidInput("logistic_fit labels must be 0 or 1");
    }
    if (!has0 || !has1) throw DegenerateLabels("logistic_fit needs both classes");

    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    const std::size_t dim = d + 1;
    Vector w(dim, 0.0);
    double loss = logistic_loss(x, y, l2, w);

    constexpr int kMaxIter = 200;
    Vector grad(dim);
    Matrix hess(dim, dim);
    Vector aug(dim);
    for (int iter = 0; iter < kMaxIter; ++iter) {
        std::fill(grad.begin(), grad.end(), 0.0);
        std::fill(hess.data().begin(), hess.data().end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = x.row(i);
            std::copy(row.begin(), row.end(), aug.begin());
            aug[d] = 1.0;
            const double p = sigmoid(linear_score(row, w));
            const double r = p - y[i];
            const double s = p * (1.0 - p);
            for (std::size_t a = 0; a < dim; ++a) {
                grad[a] += r * aug[a];
                for (std::size_t b = a; b < dim; ++b) hess(a, b) += s * aug[a] * aug[b];
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t a = 0; a < dim; ++a) {
            grad[a] *= inv_n;
            for (std::size_t b = a; b < dim; ++b) {
                hess(a, b) *= inv_n;
                hess(b, a) = hess(a, b);
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            grad[j] += l2 * w[j];
            hess(j, j) += l2;
        }
        if (norm2(grad) <= 1e-8) break;

        // Newton direction; tiny jitter keeps the bias block PD when every
        // probability saturates.
        Matrix rhs(dim, 1);
        for (std::size_t a = 0; a < dim; ++a) rhs(a, 0) = grad[a];
        Matrix h = hess;
        h(d, d) += 1e-12;
        Matrix step;
        try {
            step = ridge_solve(h, rhs);
        } catch (const SingularMatrix&) {
            step = rhs;  // fall back to gradient descent
        }
        double slope = 0.0;
        for (std::size_t a = 0; a < dim; ++a) slope += grad[a] * step(a, 0);
        if (slope <= 0.0) {
            for (std::size_t a = 0; a < dim; ++a) step(a, 0) = grad[a];
            slope = dot(grad, grad);
        }

        double t = 1.0;
        Vector trial(dim);
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (std::size_t a = 0; a < dim; ++a) trial[a] = w[a] - t * step(a, 0);
            const double tl = logistic_loss(x, y, l2, trial);
            if (tl <= loss - 1e-4 * t * slope) {
                w = trial;
                loss = tl;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;
    }
    return w;
}

// ---------------------------------------------------------------------------
// Weibull

double WeibullModel::cdf(double x) const {
    if (!(x > 0.0)) return 0.0;
    return -std::expm1(-std::pow(x / scale, shape));
}

WeibullModel weibull_tail_fit(std::span<const double> distances, std::size_t tail) {
    if (tail < 2) throw InvalidParam("Weibull tail size must be >= 2");
    if (tail > distances.size()) throw InvalidParam("Weibull tail larger than sample");
    std::vector<double> x(distances.begin(), distances.end());
    for (double v : x)
        if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidInput("Weibull distances must be finite and >= 0");
    std::partial_sort(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(tail), x.end(),
                      std::greater<>());
    x.resize(tail);
    const double xmax = x.front();
    const double xmin = x.back();
    if (!(xmin > 0.0)) throw DegenerateSample("Weibull tail contains zero distances");
    if (xmax - xmin <= 1e-12 * xmax) throw DegenerateSample("Weibull tail values are all equal");

    const double n = static_cast<double>(tail);
    Vector logy(tail);
    double mean_log = 0.0;
    for (std::size_t i = 0; i < tail; ++i) {
        logy[i] = std::log(x[i] / xmax);
        mean_log += logy[i];
    }
    mean_log /= n;

    // g(k) = sum y^k ln y / sum y^k - 1/k - mean(ln y); increasing in k.
    auto eval = [&](double k, double& g, double& dg) {
        double b = 0.0, a = 0.0, c = 0.0;
        for (double l : logy) {
            const double yk = std::exp(k * l);
            b += yk;
            a += yk * l;
            c += yk * l * l;
        }
        g = a / b - 1.0 / k - mean_log;
        dg = (c * b - a * a) / (b * b) + 1.0 / (k * k);
    };

    double lo = 1.0, hi = 1.0, g = 0.0, dg = 0.0;
    eval(1.0, g, dg);
    if (g < 0.0) {
        do {
            lo = hi;
            hi *= 2.0;
            eval(hi, g, dg);
            if (hi > 1e8) throw ConvergenceError("Weibull shape bracket diverged");
        } while (g < 0.0);
    } else {
        do {
            hi = lo;
            lo *= 0.5;
            eval(lo, g, dg);
            if (lo < 1e-8) throw ConvergenceError("Weibull shape bracket collapsed");
        } while (g > 0.0);
    }

    double k = 0.5 * (lo + hi);
    bool converged = false;
    for (int iter = 0; iter < 200; ++iter) {
        eval(k, g, dg);
        if (std::abs(g) <= 1e-9) {
            converged = true;
            break;
        }
        if (g < 0.0) lo = k;
        else hi = k;
        double next = k - g / dg;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (hi - lo <= 1e-15 * hi) {
            k = next;
            converged = true;
            break;
        }
        k = next;
    }
    if (!converged) throw ConvergenceError("Weibull shape Newton did not converge");

    double b = 0.0;
    for (double l : logy) b += std::exp(k * l);
    WeibullModel model;
    model.shape = k;
    model.scale = xmax * std::pow(b / n, 1.0 / k);
    model.tail_size = tail;
    return model;
}

}  // namespace oodkit
