// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smerge/error.hpp"

namespace smerge {

/// Dense row-major matrix of 64-bit reals.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        if (rows == 0 || cols == 0) {
            throw Error(ErrorCode::ShapeMismatch, "matrix dimensions must be positive");
        }
    }

    /// Takes ownership of row-major `data`; rejects wrong lengths and non-finite entries.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows == 0 || cols == 0) {
            throw Error(ErrorCode::ShapeMismatch, "matrix dimensions must be positive");
        }
        if (data_.size() != rows * cols) {
            throw Error(ErrorCode::ShapeMismatch,
                        "matrix data length " + std::to_string(data_.size()) + " does not match " +
                            std::to_string(rows) + "x" + std::to_string(cols));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::NonFinite, "matrix contains a non-finite entry");
            }
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw Error(ErrorCode::ShapeMismatch, "ragged row in matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(data));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_string(const Matrix& m) {
    return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

/// Eigenpairs of a symmetric matrix. Eigenvalues are non-increasing and
/// column j of `eigenvectors` belongs to eigenvalues[j].
struct EigenDecomposition {
    std::vector<double> eigenvalues;
    Matrix eigenvectors;
};

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            t(c, r) = m(r, c);
        }
    }
    return t;
}

namespace detail {

// C = A * B with every C(i,j) accumulated in ascending inner index, so the
// result does not depend on blocking. When `upper_only` is set, entries
// below the diagonal of a square C are left unspecified.
inline void multiply_into(const Matrix& a, const Matrix& b, Matrix& c, bool upper_only) {
    const std::size_t m = a.rows();
    const std::size_t p = a.cols();
    const std::size_t n = b.cols();
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    std::fill(C, C + m * n, 0.0);

    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const std::size_t j0 = upper_only ? i : 0;
        double* __restrict c0 = C + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        for (std::size_t k = 0; k < p; ++k) {
            const double a0 = A[i * p + k];
            const double a1 = A[(i + 1) * p + k];
            const double a2 = A[(i + 2) * p + k];
            const double a3 = A[(i + 3) * p + k];
            const double* __restrict bk = B + k * n;
            for (std::size_t j = j0; j < n; ++j) {
                const double bv = bk[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        const std::size_t j0 = upper_only ? i : 0;
        double* __restrict ci = C + i * n;
        for (std::size_t k = 0; k < p; ++k) {
            const double av = A[i * p + k];
            const double* __restrict bk = B + k * n;
            for (std::size_t j = j0; j < n; ++j) {
                ci[j] += av * bk[j];
            }
        }
    }
}

inline void mirror_upper(Matrix& s) {
    for (std::size_t i = 0; i < s.rows(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            s(i, j) = s(j, i);
        }
    }
}

} // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "matmul inner dimensions differ: " + shape_string(a) + " * " + shape_string(b));
    }
    Matrix c(a.rows(), b.cols());
    detail::multiply_into(a, b, c, false);
    return c;
}

/// D * D^T, exactly symmetric.
inline Matrix gram_left(const Matrix& d) {
    const Matrix dt = transpose(d);
    Matrix g(d.rows(), d.rows());
    detail::multiply_into(d, dt, g, true);
    detail::mirror_upper(g);
    return g;
}

/// D^T * D, exactly symmetric.
inline Matrix gram_right(const Matrix& d) {
    return gram_left(transpose(d));
}

inline void add_in_place(Matrix& acc, const Matrix& x) {
    if (!acc.same_shape(x)) {
        throw Error(ErrorCode::ShapeMismatch, "add: " + shape_string(acc) + " vs " + shape_string(x));
    }
    auto a = acc.data();
    auto b = x.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += b[i];
    }
}

inline Matrix add(Matrix a, const Matrix& b) {
    add_in_place(a, b);
    return a;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw Error(ErrorCode::ShapeMismatch, "subtract: " + shape_string(a) + " vs " + shape_string(b));
    }
    Matrix out(a.rows(), a.cols());
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = x[i] - y[i];
    }
    return out;
}

inline Matrix scale(Matrix m, double factor) {
    for (double& v : m.data()) {
        v *= factor;
    }
    return m;
}

inline double frobenius_norm_sq(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) {
        s += v * v;
    }
    return s;
}

inline double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_norm_sq(m)); }

inline double trace(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) {
        s += m(i, i);
    }
    return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw Error(ErrorCode::ShapeMismatch, "compare: " + shape_string(a) + " vs " + shape_string(b));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

/// First `k` columns of `m`.
inline Matrix leading_columns(const Matrix& m, std::size_t k) {
    if (k == 0 || k > m.cols()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "cannot take " + std::to_string(k) + " columns of " + shape_string(m));
    }
    Matrix out(m.rows(), k);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        std::copy_n(m.row(r).begin(), k, out.row(r).begin());
    }
    return out;
}

/// ||U^T U - I||_F
inline double orthonormal_defect(const Matrix& u) {
    Matrix g = gram_right(u);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        g(i, i) -= 1.0;
    }
    return frobenius_norm(g);
}

namespace detail {

// Householder reduction of the symmetric n x n matrix in `a` (destroyed) to
// tridiagonal form T = Q^T A Q. Returns diag/off with off[i] = T(i+1, i) and
// off[n-1] = 0, and `qt` holding Q^T (row j is column j of Q).
inline void tridiagonalize(std::vector<double>& a, std::size_t n, std::vector<double>& diag,
                           std::vector<double>& off, std::vector<double>& qt) {
    diag.assign(n, 0.0);
    off.assign(n, 0.0);
    std::vector<std::vector<double>> reflectors(n > 2 ? n - 2 : 0);
    std::vector<double> betas(reflectors.size(), 0.0);
    std::vector<double> p(n), w(n);

    for (std::size_t k = 0; k + 2 < n; ++k) {
        const std::size_t m = n - k - 1;
        const double* x = &a[k * n + k + 1];
        diag[k] = a[k * n + k];

        double scale_x = 0.0;
        for (std::size_t j = 1; j < m; ++j) {
            scale_x = std::max(scale_x, std::abs(x[j]));
        }
        if (scale_x == 0.0) {
            off[k] = x[0];
            continue;
        }
        scale_x = std::max(scale_x, std::abs(x[0]));

        std::vector<double> v(x, x + m);
        double norm_sq = 0.0;
        for (double& vj : v) {
            vj /= scale_x;
            norm_sq += vj * vj;
        }
        const double norm = std::sqrt(norm_sq);
        const double alpha = v[0] >= 0.0 ? -norm : norm;
        v[0] -= alpha;
        double vtv = 0.0;
        for (double vj : v) {
            vtv += vj * vj;
        }
        const double beta = 2.0 / vtv;
        off[k] = alpha * scale_x;

        // Trailing block T <- H T H with H = I - beta v v^T.
        double* t = &a[(k + 1) * n + (k + 1)];
        double ptv = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double* ti = t + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                s += ti[j] * v[j];
            }
            p[i] = beta * s;
            ptv += p[i] * v[i];
        }
        const double kk = 0.5 * beta * ptv;
        for (std::size_t i = 0; i < m; ++i) {
            w[i] = p[i] - kk * v[i];
        }
        for (std::size_t i = 0; i < m; ++i) {
            double* ti = t + i * n;
            const double vi = v[i];
            const double wi = w[i];
            for (std::size_t j = 0; j < m; ++j) {
                ti[j] -= vi * w[j] + wi * v[j];
            }
        }
        reflectors[k] = std::move(v);
        betas[k] = beta;
    }
    if (n >= 2) {
        diag[n - 2] = a[(n - 2) * n + (n - 2)];
        diag[n - 1] = a[(n - 1) * n + (n - 1)];
        off[n - 2] = a[(n - 2) * n + (n - 1)];
    } else if (n == 1) {
        diag[0] = a[0];
    }

    // Q = H_0 H_1 ... H_{n-3}, accumulated from the right end so each step
    // touches only its trailing block.
    std::vector<double> q(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        q[i * n + i] = 1.0;
    }
    std::vector<double> row_comb(n);
    for (std::size_t kk = reflectors.size(); kk-- > 0;) {
        if (betas[kk] == 0.0) {
            continue;
        }
        const auto& v = reflectors[kk];
        const std::size_t m = v.size();
        const std::size_t off0 = kk + 1;
        std::fill(row_comb.begin(), row_comb.begin() + m, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            const double vi = v[i];
            const double* qi = &q[(off0 + i) * n + off0];
            for (std::size_t j = 0; j < m; ++j) {
                row_comb[j] += vi * qi[j];
            }
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double f = betas[kk] * v[i];
            double* qi = &q[(off0 + i) * n + off0];
            for (std::size_t j = 0; j < m; ++j) {
                qi[j] -= f * row_comb[j];
            }
        }
    }
    qt.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            qt[j * n + i] = q[i * n + j];
        }
    }
}

// Implicit QL on the tridiagonal (diag, off) with rotations applied to the
// rows of `zt`. Follows the classic tql2 iteration.
inline void tridiagonal_ql(std::vector<double>& d, std::vector<double>& e, std::vector<double>& zt,
                           std::size_t n) {
    constexpr double eps = 0x1p-52;
    constexpr int max_iterations = 60;
    double f = 0.0;
    double tst1 = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
        std::size_t m = l;
        while (m < n) {
            if (std::abs(e[m]) <= eps * tst1) {
                break;
            }
            ++m;
        }
        if (m == n) {
            m = n - 1;
        }
        if (m > l) {
            int iter = 0;
            do {
                if (++iter > max_iterations) {
                    throw Error(ErrorCode::NoConvergence,
                                "symmetric eigensolver did not converge at index " + std::to_string(l));
                }
                double g = d[l];
                double p = (d[l + 1] - g) / (2.0 * e[l]);
                double r = std::hypot(p, 1.0);
                if (p < 0) {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                const double dl1 = d[l + 1];
                double h = g - d[l];
                for (std::size_t i = l + 2; i < n; ++i) {
                    d[i] -= h;
                }
                f += h;

                p = d[m];
                double c = 1.0, c2 = 1.0, c3 = 1.0;
                const double el1 = e[l + 1];
                double s = 0.0, s2 = 0.0;
                for (std::size_t ii = m; ii-- > l;) {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[ii];
                    h = c * p;
                    r = std::hypot(p, e[ii]);
                    e[ii + 1] = s * r;
                    s = e[ii] / r;
                    c = p / r;
                    p = c * d[ii] - s * g;
                    d[ii + 1] = h + s * (c * g + s * d[ii]);

                    double* __restrict z0 = &zt[ii * n];
                    double* __restrict z1 = &zt[(ii + 1) * n];
                    for (std::size_t k = 0; k < n; ++k) {
                        const double hk = z1[k];
                        z1[k] = s * z0[k] + c * hk;
                        z0[k] = c * z0[k] - s * hk;
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

} // namespace detail

/// Eigendecomposition of a symmetric matrix by Householder tridiagonalization
/// and implicit QL. Eigenvalues come out non-increasing (exact ties keep the
/// solver's index order) and each eigenvector has its largest-magnitude entry
/// positive, first such entry on ties.
inline EigenDecomposition sym_eigh(const Matrix& s) {
    if (s.rows() != s.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "sym_eigh needs a square matrix, got " + shape_string(s));
    }
    const std::size_t n = s.rows();
    double norm_sq = 0.0;
    double asym_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double v = s(i, j);
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::NonFinite, "sym_eigh input has a non-finite entry");
            }
            norm_sq += v * v;
            const double diff = v - s(j, i);
            asym_sq += diff * diff;
        }
    }
    if (std::sqrt(asym_sq) > 1e-8 * std::sqrt(norm_sq)) {
        throw Error(ErrorCode::Asymmetric, "sym_eigh input is not symmetric: ||S - S^T||_F = " +
                                               std::to_string(std::sqrt(asym_sq)));
    }

    std::vector<double> a(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            a[i * n + j] = 0.5 * (s(i, j) + s(j, i));
        }
    }
    std::vector<double> d, e, zt;
    detail::tridiagonalize(a, n, d, e, zt);
    detail::tridiagonal_ql(d, e, zt, n);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return d[x] > d[y]; });

    EigenDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t col = 0; col < n; ++col) {
        const std::size_t src = order[col];
        out.eigenvalues[col] = d[src];
        const double* z = &zt[src * n];
        std::size_t pivot = 0;
        for (std::size_t k = 1; k < n; ++k) {
            if (std::abs(z[k]) > std::abs(z[pivot])) {
                pivot = k;
            }
        }
        const double sign = z[pivot] < 0.0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < n; ++k) {
            out.eigenvectors(k, col) = sign * z[k];
        }
    }
    return out;
}

/// Sets eigenvalues below rel_tol * max(eigenvalue) to zero. Returns how many
/// were changed. An all-zero or empty spectrum is left alone.
inline std::size_t clamp_small_eigenvalues(std::span<double> eigenvalues, double rel_tol = 1e-12) {
    if (eigenvalues.empty()) {
        return 0;
    }
    const double top = *std::max_element(eigenvalues.begin(), eigenvalues.end());
    const double threshold = top > 0.0 ? rel_tol * top : 0.0;
    std::size_t changed = 0;
    for (double& v : eigenvalues) {
        if (v < threshold && v != 0.0) {
            v = 0.0;
            ++changed;
        } else if (v < 0.0) {
            v = 0.0;
            ++changed;
        }
    }
    return changed;
}

} // namespace smerge
