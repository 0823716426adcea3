#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "s2scast/common.hpp"

// Small dense linear algebra: a cyclic Jacobi eigensolver for symmetric
// matrices (enough for EOF analysis on desk-scale grids) and a Cholesky
// factorization used by the Gaussian-process tuner. Matrices are row-major
// std::vector<double>.

namespace s2scast {

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition, eigenvalues sorted descending.
// ---------------------------------------------------------------------------

struct SymmetricEigen {
    std::size_t n = 0;
    std::vector<double> values;   // descending
    std::vector<double> vectors;  // row k = eigenvector for values[k], unit norm
};

inline SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
    if (a.size() != n * n) throw ShapeError("symmetric_eigen: matrix size mismatch");
    // V accumulates rotations; columns of V are eigenvectors of the input
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    double norm = 0.0;
    for (double x : a) norm += x * x;
    norm = std::sqrt(norm);
    const double tol = norm > 0.0 ? 1e-15 * norm : 0.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (std::sqrt(2.0 * off) <= tol) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) <= tol / static_cast<double>(n)) continue;
                const double app = a[p * n + p];
                const double aqq = a[q * n + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p];
                    const double aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const double apj = a[p * n + j];
                    const double aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v[i * n + p];
                    const double viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });

    SymmetricEigen out;
    out.n = n;
    out.values.resize(n);
    out.vectors.resize(n * n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t col = order[k];
        out.values[k] = a[col * n + col];
        for (std::size_t i = 0; i < n; ++i) out.vectors[k * n + i] = v[i * n + col];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cholesky factorization A = L Lᵀ with solve and log-determinant.
// ---------------------------------------------------------------------------

struct CholeskyFactor {
    std::size_t n = 0;
    std::vector<double> lower;  // row-major, strictly upper part unused

    // solve A x = b via forward then back substitution
    std::vector<double> solve(const std::vector<double>& b) const {
        if (b.size() != n) throw ShapeError("cholesky solve: rhs length mismatch");
        std::vector<double> y(n), x(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[i];
            for (std::size_t j = 0; j < i; ++j) s -= lower[i * n + j] * y[j];
            y[i] = s / lower[i * n + i];
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t j = ii + 1; j < n; ++j) s -= lower[j * n + ii] * x[j];
            x[ii] = s / lower[ii * n + ii];
        }
        return x;
    }

    double log_det() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::log(lower[i * n + i]);
        return 2.0 * s;
    }
};

inline CholeskyFactor cholesky(const std::vector<double>& a, std::size_t n) {
    if (a.size() != n * n) throw ShapeError("cholesky: matrix size mismatch");
    CholeskyFactor f;
    f.n = n;
    f.lower.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= f.lower[i * n + k] * f.lower[j * n + k];
            if (i == j) {
                if (s <= 0.0)
                    throw NumericError("cholesky: matrix not positive definite at pivot " +
                                       std::to_string(i));
                f.lower[i * n + i] = std::sqrt(s);
            } else {
                f.lower[i * n + j] = s / f.lower[j * n + j];
            }
        }
    }
    return f;
}

}  // namespace s2scast
