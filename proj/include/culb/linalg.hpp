#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "culb/errors.hpp"
#include "culb/tensor.hpp"

namespace culb {

// Small dense kernels, enough for this library: everything here runs on
// matrices no larger than a few hundred entries per side.

/// y = A x for A (m x n), x (n).
inline void matvec(const Tensor& a, const double* x, double* y) {
    const std::size_t m = a.rows(), n = a.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* row = a.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
        y[i] = s;
    }
}

inline Tensor matvec(const Tensor& a, const Tensor& x) {
    if (a.cols() != x.numel()) {
        throw ValidationError("matvec: " + shape_str(a) + " vs " + shape_str(x));
    }
    Tensor y = Tensor::zeros({a.rows()});
    matvec(a, x.data.data(), y.data.data());
    return y;
}

/// y = A^T x for A (m x n), x (m).
inline void matvec_t(const Tensor& a, const double* x, double* y) {
    const std::size_t m = a.rows(), n = a.cols();
    for (std::size_t j = 0; j < n; ++j) y[j] = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = a.data.data() + i * n;
        const double xi = x[i];
        for (std::size_t j = 0; j < n; ++j) y[j] += row[j] * xi;
    }
}

/// A += alpha * u v^T, u (m), v (n).
inline void add_outer(Tensor& a, double alpha, const double* u, const double* v) {
    const std::size_t m = a.rows(), n = a.cols();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = a.data.data() + i * n;
        const double ui = alpha * u[i];
        for (std::size_t j = 0; j < n; ++j) row[j] += ui * v[j];
    }
}

/// One-sided Jacobi SVD of A (m x n, m >= n is not required): returns
/// singular values (descending) and optionally the left singular vectors
/// as columns of U (m x n_kept, all n columns kept here).
///
/// Rotations are applied until all column pairs are numerically orthogonal;
/// fine for the small matrices this library handles.
struct JacobiSvd {
    std::vector<double> sigma;  // n values, descending
    Tensor u;                   // m x n, columns are left singular vectors
};

inline JacobiSvd jacobi_svd(const Tensor& a_in) {
    const std::size_t m = a_in.rows(), n = a_in.cols();
    // Work on columns of W = A; rotate column pairs to orthogonality.
    std::vector<std::vector<double>> w(n, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) w[j][i] = a_in.at(i, j);

    const int max_sweeps = 60;
    const double tol = 1e-14;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    app += w[p][i] * w[p][i];
                    aqq += w[q][i] * w[q][i];
                    apq += w[p][i] * w[q][i];
                }
                if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w[p][i], wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
            }
        }
        if (!rotated) break;
    }

    JacobiSvd out;
    out.sigma.resize(n);
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < n; ++j) {
        double nrm = 0.0;
        for (std::size_t i = 0; i < m; ++i) nrm += w[j][i] * w[j][i];
        out.sigma[j] = std::sqrt(nrm);
        order[j] = j;
    }
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return out.sigma[x] > out.sigma[y]; });

    std::vector<double> sorted_sigma(n);
    out.u = Tensor::zeros({m, n});
    for (std::size_t jj = 0; jj < n; ++jj) {
        const std::size_t j = order[jj];
        sorted_sigma[jj] = out.sigma[j];
        if (out.sigma[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) out.u.at(i, jj) = w[j][i] / out.sigma[j];
        }
    }
    out.sigma = std::move(sorted_sigma);
    return out;
}

/// Spectral condition number sigma_max / sigma_min.
inline double condition_number(const Tensor& a) {
    JacobiSvd svd = jacobi_svd(a);
    const double smax = svd.sigma.front();
    const double smin = svd.sigma.back();
    if (smin <= 0.0) return std::numeric_limits<double>::infinity();
    return smax / smin;
}

/// Deterministic random orthonormal frame: QR (modified Gram-Schmidt with
/// re-orthogonalization) of an n x k matrix of draws from `next_normal`.
/// Columns of the result are orthonormal.
template <typename NormalFn>
inline Tensor random_orthonormal_columns(std::size_t n, std::size_t k, NormalFn&& next_normal) {
    if (k > n) throw ValidationError("random_orthonormal_columns: k > n");
    Tensor q = Tensor::zeros({n, k});
    std::vector<double> col(n);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < n; ++i) col[i] = next_normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t jj = 0; jj < j; ++jj) {
                double proj = 0.0;
                for (std::size_t i = 0; i < n; ++i) proj += q.at(i, jj) * col[i];
                for (std::size_t i = 0; i < n; ++i) col[i] -= proj * q.at(i, jj);
            }
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < n; ++i) nrm += col[i] * col[i];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) throw RuntimeFailure("random_orthonormal_columns: degenerate draw");
        for (std::size_t i = 0; i < n; ++i) q.at(i, j) = col[i] / nrm;
    }
    return q;
}

}  // namespace culb
