#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "trace/common.hpp"
#include "trace/rng.hpp"

namespace trace {

using Vec = std::vector<double>;

// Dense row-major matrix. Weight matrices are stored out_dim x in_dim and act
// on column vectors (y = W x); attention key/value rows are computed per token
// as W e_i.
struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0) {}

    double& at(int i, int j) { return a[size_t(i) * cols + j]; }
    double at(int i, int j) const { return a[size_t(i) * cols + j]; }
    double* row(int i) { return a.data() + size_t(i) * cols; }
    const double* row(int i) const { return a.data() + size_t(i) * cols; }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    static Mat randn(int r, int c, double sigma, Rng& rng) {
        Mat m(r, c);
        for (auto& v : m.a) v = sigma * rng.gauss();
        return m;
    }
};

inline Vec vec_randn(int n, double sigma, Rng& rng) {
    Vec v(n);
    for (auto& x : v) x = sigma * rng.gauss();
    return v;
}

inline double dot(const Vec& x, const Vec& y) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); i++) s += x[i] * y[i];
    return s;
}

inline double norm2sq(const Vec& x) { return dot(x, x); }
inline double norm2(const Vec& x) { return std::sqrt(norm2sq(x)); }

inline void axpy(double a, const Vec& x, Vec& y) {
    for (size_t i = 0; i < x.size(); i++) y[i] += a * x[i];
}

inline Vec matvec(const Mat& M, const Vec& x) {
    Vec y(M.rows, 0.0);
    for (int i = 0; i < M.rows; i++) {
        const double* r = M.row(i);
        double s = 0.0;
        for (int j = 0; j < M.cols; j++) s += r[j] * x[j];
        y[i] = s;
    }
    return y;
}

// y = M^T x
inline Vec matvec_t(const Mat& M, const Vec& x) {
    Vec y(M.cols, 0.0);
    for (int i = 0; i < M.rows; i++) {
        const double* r = M.row(i);
        double xi = x[i];
        for (int j = 0; j < M.cols; j++) y[j] += r[j] * xi;
    }
    return y;
}

inline Mat matmul(const Mat& A, const Mat& B) {
    Mat C(A.rows, B.cols);
    for (int i = 0; i < A.rows; i++)
        for (int k = 0; k < A.cols; k++) {
            double aik = A.at(i, k);
            const double* br = B.row(k);
            double* cr = C.row(i);
            for (int j = 0; j < B.cols; j++) cr[j] += aik * br[j];
        }
    return C;
}

// M += s * u v^T
inline void add_outer(Mat& M, double s, const Vec& u, const Vec& v) {
    for (int i = 0; i < M.rows; i++) {
        double su = s * u[i];
        double* r = M.row(i);
        for (int j = 0; j < M.cols; j++) r[j] += su * v[j];
    }
}

inline double fro_norm(const Mat& M) {
    double s = 0.0;
    for (double v : M.a) s += v * v;
    return std::sqrt(s);
}

inline void normalize(Vec& v) {
    double n = norm2(v);
    for (auto& x : v) x /= n;
}

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm2(a) * norm2(b)); }

// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations,
// descending. Used for singular-value checks on rank-one updates.
inline std::vector<double> sym_eig(Mat A, int sweeps = 60) {
    int n = A.rows;
    for (int sweep = 0; sweep < sweeps; sweep++) {
        double off = 0.0;
        for (int p = 0; p < n; p++)
            for (int q = p + 1; q < n; q++) off += A.at(p, q) * A.at(p, q);
        if (off < 1e-30) break;
        for (int p = 0; p < n; p++)
            for (int q = p + 1; q < n; q++) {
                double apq = A.at(p, q);
                if (apq == 0.0) continue;
                double theta = (A.at(q, q) - A.at(p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; k++) {
                    double akp = A.at(k, p), akq = A.at(k, q);
                    A.at(k, p) = c * akp - s * akq;
                    A.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; k++) {
                    double apk = A.at(p, k), aqk = A.at(q, k);
                    A.at(p, k) = c * apk - s * aqk;
                    A.at(q, k) = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; i++) ev[i] = A.at(i, i);
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

// Singular values of M, descending: sqrt of the spectrum of the smaller Gram
// matrix.
inline std::vector<double> singular_values(const Mat& M) {
    bool wide = M.cols >= M.rows;
    int n = wide ? M.rows : M.cols;
    Mat G(n, n);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < n; j++) {
            double s = 0.0;
            if (wide)
                for (int k = 0; k < M.cols; k++) s += M.at(i, k) * M.at(j, k);
            else
                for (int k = 0; k < M.rows; k++) s += M.at(k, i) * M.at(k, j);
            G.at(i, j) = s;
        }
    auto ev = sym_eig(G);
    std::vector<double> sv(ev.size());
    for (size_t i = 0; i < ev.size(); i++) sv[i] = std::sqrt(std::max(0.0, ev[i]));
    return sv;
}

}  // namespace trace
