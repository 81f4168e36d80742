#include "slens/mat.hpp"

#include <atomic>
#include <cmath>
#include <thread>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace slens {

static std::atomic<int> g_threads{0};

void set_num_threads(int n) {
    g_threads.store(n < 0 ? 0 : n);
#if defined(_OPENMP)
    if (n > 0) {
        omp_set_num_threads(n);
    }
#endif
}

int num_threads() {
    int n = g_threads.load();
    if (n > 0) {
        return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : int(hc);
}

// Fixed 4-lane accumulation: the summation order depends only on n, never on
// threading, so every reduction is reproducible.
template <typename T>
static double dot_impl(const T * a, const T * b, int64_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += double(a[i + 0]) * double(b[i + 0]);
        s1 += double(a[i + 1]) * double(b[i + 1]);
        s2 += double(a[i + 2]) * double(b[i + 2]);
        s3 += double(a[i + 3]) * double(b[i + 3]);
    }
    for (; i < n; ++i) {
        s0 += double(a[i]) * double(b[i]);
    }
    return ((s0 + s1) + (s2 + s3));
}

double dot(const float * a, const float * b, int64_t n) { return dot_impl(a, b, n); }
double dot(const double * a, const double * b, int64_t n) { return dot_impl(a, b, n); }

double norm2(const float * v, int64_t n) { return std::sqrt(dot_impl(v, v, n)); }
double norm2(const double * v, int64_t n) { return std::sqrt(dot_impl(v, v, n)); }

template <typename T>
static void check_mul(const basic_mat<T> & a, const basic_mat<T> & b, bool bt) {
    int64_t inner = bt ? b.cols : b.rows;
    if (a.cols != inner) {
        throw error(errc::shape, "matmul: inner dimensions mismatch (" + std::to_string(a.cols) +
                                     " vs " + std::to_string(inner) + ")");
    }
}

// C(i,:) += A(i,k) * B(k,:) with k ascending; parallel over i only.
template <typename T>
static basic_mat<T> matmul_impl(const basic_mat<T> & a, const basic_mat<T> & b) {
    check_mul(a, b, false);
    basic_mat<T> c(a.rows, b.cols);
    const int64_t m = a.rows, n = b.cols, kk = a.cols;
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (int64_t i = 0; i < m; ++i) {
        T * crow = c.row(i);
        const T * arow = a.row(i);
        for (int64_t k = 0; k < kk; ++k) {
            const T av = arow[k];
            if (av == T(0)) {
                continue;
            }
            const T * brow = b.row(k);
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

template <typename T>
static basic_mat<T> matmul_nt_impl(const basic_mat<T> & a, const basic_mat<T> & b) {
    check_mul(a, b, true);
    basic_mat<T> c(a.rows, b.rows);
    const int64_t m = a.rows, n = b.rows, kk = a.cols;
    if (m >= n) {
#pragma omp parallel for schedule(static) num_threads(num_threads())
        for (int64_t i = 0; i < m; ++i) {
            T * crow = c.row(i);
            const T * arow = a.row(i);
            for (int64_t j = 0; j < n; ++j) {
                crow[j] = T(dot(arow, b.row(j), kk));
            }
        }
    } else {
        // tall B, few rows in A (e.g. single-token activations): parallelize over j
#pragma omp parallel for schedule(static) num_threads(num_threads())
        for (int64_t j = 0; j < n; ++j) {
            const T * brow = b.row(j);
            for (int64_t i = 0; i < m; ++i) {
                c.at(i, j) = T(dot(a.row(i), brow, kk));
            }
        }
    }
    return c;
}

template <typename T>
static basic_mat<T> matmul_tn_impl(const basic_mat<T> & a, const basic_mat<T> & b) {
    if (a.rows != b.rows) {
        throw error(errc::shape, "matmul_tn: inner dimensions mismatch");
    }
    basic_mat<T> c(a.cols, b.cols);
    const int64_t m = a.cols, n = b.cols, kk = a.rows;
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (int64_t i = 0; i < m; ++i) {
        T * crow = c.row(i);
        for (int64_t k = 0; k < kk; ++k) {
            const T av = a.at(k, i);
            if (av == T(0)) {
                continue;
            }
            const T * brow = b.row(k);
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

matd gram_tn(const matd & m) {
    matd g(m.cols, m.cols);
    const int64_t n = m.cols, kk = m.rows;
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (int64_t i = 0; i < n; ++i) {
        double * grow = g.row(i);
        for (int64_t k = 0; k < kk; ++k) {
            const double av = m.at(k, i);
            if (av == 0.0) {
                continue;
            }
            const double * mrow = m.row(k);
            for (int64_t j = i; j < n; ++j) {
                grow[j] += av * mrow[j];
            }
        }
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            g.at(i, j) = g.at(j, i);
        }
    }
    return g;
}

matf matmul(const matf & a, const matf & b) { return matmul_impl(a, b); }
matf matmul_nt(const matf & a, const matf & b) { return matmul_nt_impl(a, b); }
matf matmul_tn(const matf & a, const matf & b) { return matmul_tn_impl(a, b); }
matd matmul(const matd & a, const matd & b) { return matmul_impl(a, b); }
matd matmul_nt(const matd & a, const matd & b) { return matmul_nt_impl(a, b); }

vecf matvec(const matf & m, const vecf & x) {
    if (int64_t(x.size()) != m.cols) {
        throw error(errc::shape, "matvec: dimension mismatch");
    }
    vecf y(size_t(m.rows), 0.0f);
    for (int64_t i = 0; i < m.rows; ++i) {
        y[size_t(i)] = float(dot(m.row(i), x.data(), m.cols));
    }
    return y;
}

vecd matvec(const matd & m, const vecd & x) {
    if (int64_t(x.size()) != m.cols) {
        throw error(errc::shape, "matvec: dimension mismatch");
    }
    vecd y(size_t(m.rows), 0.0);
    for (int64_t i = 0; i < m.rows; ++i) {
        y[size_t(i)] = dot(m.row(i), x.data(), m.cols);
    }
    return y;
}

vecd matvec_t(const matd & m, const vecd & x) {
    if (int64_t(x.size()) != m.rows) {
        throw error(errc::shape, "matvec_t: dimension mismatch");
    }
    vecd y(size_t(m.cols), 0.0);
    for (int64_t i = 0; i < m.rows; ++i) {
        const double xi = x[size_t(i)];
        if (xi == 0.0) {
            continue;
        }
        const double * row = m.row(i);
        for (int64_t j = 0; j < m.cols; ++j) {
            y[size_t(j)] += xi * row[j];
        }
    }
    return y;
}

double frobenius_norm(const matf & m) { return norm2(m.data.data(), int64_t(m.data.size())); }
double frobenius_norm(const matd & m) { return norm2(m.data.data(), int64_t(m.data.size())); }

matf to_f32(const matd & m) {
    matf r(m.rows, m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) {
        r.data[i] = float(m.data[i]);
    }
    return r;
}

matd to_f64(const matf & m) {
    matd r(m.rows, m.cols);
    for (size_t i = 0; i < m.data.size(); ++i) {
        r.data[i] = double(m.data[i]);
    }
    return r;
}

vecf to_f32(const vecd & v) {
    vecf r(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        r[i] = float(v[i]);
    }
    return r;
}

vecd to_f64(const vecf & v) {
    vecd r(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        r[i] = double(v[i]);
    }
    return r;
}

matf identity(int64_t n) {
    matf m(n, n);
    for (int64_t i = 0; i < n; ++i) {
        m.at(i, i) = 1.0f;
    }
    return m;
}

matf transpose(const matf & m) {
    matf r(m.cols, m.rows);
    for (int64_t i = 0; i < m.rows; ++i) {
        for (int64_t j = 0; j < m.cols; ++j) {
            r.at(j, i) = m.at(i, j);
        }
    }
    return r;
}

} // namespace slens
