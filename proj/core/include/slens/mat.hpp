#pragma once

#include "slens/errors.hpp"

#include <cstdint>
#include <cstring>
#include <vector>

namespace slens {

// Dense row-major matrix. Working precision for everything downstream of the
// checkpoint is fp32; fp64 is used only inside the spectral iterations.
template <typename T>
struct basic_mat {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<T> data;

    basic_mat() = default;
    basic_mat(int64_t r, int64_t c) : rows(r), cols(c), data(size_t(r) * size_t(c), T(0)) {}

    T & at(int64_t i, int64_t j) { return data[size_t(i) * size_t(cols) + size_t(j)]; }
    T at(int64_t i, int64_t j) const { return data[size_t(i) * size_t(cols) + size_t(j)]; }

    T * row(int64_t i) { return data.data() + size_t(i) * size_t(cols); }
    const T * row(int64_t i) const { return data.data() + size_t(i) * size_t(cols); }

    bool empty() const { return rows == 0 || cols == 0; }
};

using matf = basic_mat<float>;
using matd = basic_mat<double>;

using vecf = std::vector<float>;
using vecd = std::vector<double>;

// All kernels accumulate in a fixed order independent of the thread count, so
// results are bit-identical across runs and across --threads values.

// C = A * B
matf matmul(const matf & a, const matf & b);
// C = A * B^T  (rows of B are the contraction axis; the hot path for [T,d]x[out,d]^T)
matf matmul_nt(const matf & a, const matf & b);
// C = A^T * B
matf matmul_tn(const matf & a, const matf & b);

matd matmul(const matd & a, const matd & b);
matd matmul_nt(const matd & a, const matd & b);
// M^T M (n x n for an m x n input)
matd gram_tn(const matd & m);

// y = M * x
vecf matvec(const matf & m, const vecf & x);
vecd matvec(const matd & m, const vecd & x);
// y = M^T * x
vecd matvec_t(const matd & m, const vecd & x);

double dot(const float * a, const float * b, int64_t n);
double dot(const double * a, const double * b, int64_t n);
double norm2(const float * v, int64_t n);
double norm2(const double * v, int64_t n);

inline double dot(const vecf & a, const vecf & b) { return dot(a.data(), b.data(), int64_t(a.size())); }
inline double dot(const vecd & a, const vecd & b) { return dot(a.data(), b.data(), int64_t(a.size())); }
inline double norm2(const vecf & v) { return norm2(v.data(), int64_t(v.size())); }
inline double norm2(const vecd & v) { return norm2(v.data(), int64_t(v.size())); }

double frobenius_norm(const matf & m);
double frobenius_norm(const matd & m);

matf to_f32(const matd & m);
matd to_f64(const matf & m);
vecf to_f32(const vecd & v);
vecd to_f64(const vecf & v);

matf identity(int64_t n);
matf transpose(const matf & m);

// global knob for the data-parallel kernels; 0 = hardware concurrency
void set_num_threads(int n);
int  num_threads();

} // namespace slens
