#pragma once

// Brute-force spectral oracle for the property suites: classic cyclic Jacobi
// rotations on symmetric matrices. Deliberately independent of the library's
// power-iteration/RQI path; only used to cross-check it.

#include <slens/mat.hpp>

#include <vector>

namespace slens::oracle {

struct sym_eigen {
    std::vector<double> values;  // descending
    matd vectors;                // column j is the eigenvector of values[j]
};

// full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps
sym_eigen jacobi_eigen_sym(const matd & a, int max_sweeps = 64, double tol = 1e-14);

// all singular values of M (descending), via Jacobi on M^T M
std::vector<double> jacobi_singular_values(const matf & m);

// leading right singular vector of M per the oracle
vecf jacobi_leading_right_vector(const matf & m);

} // namespace slens::oracle
