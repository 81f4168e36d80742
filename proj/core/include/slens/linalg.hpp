#pragma once

#include "slens/mat.hpp"

#include <optional>

namespace slens {

struct svd_triplet {
    double sigma = 0.0;
    vecf u; // left, unit
    vecf v; // right, unit
    double residual = 0.0; // max(|Mv - sigma u|, |M^T u - sigma v|)
    bool degenerate = false; // sigma tied with the next one (or sigma == 0)
};

struct eigen_pair {
    double lambda = 0.0;
    vecf w; // unit
    double residual = 0.0; // |R w - lambda w|, recorded honestly
    bool converged = false;
};

struct svd_options {
    double tol = 1e-7;      // relative to |M|_F
    int max_iter = 10000;   // per triplet
    uint64_t seed = 0x5EED5EEDull;
};

// Power iteration on M^T M with Gram–Schmidt deflation. Triplets come back in
// non-increasing sigma order; vectors are sign-canonicalized on u (v flips
// with u so that M v = sigma u keeps holding). Exactly degenerate leading
// spaces resolve to the direction best aligned with the lowest-index basis
// vector, so reports are deterministic.
std::vector<svd_triplet> leading_singular_triplets(const matf & m, int k,
                                                   const svd_options & opt = {});

inline svd_triplet leading_singular_triplet(const matf & m, const svd_options & opt = {}) {
    return leading_singular_triplets(m, 1, opt)[0];
}

struct eigen_options {
    double tol = 1e-7;    // relative to |R|_F
    int max_iter = 200;
};

// Rayleigh-quotient iteration started at v0 (unit). Converges to the real
// eigenpair nearest the start; a residual plateau over 5 iterations returns
// the best iterate (converged=false) instead of erroring, max_iter throws
// convergence_error carrying the best iterate.
eigen_pair eigenpair_near(const matf & r, const vecf & v0, const eigen_options & opt = {});

// J minimizing |J X - Y|_F^2 + ridge |J|_F^2 via SPD solve of (X X^T + ridge I).
// X is n x M (columns are samples), Y is p x M.
matf least_squares_fit(const matf & x, const matf & y, double ridge);

// arccos(|u.v| / (|u||v|)) in degrees, clamped to [0, 90]
double acute_angle(const vecf & u, const vecf & v);
double acute_angle(const float * u, const float * v, int64_t n);

// Flip a vector in place so its largest-magnitude entry (lowest index on
// ties) is non-negative. Returns true if it flipped.
bool sign_canonicalize(vecf & v);

// Dense LU solve with partial pivoting; a = n x n (destroyed), b = rhs
// (overwritten with the solution). Returns false if a pivot underflows.
bool lu_solve_inplace(matd & a, vecd & b);

} // namespace slens
