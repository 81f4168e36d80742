#include "slens/linalg.hpp"

#include "slens/errors.hpp"
#include "slens/rng.hpp"

#include <algorithm>
#include <cmath>

namespace slens {

bool sign_canonicalize(vecf & v) {
    size_t best = 0;
    float mag = 0.0f;
    for (size_t i = 0; i < v.size(); ++i) {
        float a = std::fabs(v[i]);
        if (a > mag) {
            mag = a;
            best = i;
        }
    }
    if (!v.empty() && v[best] < 0.0f) {
        for (auto & x : v) {
            x = -x;
        }
        return true;
    }
    return false;
}

double acute_angle(const float * u, const float * v, int64_t n) {
    double nu = norm2(u, n);
    double nv = norm2(v, n);
    if (nu == 0.0 || nv == 0.0) {
        throw error(errc::domain, "acute_angle: zero vector");
    }
    double c = std::fabs(dot(u, v, n)) / (nu * nv);
    c = std::min(c, 1.0);
    return std::acos(c) * 180.0 / M_PI;
}

double acute_angle(const vecf & u, const vecf & v) {
    if (u.size() != v.size()) {
        throw error(errc::shape, "acute_angle: dimension mismatch");
    }
    return acute_angle(u.data(), v.data(), int64_t(u.size()));
}

static void normalize(vecd & v) {
    double n = norm2(v);
    if (n > 0.0) {
        for (auto & x : v) {
            x /= n;
        }
    }
}

// project out span(vs) from w, twice for numerical hygiene
static void orthogonalize(vecd & w, const std::vector<vecd> & vs) {
    for (int pass = 0; pass < 2; ++pass) {
        for (const auto & v : vs) {
            double c = dot(w, v);
            for (size_t i = 0; i < w.size(); ++i) {
                w[i] -= c * v[i];
            }
        }
    }
}

bool lu_solve_inplace(matd & a, vecd & b) {
    const int64_t n = a.rows;
    for (int64_t col = 0; col < n; ++col) {
        int64_t pr = col;
        double best = std::fabs(a.at(col, col));
        for (int64_t r = col + 1; r < n; ++r) {
            double v = std::fabs(a.at(r, col));
            if (v > best) {
                best = v;
                pr = r;
            }
        }
        if (best < 1e-300) {
            return false;
        }
        if (pr != col) {
            for (int64_t j = 0; j < n; ++j) {
                std::swap(a.at(col, j), a.at(pr, j));
            }
            std::swap(b[size_t(col)], b[size_t(pr)]);
        }
        const double pivot = a.at(col, col);
        for (int64_t r = col + 1; r < n; ++r) {
            double f = a.at(r, col) / pivot;
            if (f == 0.0) {
                continue;
            }
            a.at(r, col) = 0.0;
            for (int64_t j = col + 1; j < n; ++j) {
                a.at(r, j) -= f * a.at(col, j);
            }
            b[size_t(r)] -= f * b[size_t(col)];
        }
    }
    for (int64_t r = n - 1; r >= 0; --r) {
        double s = b[size_t(r)];
        for (int64_t j = r + 1; j < n; ++j) {
            s -= a.at(r, j) * b[size_t(j)];
        }
        b[size_t(r)] = s / a.at(r, r);
    }
    return true;
}

namespace {

struct triplet_d {
    double sigma = 0.0;
    vecd u, v;
    double residual = 0.0;
    bool converged = false;
};

struct svd_workspace {
    const matd * m = nullptr;
    const matd * gram = nullptr; // M^T M, formed once when n is small enough
    double frob = 0.0;
};

// residual of the triplet derived from a candidate right vector
triplet_d make_triplet(const svd_workspace & ws, const vecd & v) {
    triplet_d t;
    t.v = v;
    vecd mv = matvec(*ws.m, v);
    t.sigma = norm2(mv);
    if (t.sigma > 0.0) {
        t.u = mv;
        for (auto & x : t.u) {
            x /= t.sigma;
        }
        vecd mtu = matvec_t(*ws.m, t.u);
        double r2 = 0.0;
        for (size_t i = 0; i < mtu.size(); ++i) {
            double d = mtu[i] - t.sigma * v[i];
            r2 += d * d;
        }
        t.residual = std::sqrt(r2);
    } else {
        t.u.assign(size_t(ws.m->rows), 0.0);
        t.residual = 0.0;
    }
    return t;
}

vecd apply_gram(const svd_workspace & ws, const vecd & v) {
    if (ws.gram) {
        return matvec(*ws.gram, v);
    }
    vecd mv = matvec(*ws.m, v);
    return matvec_t(*ws.m, mv);
}

// Rayleigh-quotient steps on M^T M; the rescue path when the plain power
// iteration stalls on a tiny spectral gap. Stays inside the deflated
// complement.
bool rqi_polish(const svd_workspace & ws, vecd & v, const std::vector<vecd> & found,
                double goal) {
    if (!ws.gram) {
        return false;
    }
    const int64_t n = ws.gram->rows;
    double bump = 0.0;
    for (int step = 0; step < 25; ++step) {
        vecd gv = apply_gram(ws, v);
        double lam = dot(v, gv);
        matd a = *ws.gram;
        const double shift = lam + bump;
        for (int64_t i = 0; i < n; ++i) {
            a.at(i, i) -= shift;
        }
        vecd z = v;
        if (!lu_solve_inplace(a, z)) {
            bump += std::max(1e-12 * ws.frob * ws.frob, 1e-300);
            continue;
        }
        bump = 0.0;
        orthogonalize(z, found);
        double zn = norm2(z);
        if (!(zn > 0.0) || !std::isfinite(zn)) {
            return false;
        }
        for (auto & x : z) {
            x /= zn;
        }
        if (dot(z, v) < 0.0) {
            for (auto & x : z) {
                x = -x;
            }
        }
        v = z;
        triplet_d t = make_triplet(ws, v);
        if (t.residual <= goal) {
            return true;
        }
    }
    return false;
}

// One Rayleigh–Ritz step on span{v, residual direction}: re-aims v at the
// dominant mix when two singular values are nearly tied. Closed-form 2x2,
// no external solver involved.
void rr2_step(const svd_workspace & ws, vecd & v, const std::vector<vecd> & found) {
    vecd g1 = apply_gram(ws, v);
    orthogonalize(g1, found);
    const double h11 = dot(v, g1);
    vecd r = g1;
    for (size_t i = 0; i < r.size(); ++i) {
        r[i] -= h11 * v[i];
    }
    double rn = norm2(r);
    if (rn <= 1e-14 * std::max(std::fabs(h11), 1.0)) {
        return; // already an eigenvector of the projected problem
    }
    for (auto & x : r) {
        x /= rn;
    }
    vecd gr = apply_gram(ws, r);
    orthogonalize(gr, found);
    const double h12 = dot(v, gr);
    const double h22 = dot(r, gr);

    const double mid = 0.5 * (h11 + h22);
    const double disc = std::sqrt(0.25 * (h11 - h22) * (h11 - h22) + h12 * h12);
    const double mu = mid + disc; // largest eigenvalue of the 2x2 section
    // eigenvector (c, s) of [[h11,h12],[h12,h22]] for mu
    double c, s;
    if (std::fabs(h12) > 1e-300) {
        c = h12;
        s = mu - h11;
    } else {
        c = h11 >= h22 ? 1.0 : 0.0;
        s = h11 >= h22 ? 0.0 : 1.0;
    }
    double nn = std::sqrt(c * c + s * s);
    c /= nn;
    s /= nn;
    for (size_t i = 0; i < v.size(); ++i) {
        v[i] = c * v[i] + s * r[i];
    }
    normalize(v);
}

// After a candidate converged, probe the deflated complement for a larger
// singular value; returns the competing iterate when one is found so the
// caller can restart toward it.
bool verify_leading(const svd_workspace & ws, double sigma, const vecd & v,
                    const std::vector<vecd> & found, double tol, uint64_t probe_seed,
                    vecd & competitor) {
    std::vector<vecd> defl = found;
    defl.push_back(v);
    xorshift_rng rng(probe_seed);
    vecd p(v.size(), 0.0);
    for (auto & x : p) {
        x = rng.uniform(-1.0, 1.0);
    }
    orthogonalize(p, defl);
    double pn = norm2(p);
    if (pn < 1e-12) {
        return true;
    }
    for (auto & x : p) {
        x /= pn;
    }
    double lam = 0.0;
    for (int it = 0; it < 40; ++it) {
        vecd w = apply_gram(ws, p);
        orthogonalize(w, defl);
        lam = dot(p, w);
        double wn = norm2(w);
        if (wn <= 0.0) {
            return true;
        }
        for (auto & x : w) {
            x /= wn;
        }
        p = w;
    }
    double sig_est = std::sqrt(std::max(lam, 0.0));
    if (sig_est > sigma * (1.0 + 10.0 * tol) + 10.0 * tol * ws.frob) {
        competitor = p;
        return false;
    }
    return true;
}

// deflated power iteration with stall-triggered Rayleigh–Ritz re-aiming and
// an RQI polish
triplet_d iterate_triplet(const svd_workspace & ws, vecd v, const std::vector<vecd> & found,
                          double tol, int max_iter) {
    orthogonalize(v, found);
    normalize(v);
    if (norm2(v) == 0.0) {
        triplet_d t;
        t.v.assign(v.size(), 0.0);
        t.u.assign(size_t(ws.m->rows), 0.0);
        return t;
    }

    // the public contract is tol * |M|_F; iterate deeper so that deflating
    // against this triplet does not push later ones over their budget
    const double goal = tol * std::max(ws.frob, 1e-300);
    const double goal_inner = goal / 50.0;
    double last_resid = -1.0;
    int stall_checks = 0;
    int rescue_rounds = 0;

    triplet_d best;
    best.residual = 1e300;

    for (int it = 0; it < max_iter; ++it) {
        vecd w = apply_gram(ws, v);
        orthogonalize(w, found);
        double wn = norm2(w);
        if (wn <= ws.frob * ws.frob * 1e-28 || ws.frob == 0.0) {
            // zero map on the deflated complement
            triplet_d t;
            t.sigma = 0.0;
            t.v = v;
            t.u.assign(size_t(ws.m->rows), 0.0);
            t.converged = true;
            return t;
        }
        for (auto & x : w) {
            x /= wn;
        }
        v = w;

        if (it % 5 == 4 || it == max_iter - 1) {
            triplet_d t = make_triplet(ws, v);
            if (t.residual < best.residual) {
                best = t;
            }
            if (t.residual <= goal_inner) {
                t.converged = true;
                return t;
            }
            if (last_resid >= 0.0 && t.residual > 0.9 * last_resid) {
                ++stall_checks;
            } else {
                stall_checks = 0;
            }
            last_resid = t.residual;
            if (stall_checks >= 2) {
                for (int rr = 0; rr < 4; ++rr) {
                    rr2_step(ws, v, found);
                }
                triplet_d t2 = make_triplet(ws, v);
                if (t2.residual < best.residual) {
                    best = t2;
                }
                if (t2.residual <= goal_inner) {
                    t2.converged = true;
                    return t2;
                }
                if (rqi_polish(ws, v, found, goal_inner)) {
                    triplet_d p = make_triplet(ws, v);
                    p.converged = true;
                    return p;
                }
                triplet_d after = make_triplet(ws, v);
                if (after.residual < best.residual) {
                    best = after;
                }
                stall_checks = 0;
                last_resid = after.residual;
                if (++rescue_rounds >= 3 && best.residual <= goal) {
                    // deeper accuracy is blocked (deflation leakage floor);
                    // the public tolerance is met
                    best.converged = true;
                    return best;
                }
            }
        }
    }
    best.converged = best.residual <= goal;
    return best;
}

vecd canonical_fill(int64_t n, int64_t idx) {
    vecd e(size_t(n), 0.0);
    e[size_t(idx % n)] = 1.0;
    return e;
}

} // namespace

std::vector<svd_triplet> leading_singular_triplets(const matf & m, int k, const svd_options & opt) {
    const int64_t nrows = m.rows, ncols = m.cols;
    if (nrows < 1 || ncols < 1) {
        throw error(errc::shape, "leading_singular_triplets: empty matrix");
    }
    if (k < 1 || int64_t(k) > std::min(nrows, ncols)) {
        throw error(errc::input, "leading_singular_triplets: k out of range");
    }
    if (opt.tol <= 0.0) {
        throw error(errc::input, "leading_singular_triplets: tol must be positive");
    }

    matd md = to_f64(m);
    svd_workspace ws;
    ws.m = &md;
    ws.frob = frobenius_norm(md);
    matd gram;
    if (ncols <= 2048) {
        gram = gram_tn(md);
        ws.gram = &gram;
    }

    xorshift_rng rng(opt.seed);
    std::vector<vecd> found_v;
    std::vector<triplet_d> trips;

    for (int t = 0; t < k; ++t) {
        vecd v0(size_t(ncols), 0.0);
        for (auto & x : v0) {
            x = rng.uniform(-1.0, 1.0);
        }
        triplet_d trip = iterate_triplet(ws, v0, found_v, opt.tol, opt.max_iter);
        // the stall rescue may lock onto a non-leading value; probe the
        // complement and chase any larger competitor
        for (int swap = 0; swap < 4 && trip.sigma > 0.0; ++swap) {
            vecd competitor;
            if (verify_leading(ws, trip.sigma, trip.v, found_v, opt.tol,
                               opt.seed ^ (uint64_t(t) * 0x9E3779B9u + uint64_t(swap) + 1), competitor)) {
                break;
            }
            triplet_d other = iterate_triplet(ws, competitor, found_v, opt.tol, opt.max_iter);
            if (other.sigma > trip.sigma) {
                trip = std::move(other);
            } else {
                break;
            }
        }
        if (!trip.converged && ws.frob > 0.0) {
            throw convergence_error(
                "leading_singular_triplets: no convergence after " + std::to_string(opt.max_iter) +
                    " iterations (residual " + std::to_string(trip.residual) + ")",
                trip.residual, to_f32(trip.v), trip.sigma);
        }
        if (trip.sigma == 0.0) {
            // canonical direction in the null complement, lowest index first
            for (int64_t j = 0; j < ncols; ++j) {
                vecd e = canonical_fill(ncols, j);
                orthogonalize(e, found_v);
                if (norm2(e) > 0.5) {
                    normalize(e);
                    trip.v = e;
                    break;
                }
            }
            trip.u = canonical_fill(nrows, 0);
            trip.converged = true;
        }
        found_v.push_back(trip.v);
        trips.push_back(std::move(trip));
    }

    // Exact ties leave the direction inside the tied space arbitrary; resolve
    // them deterministically by restarting from canonical basis vectors. The
    // power map preserves relative components within the tied space, so the
    // restarted iterate is the tied-space vector closest to the lowest-index
    // basis vector (e.g. L = I resolves to e0, e1, ...).
    const double dtol = std::max(1e-9, opt.tol);
    std::vector<bool> tied(size_t(k), false);
    for (int t = 0; t < k; ++t) {
        if (trips[t].sigma == 0.0) {
            tied[size_t(t)] = true;
        }
        if (t + 1 < k && trips[t].sigma > 0.0 &&
            (trips[t].sigma - trips[t + 1].sigma) <= dtol * trips[t].sigma) {
            tied[size_t(t)] = true;
            tied[size_t(t + 1)] = true;
        }
    }
    for (int t = 0; t < k; ++t) {
        trips[t].converged = trips[t].converged || tied[size_t(t)];
        if (!tied[size_t(t)] || trips[t].sigma == 0.0) {
            continue;
        }
        std::vector<vecd> resolved;
        for (int s = 0; s < t; ++s) {
            resolved.push_back(trips[s].v);
        }
        for (int64_t j = 0; j < ncols; ++j) {
            vecd e = canonical_fill(ncols, j);
            orthogonalize(e, resolved);
            if (norm2(e) < 1e-3) {
                continue;
            }
            normalize(e);
            triplet_d cand = iterate_triplet(ws, e, resolved, opt.tol, opt.max_iter);
            if (cand.sigma >= trips[t].sigma * (1.0 - 4.0 * std::max(dtol, 1e-7))) {
                trips[t] = std::move(cand);
                break;
            }
        }
    }

    std::vector<svd_triplet> out;
    out.reserve(size_t(k));
    for (int t = 0; t < k; ++t) {
        svd_triplet s;
        s.sigma = trips[t].sigma;
        s.u = to_f32(trips[t].u);
        s.v = to_f32(trips[t].v);
        s.residual = trips[t].residual;
        s.degenerate = tied[size_t(t)];
        if (sign_canonicalize(s.u)) {
            for (auto & x : s.v) {
                x = -x; // keep M v = sigma u
            }
        }
        out.push_back(std::move(s));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const svd_triplet & a, const svd_triplet & b) { return a.sigma > b.sigma; });
    return out;
}

eigen_pair eigenpair_near(const matf & r, const vecf & v0, const eigen_options & opt) {
    const int64_t n = r.rows;
    if (r.rows != r.cols) {
        throw error(errc::shape, "eigenpair_near: matrix not square");
    }
    if (int64_t(v0.size()) != n) {
        throw error(errc::shape, "eigenpair_near: v0 dimension mismatch");
    }
    {
        double nv = norm2(v0);
        if (std::fabs(nv - 1.0) > 1e-4) {
            throw error(errc::input, "eigenpair_near: v0 must be unit length");
        }
    }

    matd rd = to_f64(r);
    const double frob = frobenius_norm(rd);

    vecd w = to_f64(v0);
    normalize(w);

    auto rayleigh = [&](const vecd & x) {
        vecd rx = matvec(rd, x);
        return dot(x, rx);
    };
    auto resid_of = [&](const vecd & x, double lam) {
        vecd rx = matvec(rd, x);
        double s = 0.0;
        for (size_t i = 0; i < rx.size(); ++i) {
            double d = rx[i] - lam * x[i];
            s += d * d;
        }
        return std::sqrt(s);
    };

    double lambda = rayleigh(w);
    double resid = resid_of(w, lambda);

    vecd best_w = w;
    double best_lambda = lambda;
    double best_resid = resid;
    int plateau = 0;

    const double goal = opt.tol * std::max(frob, 1e-300);

    if (frob == 0.0 || resid <= goal) {
        eigen_pair out;
        out.lambda = lambda;
        out.w = to_f32(w);
        out.residual = resid;
        out.converged = true;
        sign_canonicalize(out.w);
        return out;
    }

    double shift_bump = 0.0;
    for (int it = 0; it < opt.max_iter; ++it) {
        matd a = rd;
        const double shift = lambda + shift_bump;
        for (int64_t i = 0; i < n; ++i) {
            a.at(i, i) -= shift;
        }
        vecd z = w;
        if (!lu_solve_inplace(a, z)) {
            // singular shifted solve: nudge the shift and retry (not an error)
            shift_bump += 1e-8 * std::max(frob, 1.0);
            continue;
        }
        shift_bump = 0.0;
        double zn = norm2(z);
        if (!(zn > 0.0) || !std::isfinite(zn)) {
            shift_bump += 1e-8 * std::max(frob, 1.0);
            continue;
        }
        for (auto & x : z) {
            x /= zn;
        }
        if (dot(z, w) < 0.0) {
            for (auto & x : z) {
                x = -x;
            }
        }
        w = z;
        lambda = rayleigh(w);
        resid = resid_of(w, lambda);

        if (resid < best_resid) {
            best_resid = resid;
            best_lambda = lambda;
            best_w = w;
            plateau = 0;
        } else {
            ++plateau;
        }
        if (resid <= goal) {
            eigen_pair out;
            out.lambda = lambda;
            out.w = to_f32(w);
            out.residual = resid;
            out.converged = true;
            sign_canonicalize(out.w);
            return out;
        }
        if (plateau >= 5) {
            // stalled (typically a complex pair); hand back the best iterate
            eigen_pair out;
            out.lambda = best_lambda;
            out.w = to_f32(best_w);
            out.residual = best_resid;
            out.converged = false;
            sign_canonicalize(out.w);
            return out;
        }
    }
    throw convergence_error("eigenpair_near: max_iter exceeded (best residual " +
                                std::to_string(best_resid) + ")",
                            best_resid, to_f32(best_w), best_lambda);
}

namespace {

// Cholesky of an SPD matrix; returns false if a pivot is non-positive.
bool cholesky_inplace(matd & a) {
    const int64_t n = a.rows;
    for (int64_t j = 0; j < n; ++j) {
        double d = a.at(j, j);
        for (int64_t k = 0; k < j; ++k) {
            d -= a.at(j, k) * a.at(j, k);
        }
        if (d <= 0.0 || !std::isfinite(d)) {
            return false;
        }
        d = std::sqrt(d);
        a.at(j, j) = d;
        for (int64_t i = j + 1; i < n; ++i) {
            double s = a.at(i, j);
            for (int64_t k = 0; k < j; ++k) {
                s -= a.at(i, k) * a.at(j, k);
            }
            a.at(i, j) = s / d;
        }
    }
    return true;
}

void chol_solve(const matd & l, vecd & b) {
    const int64_t n = l.rows;
    for (int64_t i = 0; i < n; ++i) {
        double s = b[size_t(i)];
        for (int64_t k = 0; k < i; ++k) {
            s -= l.at(i, k) * b[size_t(k)];
        }
        b[size_t(i)] = s / l.at(i, i);
    }
    for (int64_t i = n - 1; i >= 0; --i) {
        double s = b[size_t(i)];
        for (int64_t k = i + 1; k < n; ++k) {
            s -= l.at(k, i) * b[size_t(k)];
        }
        b[size_t(i)] = s / l.at(i, i);
    }
}

// crude spectral condition estimate from a few power/inverse-power rounds
double condition_estimate(const matd & g, const matd & l) {
    const int64_t n = g.rows;
    xorshift_rng rng(0xC0DDu);
    vecd v(size_t(n), 0.0);
    for (auto & x : v) {
        x = rng.uniform(-1.0, 1.0);
    }
    normalize(v);
    double lmax = 0.0;
    for (int it = 0; it < 8; ++it) {
        vecd w = matvec(g, v);
        lmax = norm2(w);
        if (lmax == 0.0) {
            return 1e300;
        }
        for (auto & x : w) {
            x /= lmax;
        }
        v = w;
    }
    vecd u(size_t(n), 0.0);
    for (auto & x : u) {
        x = rng.uniform(-1.0, 1.0);
    }
    normalize(u);
    double inv_norm = 1.0;
    for (int it = 0; it < 8; ++it) {
        chol_solve(l, u);
        inv_norm = norm2(u);
        if (inv_norm == 0.0) {
            return 1e300;
        }
        for (auto & x : u) {
            x /= inv_norm;
        }
    }
    double lmin = 1.0 / inv_norm;
    return lmax / lmin;
}

} // namespace

matf least_squares_fit(const matf & x, const matf & y, double ridge) {
    if (x.cols != y.cols) {
        throw error(errc::shape, "least_squares_fit: X and Y must have matching sample counts");
    }
    if (x.cols < x.rows) {
        throw error(errc::input, "least_squares_fit: need at least as many samples as input dims");
    }
    if (ridge < 0.0) {
        throw error(errc::input, "least_squares_fit: ridge must be non-negative");
    }
    const int64_t n = x.rows;

    matd xd = to_f64(x);
    matd g = matmul_nt(xd, xd); // X X^T, n x n
    for (int64_t i = 0; i < n; ++i) {
        g.at(i, i) += ridge;
    }

    matd l = g;
    if (!cholesky_inplace(l)) {
        throw error(errc::ill_conditioned,
                    "least_squares_fit: X X^T + ridge I is not positive definite; increase ridge");
    }
    double cond = condition_estimate(g, l);
    if (cond > 1e12) {
        throw error(errc::ill_conditioned,
                    "least_squares_fit: condition estimate " + std::to_string(cond) +
                        " exceeds 1e12; increase ridge");
    }

    matd yd = to_f64(y);
    matd b = matmul_nt(yd, xd); // Y X^T, p x n
    matf j(y.rows, n);
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (int64_t p = 0; p < b.rows; ++p) {
        vecd row(size_t(n), 0.0);
        for (int64_t c = 0; c < n; ++c) {
            row[size_t(c)] = b.at(p, c);
        }
        chol_solve(l, row); // G symmetric: row . G^{-1} via one solve
        for (int64_t c = 0; c < n; ++c) {
            j.at(p, c) = float(row[size_t(c)]);
        }
    }
    return j;
}

} // namespace slens
