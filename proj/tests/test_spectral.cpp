#include <doctest.h>

#include <slens/engine.hpp>
#include <slens/rng.hpp>
#include <slens/spectral.hpp>
#include <slens/synthkit.hpp>

#include "jacobi.hpp"
#include "helpers.hpp"

#include <algorithm>
#include <cmath>

using namespace slens;

static layer_linearization lin_from(const matf & l_mat, const matf & f_mat) {
    layer_linearization lin;
    lin.L = l_mat;
    lin.F = f_mat;
    lin.R = l_mat;
    for (int64_t i = 0; i < lin.R.rows; ++i) {
        lin.R.at(i, i) -= 1.0f;
    }
    return lin;
}

static vecf basis(int64_t d, int64_t i) {
    vecf v(size_t(d), 0.0f);
    v[size_t(i)] = 1.0f;
    return v;
}

TEST_CASE("defect direction of the identity layer is the first basis vector") {
    layer_linearization lin = lin_from(identity(4), matf(4, 4));
    svd_triplet t = layer_defect_direction(lin);
    CHECK(t.sigma == doctest::Approx(1.0));
    CHECK(t.degenerate);
    CHECK(t.u[0] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("defect direction of a planted rank-one bump matches the oracle") {
    xorshift_rng rng(33);
    const int64_t d = 16;
    vecf u(size_t(d), 0.0f), v(size_t(d), 0.0f);
    for (auto & x : u) {
        x = float(rng.gaussian());
    }
    double nu = norm2(u);
    for (auto & x : u) {
        x = float(double(x) / nu);
    }
    for (auto & x : v) {
        x = float(rng.gaussian());
    }
    double c = dot(u, v);
    for (size_t i = 0; i < v.size(); ++i) {
        v[i] -= float(c * double(u[i]));
    }
    double nv = norm2(v);
    for (auto & x : v) {
        x = float(double(x) / nv);
    }
    // the identity path tilts the top left vector by atan(1/sigma); a bump of
    // 120 keeps it within half a degree of u
    matf l = identity(d);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            l.at(i, j) += 120.0f * u[size_t(i)] * v[size_t(j)];
        }
    }
    layer_linearization lin = lin_from(l, matf(d, d));
    svd_triplet t = layer_defect_direction(lin);
    CHECK(acute_angle(t.u, u) <= 0.5);
    auto oracle_sv = oracle::jacobi_singular_values(l);
    CHECK(t.sigma == doctest::Approx(oracle_sv[0]).epsilon(1e-8));
}

TEST_CASE("angle profile: self-reference zero; dips only at the planted layers") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 41);
    report_options opt;
    opt.reference = m.truth.u;
    defect_report rep = build_defect_report(m.bundle, "planted", opt);

    std::vector<double> self_prof =
        defect_angle_profile(rep, rep.layers[size_t(ps.explosion_layer)].defect_direction);
    CHECK(self_prof[size_t(ps.explosion_layer)] == doctest::Approx(0.0).epsilon(1e-6));

    std::vector<double> prof = defect_angle_profile(rep, m.truth.u);
    for (int64_t l = 0; l < ps.n_layers; ++l) {
        if (l == ps.explosion_layer || l == ps.decay_layer) {
            CHECK(prof[size_t(l)] < 5.0);
        } else {
            CHECK(prof[size_t(l)] > 45.0);
        }
    }

    CHECK_THROWS_AS((void) defect_angle_profile(rep, vecf(3, 1.0f)), const error &);
}

TEST_CASE("random reference in high dimension is near-orthogonal to everything") {
    xorshift_rng rng(55);
    const int64_t d = 4096;
    vecf a(size_t(d), 0.0f), b(size_t(d), 0.0f);
    for (auto & x : a) {
        x = float(rng.gaussian());
    }
    double mean = 0.0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
        for (auto & x : b) {
            x = float(rng.gaussian());
        }
        mean += acute_angle(a, b);
    }
    mean /= trials;
    CHECK(mean >= 85.0);
}

TEST_CASE("decay eigen analysis basics") {
    const int64_t d = 8;
    vecf ref = basis(d, 2);

    matf r(d, d);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            r.at(i, j) = -ref[size_t(i)] * ref[size_t(j)];
        }
    }
    layer_linearization lin;
    lin.R = r;
    decay_result dr = decay_eigen_analysis(lin, ref);
    CHECK(dr.pair.lambda == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(dr.angle <= 1e-4);

    layer_linearization zero;
    zero.R = matf(d, d);
    decay_result z = decay_eigen_analysis(zero, ref);
    CHECK(z.pair.lambda == 0.0);
    CHECK(z.angle == doctest::Approx(0.0));
}

TEST_CASE("planted decay layer: eigenvalue and direction recovered") {
    planted_spec ps;
    ps.decay_lambda = -0.97;
    planted_model m = make_planted_model(ps, 42);
    fit_config cfg;
    layer_linearization lin = linearize_layer(m.bundle, ps.decay_layer, cfg);
    vecf ref = m.truth.u;
    xorshift_rng rng(4242);
    for (auto & x : ref) {
        x += float(0.05 * rng.gaussian());
    }
    double n = norm2(ref);
    for (auto & x : ref) {
        x = float(double(x) / n);
    }
    decay_result dr = decay_eigen_analysis(lin, ref);
    CHECK(dr.pair.lambda == doctest::Approx(ps.decay_lambda).epsilon(1e-3));
    CHECK(acute_angle(dr.pair.w, m.truth.u) <= 1.0);
}

TEST_CASE("explosion subspace: rank-one, zero, and planted cases") {
    xorshift_rng rng(77);
    const int64_t d = 12;
    vecf u = basis(d, 3), v(size_t(d), 0.0f);
    for (auto & x : v) {
        x = float(rng.gaussian());
    }
    v[3] = 0.0f;
    double nv = norm2(v);
    for (auto & x : v) {
        x = float(double(x) / nv);
    }
    matf f(d, d);
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            f.at(i, j) = 10.0f * u[size_t(i)] * v[size_t(j)];
        }
    }
    layer_linearization lin;
    lin.F = f;
    svd_triplet t = explosion_subspace(lin);
    CHECK(t.sigma == doctest::Approx(10.0).epsilon(1e-7));
    CHECK(acute_angle(t.v, v) <= 0.1);

    layer_linearization zero;
    zero.F = matf(d, d);
    svd_triplet tz = explosion_subspace(zero);
    CHECK(tz.sigma == 0.0);
    CHECK(tz.degenerate);
    CHECK(tz.v[0] == doctest::Approx(1.0)); // canonical basis vector

    planted_spec ps;
    planted_model m = make_planted_model(ps, 43);
    fit_config cfg;
    layer_linearization plin = linearize_layer(m.bundle, ps.explosion_layer, cfg);
    svd_triplet tp = explosion_subspace(plin);
    CHECK(acute_angle(tp.v, m.truth.v) <= 1.0);
}

TEST_CASE("ffn response spectrum: planted dominance and zero layers") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 44);
    fit_config cfg;
    layer_linearization lin = linearize_layer(m.bundle, ps.explosion_layer, cfg);
    auto trips = ffn_top_triplets(lin, 6);
    std::vector<vecf> inputs;
    for (const auto & t : trips) {
        inputs.push_back(t.v);
    }
    std::vector<double> norms = ffn_response_spectrum(m.bundle, ps.explosion_layer, inputs);
    REQUIRE(norms.size() == 6);
    std::vector<double> rest(norms.begin() + 1, norms.end());
    std::sort(rest.begin(), rest.end());
    double median = rest[rest.size() / 2];
    CHECK(norms[0] >= 10.0 * std::max(median, 1e-12));

    std::vector<double> zeros = ffn_response_spectrum(m.bundle, ps.decay_layer, inputs);
    for (double n : zeros) {
        CHECK(n <= 1e-9);
    }
}

TEST_CASE("explosion-trigger property on the linearized map") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 45);
    fit_config cfg;
    layer_linearization lin = linearize_layer(m.bundle, ps.explosion_layer, cfg);
    auto trips = ffn_top_triplets(lin, 6);
    std::vector<double> rest;
    for (size_t i = 1; i < trips.size(); ++i) {
        rest.push_back(trips[i].sigma);
    }
    std::sort(rest.begin(), rest.end());
    CHECK(trips[0].sigma >= 10.0 * std::max(rest[rest.size() / 2], 1e-12));
}

TEST_CASE("classification: planted layers exactly; flat traces classify nothing") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 46);
    report_options opt;
    opt.reference = m.truth.u;
    defect_report rep = build_defect_report(m.bundle, "planted", opt);
    norm_trace tr = forward_trace(m.bundle, {0, 5, 9, 12});

    layer_classification cls = classify_layers(rep, tr);
    CHECK(cls.explosion_layers == std::vector<int64_t>{ps.explosion_layer});
    CHECK(cls.decay_layers == std::vector<int64_t>{ps.decay_layer});
    CHECK(!cls.empty_warning);
    for (int64_t e : cls.explosion_layers) {
        for (int64_t dd : cls.decay_layers) {
            CHECK(e != dd);
        }
    }
    CHECK(cls.evidence.size() == 2);

    norm_trace flat = tr;
    for (auto & x : flat.norms.data) {
        x = 1.0f;
    }
    layer_classification none = classify_layers(rep, flat);
    CHECK(none.empty_warning);
    CHECK(none.explosion_layers.empty());
    CHECK(none.decay_layers.empty());

    planted_spec zs;
    zs.gain_sigma = 0.0;
    planted_model mz = make_planted_model(zs, 47);
    report_options zopt;
    zopt.reference = mz.truth.u;
    defect_report zrep = build_defect_report(mz.bundle, "flat", zopt);
    norm_trace ztr = forward_trace(mz.bundle, {0, 5, 9, 12});
    layer_classification zcls = classify_layers(zrep, ztr);
    CHECK(zcls.empty_warning);
}

TEST_CASE("report self-consistency and json round trip") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 48);
    report_options opt;
    opt.reference = m.truth.u;
    defect_report rep = build_defect_report(m.bundle, "planted-48", opt);

    for (const auto & rec : rep.layers) {
        CHECK(rec.angle_to_reference ==
              doctest::Approx(acute_angle(rec.defect_direction, rep.reference)).epsilon(1e-9));
        CHECK(rec.angle_to_reference >= 0.0);
        CHECK(rec.angle_to_reference <= 90.0);
        CHECK(rec.f1_fit_error >= 0.0);
        CHECK(rec.f1_fit_error <= 1.5);
        for (const vecf * v : {&rec.defect_direction, &rec.explosion_v1}) {
            float peak = 0.0f;
            size_t arg = 0;
            for (size_t i = 0; i < v->size(); ++i) {
                if (std::fabs((*v)[i]) > peak) {
                    peak = std::fabs((*v)[i]);
                    arg = i;
                }
            }
            CHECK((*v)[arg] >= 0.0f);
        }
    }

    defect_report back = defect_report::from_json(rep.to_json());
    CHECK(back.model_id == rep.model_id);
    CHECK(back.layers.size() == rep.layers.size());
    CHECK(back.reference == rep.reference);
    for (size_t i = 0; i < rep.layers.size(); ++i) {
        CHECK(back.layers[i].sigma1 == rep.layers[i].sigma1);
        CHECK(back.layers[i].defect_direction == rep.layers[i].defect_direction);
        REQUIRE(back.layers[i].decay.has_value() == rep.layers[i].decay.has_value());
        if (rep.layers[i].decay) {
            CHECK(back.layers[i].decay->pair.lambda == rep.layers[i].decay->pair.lambda);
        }
    }
}

TEST_CASE("sigma1 fallback reference lands on the explosion direction") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 49);
    report_options opt; // no reference, no corpus
    defect_report rep = build_defect_report(m.bundle, "planted", opt);
    CHECK(rep.reference_source == "sigma1-fallback");
    CHECK(acute_angle(rep.reference, m.truth.u) <= 1.0);
}

TEST_CASE("decay-layer property: orthogonal inputs stay near unit gain (large d)") {
    // the aux writer's overlap with random inputs scales as 1/sqrt(d); the
    // bound only has room in high dimension, as in the models it describes
    planted_spec ps;
    ps.d = 768;
    ps.d_ff = 1024;
    ps.vocab = 16;
    planted_model m = make_planted_model(ps, 50);
    fit_config cfg;
    layer_linearization lin = linearize_layer(m.bundle, ps.decay_layer, cfg);

    vecf ref = m.truth.u;
    decay_result dr = decay_eigen_analysis(lin, ref);
    CHECK(dr.pair.lambda < 0.0);
    CHECK(dr.pair.residual <= 1e-3 * frobenius_norm(lin.R));
    CHECK(dr.angle < 15.0);

    xorshift_rng rng(0xBEEF);
    for (int trial = 0; trial < 100; ++trial) {
        vecf x(size_t(ps.d), 0.0f);
        for (auto & e : x) {
            e = float(rng.gaussian());
        }
        double c = dot(x, dr.pair.w);
        for (size_t i = 0; i < x.size(); ++i) {
            x[i] -= float(c * double(dr.pair.w[i]));
        }
        double nx = norm2(x);
        vecf lx = matvec(lin.L, x);
        double ratio = norm2(lx) / nx;
        CHECK(ratio >= 0.5);
        CHECK(ratio <= 2.0);
    }
}
