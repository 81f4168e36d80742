#include <doctest.h>

#include <slens/engine.hpp>
#include <slens/quant.hpp>
#include <slens/rng.hpp>
#include <slens/synthkit.hpp>

#include "helpers.hpp"

#include <cmath>
#include <limits>

using namespace slens;

TEST_CASE("rtn: zero tensor is degenerate") {
    vecf x(16, 0.0f);
    rtn_result r = quantize_rtn(x.data(), x.size(), 8);
    CHECK(r.params.degenerate);
    CHECK(r.params.delta == 1.0);
    for (int32_t q : r.q) {
        CHECK(q == 0);
    }
}

TEST_CASE("rtn: lattice-aligned tensor round trips exactly") {
    vecf x = {-127.0f, 127.0f, 64.0f, -3.0f, 0.0f};
    rtn_result r = quantize_rtn(x.data(), x.size(), 8);
    CHECK(r.params.delta == doctest::Approx(1.0));
    CHECK(r.q[0] == -127);
    CHECK(r.q[1] == 127);
    CHECK(r.saturated == 0);
    vecf back = dequantize(r);
    for (size_t i = 0; i < x.size(); ++i) {
        CHECK(back[i] == x[i]);
    }
}

TEST_CASE("rtn: round-trip error bounded by half a step") {
    xorshift_rng rng(0x0B17);
    for (int trial = 0; trial < 200; ++trial) {
        int bits = 2 + int(rng.below(8));
        size_t n = 1 + rng.below(256);
        vecf x(n, 0.0f);
        double scale = rng.uniform(1e-3, 1e3);
        for (auto & v : x) {
            v = float(rng.gaussian() * scale);
        }
        rtn_result r = quantize_rtn(x.data(), n, bits);
        vecf back = dequantize(r);
        for (size_t i = 0; i < n; ++i) {
            CHECK(std::fabs(double(x[i]) - double(back[i])) <=
                  r.params.delta / 2.0 + 1e-6 * r.params.delta);
        }
    }
}

TEST_CASE("rtn rejects non-finite input") {
    vecf x = {1.0f, std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS((void) quantize_rtn(x.data(), x.size(), 8), const error &);
}

TEST_CASE("smoothquant endpoints") {
    xorshift_rng rng(5);
    matf w(4, 3);
    for (auto & x : w.data) {
        x = float(rng.gaussian());
    }
    vecf am = {2.0f, 0.5f, 4.0f};

    matf w0 = w;
    smoothquant_scales s0 = smoothquant_transform(am, w0, 0.0);
    for (int64_t j = 0; j < 3; ++j) {
        float wmax = 0.0f;
        for (int64_t i = 0; i < 4; ++i) {
            wmax = std::max(wmax, std::fabs(w.at(i, j)));
        }
        CHECK(double(s0.scales[size_t(j)]) == doctest::Approx(1.0 / double(wmax)).epsilon(1e-6));
    }

    matf w1m = w;
    smoothquant_scales s1 = smoothquant_transform(am, w1m, 1.0);
    for (int64_t j = 0; j < 3; ++j) {
        CHECK(double(s1.scales[size_t(j)]) == doctest::Approx(double(am[size_t(j)])).epsilon(1e-6));
    }

    // zero activation channel keeps scale one
    vecf am0 = {0.0f, 1.0f, 1.0f};
    matf w2m = w;
    smoothquant_scales s2 = smoothquant_transform(am0, w2m, 0.5);
    CHECK(s2.scales[0] == 1.0f);
}

TEST_CASE("smoothquant composition invariance in full precision") {
    xorshift_rng rng(6);
    matf w(8, 8);
    for (auto & x : w.data) {
        x = float(rng.gaussian());
    }
    vecf am(8, 0.0f);
    for (auto & x : am) {
        x = float(std::fabs(rng.gaussian()) + 0.1);
    }
    matf ws = w;
    smoothquant_scales ss = smoothquant_transform(am, ws, 0.5);

    for (int trial = 0; trial < 50; ++trial) {
        vecf x(8, 0.0f);
        for (auto & v : x) {
            v = float(rng.gaussian());
        }
        vecf xs = x;
        for (size_t j = 0; j < 8; ++j) {
            xs[j] = float(double(xs[j]) / double(ss.scales[j]));
        }
        vecf y0 = matvec(w, x);
        vecf y1 = matvec(ws, xs);
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < 8; ++i) {
            double dd = double(y0[i]) - double(y1[i]);
            num += dd * dd;
            den += double(y0[i]) * double(y0[i]);
        }
        CHECK(std::sqrt(num / std::max(den, 1e-30)) <= 1e-5);
    }
}

TEST_CASE("quant config json round trip and validation") {
    quant_config cfg = quant_config::from_json(R"({
        "scheme": "smoothquant", "bits": 8, "alpha": 0.4,
        "exempt": [{"layer": 2, "role": "w2"}, {"layer": 5, "role": "w2"}],
        "calibration_rows": 4, "label": "SQ*"
    })");
    CHECK(cfg.scheme == quant_scheme::smoothquant);
    CHECK(cfg.alpha == 0.4);
    CHECK(cfg.exempt.size() == 2);
    quant_config back = quant_config::from_json(cfg.to_json());
    CHECK(back.exempt == cfg.exempt);

    CHECK_THROWS_AS((void) quant_config::from_json(R"({"scheme": "gguf"})"), const error &);
    CHECK_THROWS_AS((void) quant_config::from_json(R"({"alpha": 3.0})"), const error &);
    CHECK_THROWS_AS((void) quant_config::from_json(R"({"exempt": [{"layer":0,"role":"norm"}]})"),
                    const error &);
}

TEST_CASE("exempting every role reproduces full precision bit for bit") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 60);
    quant_config cfg;
    cfg.scheme = quant_scheme::rtn;
    for (int64_t l = 0; l < ps.n_layers; ++l) {
        for (int r = 0; r < k_n_lin_roles; ++r) {
            cfg.exempt.insert({l, lin_role(r)});
        }
    }
    quant_view view = apply_quant_config(m.bundle, cfg, {});
    engine_options opt;
    opt.quant = &view;
    std::vector<int32_t> ids = {0, 5, 9, 12};
    norm_trace a = forward_trace(m.bundle, ids);
    norm_trace b = forward_trace(m.bundle, ids, {}, opt);
    CHECK(a.norms.data == b.norms.data);
}

TEST_CASE("16-bit quantization is near lossless") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 61);
    quant_config cfg;
    cfg.bits = 16;
    quant_view view = apply_quant_config(m.bundle, cfg, {});
    engine_options opt;
    opt.quant = &view;

    std::vector<int32_t> ids;
    xorshift_rng rng(7);
    for (int i = 0; i < 96; ++i) {
        ids.push_back(int32_t(rng.below(uint64_t(ps.vocab))));
    }
    double base = perplexity(m.bundle, ids);
    double q16 = perplexity(m.bundle, ids, opt);
    CHECK(std::fabs(q16 - base) / base <= 1e-3);
}

TEST_CASE("exempt role absent from the model is a config error") {
    linear_model lm = make_linear_model(8, 2, 3); // gated_identity: no w3
    quant_config cfg;
    cfg.exempt.insert({0, lin_role::w3});
    CHECK_THROWS_AS((void) apply_quant_config(lm.bundle, cfg, {}), const error &);
    quant_config cfg2;
    cfg2.exempt.insert({9, lin_role::w2});
    CHECK_THROWS_AS((void) apply_quant_config(lm.bundle, cfg2, {}), const error &);
}

TEST_CASE("smoothquant without calibration corpus is a config error") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 62);
    quant_config cfg;
    cfg.scheme = quant_scheme::smoothquant;
    CHECK_THROWS_AS((void) apply_quant_config(m.bundle, cfg, {}), const error &);
}

TEST_CASE("quant report: baseline row plus exemption monotonicity on the planted model") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 63);
    std::vector<int32_t> ids;
    xorshift_rng rng(8);
    for (int i = 0; i < 192; ++i) {
        ids.push_back(int32_t(rng.below(uint64_t(ps.vocab))));
    }

    quant_config rtn;
    rtn.scheme = quant_scheme::rtn;
    quant_config rtn_star = rtn;
    rtn_star.exempt.insert({ps.explosion_layer, lin_role::w2});
    rtn_star.exempt.insert({ps.decay_layer, lin_role::w2});
    quant_config sq;
    sq.scheme = quant_scheme::smoothquant;
    sq.calibration_rows = 2;
    quant_config sq_star = sq;
    sq_star.exempt = rtn_star.exempt;

    auto rows = quant_report(m.bundle, ids, {rtn, rtn_star, sq, sq_star});
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].method == "-");
    CHECK(rows[1].method == "RTN");
    CHECK(rows[2].method == "RTN*");
    CHECK(rows[2].activation == "Per-Tensor*");
    CHECK(rows[3].method == "SQ");
    CHECK(rows[4].method == "SQ*");

    // the planted side channel is crushed by the sigma-scale outlier unless
    // F2 runs at full precision
    CHECK(rows[2].ppl <= rows[1].ppl + 1e-6);
    CHECK(rows[4].ppl <= rows[3].ppl + 1e-6);
    CHECK(rows[1].ppl > rows[0].ppl);

    std::string csv = quant_report_csv(rows);
    CHECK(csv.find("RTN*") != std::string::npos);
    std::string md = quant_report_markdown(rows);
    CHECK(md.find("| RTN |") != std::string::npos);
}
