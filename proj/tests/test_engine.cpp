#include <doctest.h>

#include <slens/engine.hpp>
#include <slens/linalg.hpp>
#include <slens/model_spec.hpp>
#include <slens/rng.hpp>
#include <slens/synthkit.hpp>

#include "helpers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

using namespace slens;

// zero-weight variant: every block contributes nothing
static model_bundle zero_model(int64_t d, int64_t n_layers) {
    linear_model lm = make_linear_model(d, n_layers, 1);
    for (auto & t : lm.tensors) {
        if (t.name != "embed" && t.name != "unembed") {
            std::fill(t.bytes.begin(), t.bytes.end(), uint8_t(0));
        }
    }
    model_spec spec = model_spec_from_json(lm.spec_json);
    return load_model_bundle(spec, {parse_safetensors(serialize_safetensors(lm.tensors))});
}

TEST_CASE("zero-initialized model: all norms equal the embedding-row norm") {
    model_bundle b = zero_model(8, 3);
    norm_trace tr = forward_trace(b, {0});
    double emb = norm2(b.embedding.row(0), 8);
    for (int64_t l = 0; l <= 3; ++l) {
        CHECK(double(tr.norms.at(l, 0)) == doctest::Approx(emb).epsilon(1e-7));
    }
}

TEST_CASE("planted model: explosion and decay of the initial token") {
    planted_spec ps; // explosion at 2, decay at 5, lambda -1
    planted_model m = make_planted_model(ps, 3);
    norm_trace tr = forward_trace(m.bundle, {0, 5, 9, 12});

    double base = tr.norms.at(0, 0);
    double at_explosion = tr.norms.at(ps.explosion_layer + 1, 0);
    double after_decay = tr.norms.at(ps.decay_layer + 1, 0);
    CHECK(at_explosion >= 50.0 * base);
    CHECK(after_decay <= 2.0 * base);
    // preserved in between
    for (int64_t l = ps.explosion_layer + 1; l <= ps.decay_layer; ++l) {
        CHECK(tr.norms.at(l, 0) >= 0.8 * at_explosion);
    }
}

TEST_CASE("determinism: identical runs produce bit-identical traces") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 4);
    norm_trace a = forward_trace(m.bundle, {0, 3, 7});
    norm_trace b = forward_trace(m.bundle, {0, 3, 7});
    CHECK(a.norms.data == b.norms.data);
}

TEST_CASE("causality: appending tokens never changes earlier positions") {
    linear_model lm = make_linear_model(12, 3, 9);
    std::vector<int32_t> ids = {1, 2, 3, 4, 5, 6};
    norm_trace full = forward_trace(lm.bundle, ids);
    std::vector<int32_t> head(ids.begin(), ids.begin() + 4);
    norm_trace part = forward_trace(lm.bundle, head);
    for (int64_t l = 0; l <= 3; ++l) {
        for (int64_t t = 0; t < 4; ++t) {
            CHECK(full.norms.at(l, t) == part.norms.at(l, t));
        }
    }
}

TEST_CASE("input validation") {
    linear_model lm = make_linear_model(8, 2, 1);
    CHECK_THROWS_AS((void) forward_trace(lm.bundle, {}), const error &);
    CHECK_THROWS_AS((void) forward_trace(lm.bundle, {99}), const error &);
    engine_options opt;
    opt.max_seq = 2;
    CHECK_THROWS_AS((void) forward_trace(lm.bundle, {0, 1, 2}, {}, opt), const error &);
}

TEST_CASE("perplexity of a uniform predictor equals the vocab size") {
    model_bundle b = zero_model(8, 2); // zero unembedding -> uniform logits
    std::vector<int32_t> ids;
    xorshift_rng rng(5);
    for (int i = 0; i < 64; ++i) {
        ids.push_back(int32_t(rng.below(16)));
    }
    CHECK(perplexity(b, ids) == doctest::Approx(16.0).epsilon(1e-6));
}

TEST_CASE("perplexity is reproducible bit-identically") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 8);
    std::vector<int32_t> ids;
    xorshift_rng rng(6);
    for (int i = 0; i < 48; ++i) {
        ids.push_back(int32_t(rng.below(uint64_t(ps.vocab))));
    }
    double a = perplexity(m.bundle, ids);
    double b = perplexity(m.bundle, ids);
    CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("vocab initial scan: planted explosion reaches nearly all tokens") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 10);
    // norms entering the explosion layer, per token
    vocab_scan_result pre = vocab_initial_scan(m.bundle, ps.explosion_layer - 1, 0, 1);
    vocab_scan_result post = vocab_initial_scan(m.bundle, ps.explosion_layer, 32, 1);
    REQUIRE(post.vocab_norms.size() == size_t(ps.vocab));
    int64_t exceed = 0;
    for (size_t i = 0; i < post.vocab_norms.size(); ++i) {
        if (post.vocab_norms[i] >= 10.0 * pre.vocab_norms[i]) {
            ++exceed;
        }
    }
    CHECK(double(exceed) >= 0.99 * double(ps.vocab));
    // random embeddings overlap the trigger subspace: typical post-layer norm
    // well above the typical pre-layer vocab norm
    std::vector<double> pre_sorted = pre.vocab_norms;
    std::sort(pre_sorted.begin(), pre_sorted.end());
    std::vector<double> rand_sorted = post.random_norms;
    std::sort(rand_sorted.begin(), rand_sorted.end());
    CHECK(rand_sorted[rand_sorted.size() / 2] >= 5.0 * pre_sorted[pre_sorted.size() / 2]);
}

TEST_CASE("attention ablation scan ranks the planted delimiter first") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 12);
    std::vector<double> norms = attention_ablation_scan(m.bundle, ps.explosion_layer);
    size_t best = 0;
    for (size_t i = 1; i < norms.size(); ++i) {
        if (norms[i] > norms[best]) {
            best = i;
        }
    }
    CHECK(int32_t(best) == ps.delimiter_id);
}

TEST_CASE("zero-weight model: ablation scan returns embedding norms") {
    model_bundle b = zero_model(8, 2);
    std::vector<double> norms = attention_ablation_scan(b, 1);
    for (size_t i = 0; i < norms.size(); ++i) {
        CHECK(norms[i] == doctest::Approx(norm2(b.embedding.row(int64_t(i)), 8)).epsilon(1e-7));
    }
}

TEST_CASE("subspace coefficient: initial position dominates a repeat at position 2") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 14);
    std::vector<int32_t> ids = {0, 7, 0};
    std::vector<double> coef = subspace_coefficient(m.bundle, ids, ps.explosion_layer, m.truth.v);
    CHECK(std::fabs(coef[0]) >= 10.0 * std::fabs(coef[2]));
}

TEST_CASE("subspace coefficient of an orthogonal direction is zero") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 15);
    // w_aux is orthogonal to v and absent from the embeddings
    std::vector<int32_t> ids = {0, 3};
    std::vector<double> coef = subspace_coefficient(m.bundle, ids, 0, m.truth.w_aux);
    for (double c : coef) {
        CHECK(std::fabs(c) <= 1e-4);
    }
}

TEST_CASE("trim removes the explosion and an orthogonal trim is a no-op") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 16);
    std::vector<int32_t> ids = {0, 5, 9, 12};

    trim_result tr = trim_and_trace(m.bundle, ids, ps.explosion_layer, m.truth.v, 8);
    CHECK(tr.baseline.max_norm() >= 10.0 * tr.trimmed.max_norm());
    CHECK(tr.generated.size() == 8);

    trim_result noop = trim_and_trace(m.bundle, ids, ps.explosion_layer, m.truth.w_aux, 0);
    CHECK(noop.baseline.norms.data == noop.trimmed.norms.data);
}

TEST_CASE("empirical high-norm direction recovers the planted defect direction") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 17);
    std::vector<std::vector<int32_t>> rows = {
        {0, 5, 9, 12}, {0, 7, 3}, {0, 11, 6, 8, 4}, {0, 13}};
    empirical_direction dir = empirical_high_norm_direction(m.bundle, rows, 50.0, 0);
    CHECK(dir.count > 0);
    CHECK(acute_angle(dir.direction, m.truth.u) <= 5.0);
    CHECK(dir.mean_pairwise_angle <= 5.0);
    CHECK(dir.mean_pairwise_angle >= 0.0);

    // auto threshold takes half the maximum observed norm
    empirical_direction auto_dir = empirical_high_norm_direction(m.bundle, rows, 0.0, 0);
    CHECK(auto_dir.threshold > 0.0);
    CHECK(acute_angle(auto_dir.direction, m.truth.u) <= 5.0);

    // absurd threshold: nothing collected
    CHECK_THROWS_AS((void) empirical_high_norm_direction(m.bundle, rows, 1e9, 0), const error &);
}

TEST_CASE("captured states and norms agree") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 18);
    std::vector<capture_request> reqs = {{ps.explosion_layer + 1, 0, capture_kind::block_output}};
    norm_trace tr = forward_trace(m.bundle, {0, 5}, reqs);
    REQUIRE(tr.captured.size() == 1);
    CHECK(norm2(tr.captured[0].state) ==
          doctest::Approx(double(tr.norms.at(ps.explosion_layer + 1, 0))).epsilon(1e-6));
}

TEST_CASE("ffn module output is the exact nonlinear response") {
    planted_spec ps;
    planted_model m = make_planted_model(ps, 19);
    vecf out = ffn_module_output(m.bundle, ps.explosion_layer, m.truth.v);
    // unit v triggers the planted response sigma * u
    CHECK(norm2(out) == doctest::Approx(m.truth.sigma).epsilon(1e-3));
    CHECK(acute_angle(out, m.truth.u) <= 0.1);
    vecf ortho = ffn_module_output(m.bundle, ps.explosion_layer, m.truth.w_aux);
    CHECK(norm2(ortho) <= 1e-3 * m.truth.sigma);
}
