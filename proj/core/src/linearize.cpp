#include "slens/linearize.hpp"

#include "slens/linalg.hpp"
#include "slens/rng.hpp"

#include <algorithm>
#include <cmath>

namespace slens {

namespace {

// right-compose M with the norm stand-in N: columns scaled by gain, then the
// centering rank-one correction for layernorm
matf compose_norm(const matf & m, const vecf & gain, bool center) {
    matf out = m;
    const int64_t d = out.cols;
    for (int64_t i = 0; i < out.rows; ++i) {
        float * row = out.row(i);
        for (int64_t j = 0; j < d; ++j) {
            row[j] *= gain[size_t(j)];
        }
    }
    if (center) {
        // M diag(g) (I - 1 1^T / d) = M diag(g) - (M g) 1^T / d
        for (int64_t i = 0; i < out.rows; ++i) {
            float * row = out.row(i);
            double rs = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                rs += row[j];
            }
            const float sub = float(rs / double(d));
            for (int64_t j = 0; j < d; ++j) {
                row[j] -= sub;
            }
        }
    }
    return out;
}

matf repeat_kv(const matf & wv, int64_t n_heads, int64_t n_kv, int64_t head_dim) {
    if (n_heads == n_kv) {
        return wv;
    }
    const int64_t n_rep = n_heads / n_kv;
    matf out(n_heads * head_dim, wv.cols);
    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t src = (h / n_rep) * head_dim;
        for (int64_t r = 0; r < head_dim; ++r) {
            std::copy_n(wv.row(src + r), wv.cols, out.row(h * head_dim + r));
        }
    }
    return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }
float gelu_exact(float x) { return 0.5f * x * (1.0f + std::erf(x * float(M_SQRT1_2))); }
float gelu_tanh(float x) {
    const float c = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

} // namespace

matf approx_attention(const layer_weights & w, const model_spec & spec, bool layernorm_centering) {
    const int64_t d = spec.hidden_dim;
    if (w.wv.cols != d || w.wo.rows != d) {
        throw error(errc::shape, "approx_attention: weights inconsistent with the spec");
    }
    matf rep = repeat_kv(w.wv, spec.n_heads, spec.n_kv_heads, spec.head_dim());
    if (w.wo.cols != rep.rows) {
        throw error(errc::shape, "approx_attention: W_out and repeated W_value mismatch");
    }
    matf m = matmul(w.wo, rep);
    bool center = spec.norm == norm_kind::layernorm && layernorm_centering;
    return compose_norm(m, w.attn_norm_gain, center);
}

std::pair<matf, double> approx_ffn_linear(const layer_weights & w, const model_spec & spec,
                                          const fit_config & cfg) {
    const int64_t d = spec.hidden_dim;
    const int64_t d_ff = w.d_ff();
    const int64_t m = cfg.effective_samples(d);
    if (m < 4 * d) {
        throw error(errc::input, "approx_ffn_linear: need at least 4 d samples");
    }
    const double scale = cfg.effective_scale(d) / std::sqrt(double(d));

    // samples as columns of X (d x M)
    matf x(d, m);
    xorshift_rng rng(cfg.seed);
    for (auto & v : x.data) {
        v = float(rng.gaussian() * scale);
    }

    // exact nonlinearity over the samples (biases included when present)
    matf a = matmul(w.w1, x); // d_ff x M
    auto add_bias = [&](matf & mm, const vecf & b) {
        if (b.empty()) {
            return;
        }
        for (int64_t i = 0; i < mm.rows; ++i) {
            float * row = mm.row(i);
            for (int64_t j = 0; j < mm.cols; ++j) {
                row[j] += b[size_t(i)];
            }
        }
    };
    add_bias(a, w.b1);
    matf g(d_ff, m);
    switch (spec.ffn) {
        case ffn_kind::gated_silu: {
            matf up = matmul(w.w3, x);
            add_bias(up, w.b3);
            for (size_t i = 0; i < g.data.size(); ++i) {
                g.data[i] = silu(a.data[i]) * up.data[i];
            }
            break;
        }
        case ffn_kind::gelu_mlp: {
            if (spec.gelu == gelu_kind::exact) {
                for (size_t i = 0; i < g.data.size(); ++i) {
                    g.data[i] = gelu_exact(a.data[i]);
                }
            } else {
                for (size_t i = 0; i < g.data.size(); ++i) {
                    g.data[i] = gelu_tanh(a.data[i]);
                }
            }
            break;
        }
        case ffn_kind::gated_identity: {
            g = std::move(a);
            break;
        }
    }

    double trace = 0.0;
    for (float v : x.data) {
        trace += double(v) * double(v);
    }
    const double ridge = cfg.ridge_factor * trace / double(d);

    matf f1 = least_squares_fit(x, g, ridge);

    // relative fit residual
    matf pred = matmul(f1, x);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < g.data.size(); ++i) {
        double dlt = double(pred.data[i]) - double(g.data[i]);
        num += dlt * dlt;
        den += double(g.data[i]) * double(g.data[i]);
    }
    double fit_error = den > 0.0 ? std::sqrt(num / den) : 0.0;
    fit_error = std::min(fit_error, 1.5);

    matf f = matmul(w.w2, f1);
    bool center = spec.norm == norm_kind::layernorm && cfg.layernorm_centering;
    f = compose_norm(f, w.ffn_norm_gain, center);
    return {std::move(f), fit_error};
}

layer_linearization approx_layer(const matf & a, const matf & f, const model_spec & spec,
                                 int64_t layer, double fit_error) {
    const int64_t d = spec.hidden_dim;
    if (a.rows != d || a.cols != d || f.rows != d || f.cols != d) {
        throw error(errc::shape, "approx_layer: A and F must be d x d");
    }
    layer_linearization lin;
    lin.layer = layer;
    lin.f1_fit_error = fit_error;
    lin.A = a;
    lin.F = f;
    if (spec.layout == attn_layout::sequential) {
        matf fa = matmul(f, a);
        lin.R = matf(d, d);
        for (size_t i = 0; i < lin.R.data.size(); ++i) {
            lin.R.data[i] = a.data[i] + f.data[i] + fa.data[i];
        }
    } else {
        lin.R = matf(d, d);
        for (size_t i = 0; i < lin.R.data.size(); ++i) {
            lin.R.data[i] = a.data[i] + f.data[i];
        }
    }
    lin.L = lin.R;
    for (int64_t i = 0; i < d; ++i) {
        lin.L.at(i, i) += 1.0f;
    }
    return lin;
}

layer_linearization linearize_layer(const model_bundle & model, int64_t layer,
                                    const fit_config & cfg) {
    const layer_weights & w = model.layer(layer);
    matf a = approx_attention(w, model.spec, cfg.layernorm_centering);
    fit_config layer_cfg = cfg;
    layer_cfg.seed = cfg.seed ^ (0x9E3779B97F4A7C15ull * uint64_t(layer + 1));
    auto [f, err] = approx_ffn_linear(w, model.spec, layer_cfg);
    return approx_layer(a, f, model.spec, layer, err);
}

} // namespace slens
