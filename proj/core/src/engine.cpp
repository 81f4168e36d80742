#include "slens/engine.hpp"

#include "slens/rng.hpp"
#include "slens/util.hpp"

#include <algorithm>
#include <cmath>

namespace slens {

namespace {

float silu(float x) { return x / (1.0f + std::exp(-x)); }

float gelu_exact(float x) { return 0.5f * x * (1.0f + std::erf(x * float(M_SQRT1_2))); }

float gelu_tanh(float x) {
    const float c = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x * x * x)));
}

// row-wise norm module
void apply_norm(const model_spec & spec, const vecf & gain, const vecf & bias, const matf & x,
                matf & out) {
    const int64_t d = x.cols;
    out.rows = x.rows;
    out.cols = d;
    out.data.resize(x.data.size());
    for (int64_t t = 0; t < x.rows; ++t) {
        const float * src = x.row(t);
        float * dst = out.row(t);
        switch (spec.norm) {
            case norm_kind::rmsnorm: {
                double ss = dot(src, src, d);
                float inv = float(1.0 / std::sqrt(ss / double(d) + spec.norm_eps));
                for (int64_t j = 0; j < d; ++j) {
                    dst[j] = src[j] * inv * gain[size_t(j)];
                }
                break;
            }
            case norm_kind::layernorm: {
                double mean = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    mean += src[j];
                }
                mean /= double(d);
                double var = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double c = src[j] - mean;
                    var += c * c;
                }
                var /= double(d);
                float inv = float(1.0 / std::sqrt(var + spec.norm_eps));
                for (int64_t j = 0; j < d; ++j) {
                    float b = bias.empty() ? 0.0f : bias[size_t(j)];
                    dst[j] = float(src[j] - mean) * inv * gain[size_t(j)] + b;
                }
                break;
            }
            case norm_kind::gain_only: {
                for (int64_t j = 0; j < d; ++j) {
                    dst[j] = src[j] * gain[size_t(j)];
                }
                break;
            }
        }
    }
}

void fake_quant_activations(matf & x, int bits) {
    float absmax = 0.0f;
    for (float v : x.data) {
        absmax = std::max(absmax, std::fabs(v));
    }
    if (absmax == 0.0f) {
        return;
    }
    const float qmax = float((1 << (bits - 1)) - 1);
    const float delta = absmax / qmax;
    for (auto & v : x.data) {
        float q = std::nearbyintf(v / delta); // round half to even (default fp env)
        q = std::min(std::max(q, -qmax), qmax);
        v = q * delta;
    }
}

// y = x W^T + b, optionally through a fake-quantized view
matf apply_linear(const matf & x, const matf & w, const vecf & b, const linear_view * lv) {
    const matf * weights = &w;
    matf xq;
    const matf * input = &x;
    if (lv) {
        weights = &lv->w_deq;
        xq = x;
        if (!lv->act_div.empty()) {
            for (int64_t t = 0; t < xq.rows; ++t) {
                float * row = xq.row(t);
                for (int64_t j = 0; j < xq.cols; ++j) {
                    row[j] /= lv->act_div[size_t(j)];
                }
            }
        }
        fake_quant_activations(xq, lv->bits);
        input = &xq;
    }
    matf y = matmul_nt(*input, *weights);
    if (!b.empty()) {
        for (int64_t t = 0; t < y.rows; ++t) {
            float * row = y.row(t);
            for (int64_t j = 0; j < y.cols; ++j) {
                row[j] += b[size_t(j)];
            }
        }
    }
    return y;
}

struct rope_tables {
    matf cos_t, sin_t; // per (position, rotary index)
    int64_t rot_dim = 0;
};

rope_tables make_rope(const model_spec & spec, int64_t max_pos) {
    rope_tables rt;
    const int64_t hd = spec.head_dim();
    int64_t rot = int64_t(double(hd) * spec.rotary_pct + 0.5);
    rot -= rot % 2;
    rt.rot_dim = rot;
    if (rot == 0 || spec.pos != pos_kind::rope) {
        rt.rot_dim = 0;
        return rt;
    }
    rt.cos_t = matf(max_pos, rot / 2);
    rt.sin_t = matf(max_pos, rot / 2);
    for (int64_t p = 0; p < max_pos; ++p) {
        for (int64_t i = 0; i < rot / 2; ++i) {
            double freq = std::pow(spec.rope_theta, -2.0 * double(i) / double(rot));
            double angle = double(p) * freq;
            rt.cos_t.at(p, i) = float(std::cos(angle));
            rt.sin_t.at(p, i) = float(std::sin(angle));
        }
    }
    return rt;
}

// rotate-half convention over the first rot_dim dims of every head
void apply_rope(const rope_tables & rt, matf & x, int64_t n_heads, int64_t head_dim) {
    if (rt.rot_dim == 0) {
        return;
    }
    const int64_t half = rt.rot_dim / 2;
    for (int64_t t = 0; t < x.rows; ++t) {
        float * row = x.row(t);
        const float * cr = rt.cos_t.row(t);
        const float * sr = rt.sin_t.row(t);
        for (int64_t h = 0; h < n_heads; ++h) {
            float * hx = row + h * head_dim;
            for (int64_t i = 0; i < half; ++i) {
                float a = hx[i];
                float b = hx[i + half];
                hx[i] = a * cr[i] - b * sr[i];
                hx[i + half] = b * cr[i] + a * sr[i];
            }
        }
    }
}

struct layer_ctx {
    const model_bundle & model;
    const engine_options & opt;
    const rope_tables & rope;
};

const linear_view * view_of(const engine_options & opt, int64_t layer, lin_role role) {
    return opt.quant ? opt.quant->get(layer, role) : nullptr;
}

// causal multi-head attention block (norm already applied to xn)
matf attention_block(const layer_ctx & ctx, int64_t l, const matf & xn) {
    const model_spec & spec = ctx.model.spec;
    const layer_weights & w = ctx.model.layer(l);
    const int64_t T = xn.rows;
    const int64_t hd = spec.head_dim();
    const int64_t n_heads = spec.n_heads;
    const int64_t n_kv = spec.n_kv_heads;
    const int64_t n_rep = n_heads / n_kv;

    if (ctx.opt.lin_observer) {
        ctx.opt.lin_observer(l, lin_role::q, xn);
        ctx.opt.lin_observer(l, lin_role::k, xn);
        ctx.opt.lin_observer(l, lin_role::v, xn);
    }
    matf q = apply_linear(xn, w.wq, w.bq, view_of(ctx.opt, l, lin_role::q));
    matf k = apply_linear(xn, w.wk, w.bk, view_of(ctx.opt, l, lin_role::k));
    matf v = apply_linear(xn, w.wv, w.bv, view_of(ctx.opt, l, lin_role::v));
    apply_rope(ctx.rope, q, n_heads, hd);
    apply_rope(ctx.rope, k, n_kv, hd);

    matf ctx_out(T, n_heads * hd);
    const double inv_sqrt = 1.0 / std::sqrt(double(hd));
    std::vector<double> scores(size_t(T), 0.0);

    for (int64_t h = 0; h < n_heads; ++h) {
        const int64_t kvh = h / n_rep;
        for (int64_t t = 0; t < T; ++t) {
            const float * qrow = q.row(t) + h * hd;
            double mx = -1e300;
            for (int64_t s = 0; s <= t; ++s) {
                double sc = dot(qrow, k.row(s) + kvh * hd, hd) * inv_sqrt;
                scores[size_t(s)] = sc;
                mx = std::max(mx, sc);
            }
            double denom = 0.0;
            for (int64_t s = 0; s <= t; ++s) {
                scores[size_t(s)] = std::exp(scores[size_t(s)] - mx);
                denom += scores[size_t(s)];
            }
            float * out = ctx_out.row(t) + h * hd;
            for (int64_t i = 0; i < hd; ++i) {
                out[i] = 0.0f;
            }
            for (int64_t s = 0; s <= t; ++s) {
                const float p = float(scores[size_t(s)] / denom);
                const float * vrow = v.row(s) + kvh * hd;
                for (int64_t i = 0; i < hd; ++i) {
                    out[i] += p * vrow[i];
                }
            }
        }
    }
    if (ctx.opt.lin_observer) {
        ctx.opt.lin_observer(l, lin_role::o, ctx_out);
    }
    return apply_linear(ctx_out, w.wo, w.bo, view_of(ctx.opt, l, lin_role::o));
}

// FFN block on the already-normed input
matf ffn_block(const layer_ctx & ctx, int64_t l, const matf & xn) {
    const model_spec & spec = ctx.model.spec;
    const layer_weights & w = ctx.model.layer(l);
    if (ctx.opt.lin_observer) {
        ctx.opt.lin_observer(l, lin_role::w1, xn);
        if (spec.ffn == ffn_kind::gated_silu) {
            ctx.opt.lin_observer(l, lin_role::w3, xn);
        }
    }
    matf a = apply_linear(xn, w.w1, w.b1, view_of(ctx.opt, l, lin_role::w1));
    matf act;
    switch (spec.ffn) {
        case ffn_kind::gated_silu: {
            matf g3 = apply_linear(xn, w.w3, w.b3, view_of(ctx.opt, l, lin_role::w3));
            act = matf(a.rows, a.cols);
            for (size_t i = 0; i < a.data.size(); ++i) {
                act.data[i] = silu(a.data[i]) * g3.data[i];
            }
            break;
        }
        case ffn_kind::gelu_mlp: {
            act = matf(a.rows, a.cols);
            if (spec.gelu == gelu_kind::exact) {
                for (size_t i = 0; i < a.data.size(); ++i) {
                    act.data[i] = gelu_exact(a.data[i]);
                }
            } else {
                for (size_t i = 0; i < a.data.size(); ++i) {
                    act.data[i] = gelu_tanh(a.data[i]);
                }
            }
            break;
        }
        case ffn_kind::gated_identity: {
            act = std::move(a); // gate pinned to one
            break;
        }
    }
    if (ctx.opt.lin_observer) {
        ctx.opt.lin_observer(l, lin_role::w2, act);
    }
    return apply_linear(act, w.w2, w.b2, view_of(ctx.opt, l, lin_role::w2));
}

void add_inplace(matf & a, const matf & b) {
    for (size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] += b.data[i];
    }
}

void record_norms(const matf & h, int64_t row, matf & norms) {
    for (int64_t t = 0; t < h.rows; ++t) {
        norms.at(row, t) = float(norm2(h.row(t), h.cols));
    }
}

} // namespace

double norm_trace::max_norm() const {
    double mx = 0.0;
    for (float v : norms.data) {
        mx = std::max(mx, double(v));
    }
    return mx;
}

forward_result forward_full(const model_bundle & model, const std::vector<int32_t> & token_ids,
                            const std::vector<capture_request> & captures,
                            const engine_options & opt) {
    const model_spec & spec = model.spec;
    const int64_t T = int64_t(token_ids.size());
    const int64_t d = spec.hidden_dim;
    const int64_t max_seq = opt.max_seq > 0 ? opt.max_seq : spec.max_seq;
    if (T == 0) {
        throw error(errc::input, "forward: empty token sequence");
    }
    if (T > max_seq) {
        throw error(errc::input, "forward: sequence length " + std::to_string(T) +
                                     " exceeds the configured maximum " + std::to_string(max_seq));
    }
    for (int32_t id : token_ids) {
        if (id < 0 || int64_t(id) >= spec.vocab_size) {
            throw error(errc::input, "forward: token id " + std::to_string(id) +
                                         " outside vocab of " + std::to_string(spec.vocab_size));
        }
    }

    forward_result res;
    res.trace.tokens = token_ids;
    res.trace.norms = matf(spec.n_layers + 1, T);

    matf h(T, d);
    for (int64_t t = 0; t < T; ++t) {
        std::copy_n(model.embedding.row(token_ids[size_t(t)]), d, h.row(t));
        if (spec.pos == pos_kind::learned) {
            if (t >= model.pos_embedding.rows) {
                throw error(errc::input, "forward: position " + std::to_string(t) +
                                             " exceeds the learned position table");
            }
            const float * p = model.pos_embedding.row(t);
            float * dst = h.row(t);
            for (int64_t j = 0; j < d; ++j) {
                dst[j] += p[j];
            }
        }
    }
    record_norms(h, 0, res.trace.norms);

    rope_tables rope = make_rope(spec, T);
    layer_ctx ctx{model, opt, rope};

    auto capture_block = [&](int64_t layer_row, const matf & state) {
        if (opt.keep_hidden) {
            res.hidden.push_back(state);
        }
        for (const auto & c : captures) {
            if (c.kind == capture_kind::block_output && c.layer == layer_row && c.token < T) {
                norm_trace::captured_state cs;
                cs.layer = layer_row;
                cs.token = c.token;
                cs.kind = c.kind;
                cs.state.assign(state.row(c.token), state.row(c.token) + d);
                res.trace.captured.push_back(std::move(cs));
            }
        }
    };
    capture_block(0, h);

    matf xn, attn, ffn_in;
    for (int64_t l = 0; l < spec.n_layers; ++l) {
        const layer_weights & w = model.layer(l);
        const matf layer_input = spec.layout == attn_layout::parallel ? h : matf();

        apply_norm(spec, w.attn_norm_gain, w.attn_norm_bias, h, xn);
        if (!opt.ablation.zero_attention) {
            attn = attention_block(ctx, l, xn);
        } else {
            attn = matf(T, d);
        }

        const matf * ffn_src = nullptr;
        if (spec.layout == attn_layout::sequential) {
            add_inplace(h, attn);
            ffn_src = &h;
        } else {
            ffn_src = &layer_input;
        }
        apply_norm(spec, w.ffn_norm_gain, w.ffn_norm_bias, *ffn_src, ffn_in);

        if (opt.ablation.trim_layer == l) {
            const vecf & v1 = opt.ablation.trim_direction;
            if (int64_t(v1.size()) != d) {
                throw error(errc::shape, "trim direction dimension mismatch");
            }
            for (int64_t t = 0; t < T; ++t) {
                float * row = ffn_in.row(t);
                double c = dot(row, v1.data(), d);
                for (int64_t j = 0; j < d; ++j) {
                    row[j] -= float(c * double(v1[size_t(j)]));
                }
            }
        }
        for (const auto & c : captures) {
            if (c.kind == capture_kind::ffn_input && c.layer == l && c.token < T) {
                norm_trace::captured_state cs;
                cs.layer = l;
                cs.token = c.token;
                cs.kind = c.kind;
                cs.state.assign(ffn_in.row(c.token), ffn_in.row(c.token) + d);
                res.trace.captured.push_back(std::move(cs));
            }
        }

        matf out = ffn_block(ctx, l, ffn_in);
        if (spec.layout == attn_layout::sequential) {
            add_inplace(h, out);
        } else {
            add_inplace(h, attn);
            add_inplace(h, out);
        }
        record_norms(h, l + 1, res.trace.norms);
        for (int64_t t = 0; t < T; ++t) {
            if (!std::isfinite(res.trace.norms.at(l + 1, t))) {
                throw error(errc::numeric, "forward: non-finite activation after layer " +
                                               std::to_string(l) + " at token " + std::to_string(t));
            }
        }
        capture_block(l + 1, h);
    }
    return res;
}

norm_trace forward_trace(const model_bundle & model, const std::vector<int32_t> & token_ids,
                         const std::vector<capture_request> & captures,
                         const engine_options & opt) {
    return forward_full(model, token_ids, captures, opt).trace;
}

namespace {

matf forward_hidden(const model_bundle & model, const std::vector<int32_t> & ids,
                    const engine_options & opt) {
    engine_options o = opt;
    o.keep_hidden = true;
    forward_result r = forward_full(model, ids, {}, o);
    return std::move(r.hidden.back());
}

} // namespace

vecf last_logits(const model_bundle & model, const std::vector<int32_t> & token_ids,
                 const engine_options & opt) {
    matf h = forward_hidden(model, token_ids, opt);
    matf last(1, h.cols);
    std::copy_n(h.row(h.rows - 1), h.cols, last.row(0));
    matf fn;
    apply_norm(model.spec, model.final_norm_gain, model.final_norm_bias, last, fn);
    matf lg = matmul_nt(fn, model.unembed_matrix());
    return vecf(lg.row(0), lg.row(0) + lg.cols);
}

empirical_direction empirical_high_norm_direction(const model_bundle & model,
                                                  const std::vector<std::vector<int32_t>> & rows,
                                                  double threshold, int64_t max_rows,
                                                  const engine_options & opt) {
    if (rows.empty()) {
        throw error(errc::input, "empirical direction: empty corpus");
    }
    const int64_t d = model.spec.hidden_dim;
    const int64_t n_rows =
        std::min<int64_t>(int64_t(rows.size()), max_rows > 0 ? max_rows : int64_t(rows.size()));

    engine_options o = opt;
    o.keep_hidden = true;

    double thr = threshold;
    if (thr <= 0.0) {
        double mx = 0.0;
        for (int64_t r = 0; r < n_rows; ++r) {
            if (rows[size_t(r)].empty()) {
                continue;
            }
            norm_trace t = forward_trace(model, rows[size_t(r)], {}, opt);
            mx = std::max(mx, t.max_norm());
        }
        thr = 0.5 * mx;
    }

    vecd mean(size_t(d), 0.0);
    std::vector<vecf> kept;
    vecf first;
    int64_t count = 0;

    for (int64_t r = 0; r < n_rows; ++r) {
        if (rows[size_t(r)].empty()) {
            continue;
        }
        forward_result fr = forward_full(model, rows[size_t(r)], {}, o);
        for (size_t li = 0; li < fr.hidden.size(); ++li) {
            const matf & hs = fr.hidden[li];
            for (int64_t t = 0; t < hs.rows; ++t) {
                if (double(fr.trace.norms.at(int64_t(li), t)) <= thr) {
                    continue;
                }
                vecf v(hs.row(t), hs.row(t) + d);
                if (count == 0) {
                    first = v;
                }
                double sign = dot(v.data(), first.data(), d) < 0.0 ? -1.0 : 1.0;
                for (int64_t j = 0; j < d; ++j) {
                    mean[size_t(j)] += sign * double(v[size_t(j)]);
                }
                kept.push_back(std::move(v));
                ++count;
            }
        }
    }
    if (count == 0) {
        throw error(errc::empty_collection,
                    "empirical direction: no hidden state exceeded threshold " + fmt_float(thr) +
                        "; lower --threshold");
    }

    empirical_direction out;
    out.count = count;
    out.threshold = thr;
    double mn = norm2(mean);
    out.direction.resize(size_t(d));
    for (int64_t j = 0; j < d; ++j) {
        out.direction[size_t(j)] = float(mean[size_t(j)] / mn);
    }

    // exact mean pairwise acute angle over an evenly spaced subsample
    const size_t cap = 2000;
    std::vector<const vecf *> sample;
    if (kept.size() <= cap) {
        for (const auto & v : kept) {
            sample.push_back(&v);
        }
    } else {
        for (size_t i = 0; i < cap; ++i) {
            sample.push_back(&kept[i * kept.size() / cap]);
        }
    }
    matf s(int64_t(sample.size()), d);
    for (size_t i = 0; i < sample.size(); ++i) {
        double n = norm2(*sample[i]);
        for (int64_t j = 0; j < d; ++j) {
            s.at(int64_t(i), j) = float(double((*sample[i])[size_t(j)]) / n);
        }
    }
    matf g = matmul_nt(s, s);
    double total = 0.0;
    int64_t pairs = 0;
    for (int64_t i = 0; i < g.rows; ++i) {
        for (int64_t j = i + 1; j < g.cols; ++j) {
            double c = std::min(std::fabs(double(g.at(i, j))), 1.0);
            total += std::acos(c) * 180.0 / M_PI;
            ++pairs;
        }
    }
    out.mean_pairwise_angle = pairs > 0 ? total / double(pairs) : 0.0;
    return out;
}

namespace {

} // namespace

// under the single-token assumption softmax over one position is exactly 1
// and rope at position 0 is the identity, so this matches the engine's
// per-layer semantics bit for bit
matf single_token_layers(const model_bundle & model, matf h, int64_t first_layer,
                         int64_t last_layer, bool zero_attn) {
    const model_spec & spec = model.spec;
    if (first_layer < 0 || last_layer >= spec.n_layers || first_layer > last_layer) {
        throw error(errc::range, "single_token_layers: bad layer range");
    }
    const int64_t n_rep = spec.n_heads / spec.n_kv_heads;
    const int64_t hd = spec.head_dim();
    engine_options null_opt;
    rope_tables no_rope;
    layer_ctx ctx{model, null_opt, no_rope};
    matf xn, attn, ffn_in;
    for (int64_t l = first_layer; l <= last_layer; ++l) {
        const layer_weights & w = model.layer(l);
        const matf layer_input = spec.layout == attn_layout::parallel ? h : matf();

        apply_norm(spec, w.attn_norm_gain, w.attn_norm_bias, h, xn);
        if (!zero_attn) {
            matf v = apply_linear(xn, w.wv, w.bv, nullptr);
            matf ctx_out(v.rows, spec.n_heads * hd);
            for (int64_t t = 0; t < v.rows; ++t) {
                const float * src = v.row(t);
                float * dst = ctx_out.row(t);
                for (int64_t hh = 0; hh < spec.n_heads; ++hh) {
                    std::copy_n(src + (hh / n_rep) * hd, hd, dst + hh * hd);
                }
            }
            attn = apply_linear(ctx_out, w.wo, w.bo, nullptr);
        } else {
            attn = matf(h.rows, h.cols);
        }

        const matf * ffn_src = nullptr;
        if (spec.layout == attn_layout::sequential) {
            add_inplace(h, attn);
            ffn_src = &h;
        } else {
            ffn_src = &layer_input;
        }
        apply_norm(spec, w.ffn_norm_gain, w.ffn_norm_bias, *ffn_src, ffn_in);
        matf out = ffn_block(ctx, l, ffn_in);
        if (spec.layout == attn_layout::sequential) {
            add_inplace(h, out);
        } else {
            add_inplace(h, attn);
            add_inplace(h, out);
        }
    }
    return h;
}

vocab_scan_result vocab_initial_scan(const model_bundle & model, int64_t layer, int64_t n_random,
                                     uint64_t seed) {
    const model_spec & spec = model.spec;
    if (layer < 0 || layer >= spec.n_layers) {
        throw error(errc::range, "vocab scan: layer out of range");
    }
    const int64_t d = spec.hidden_dim;
    const int64_t v = spec.vocab_size;

    // per-dimension mean/std of the embedding table for the random population
    vecd mu(size_t(d), 0.0), sd(size_t(d), 0.0);
    for (int64_t i = 0; i < v; ++i) {
        const float * row = model.embedding.row(i);
        for (int64_t j = 0; j < d; ++j) {
            mu[size_t(j)] += row[j];
        }
    }
    for (auto & x : mu) {
        x /= double(v);
    }
    for (int64_t i = 0; i < v; ++i) {
        const float * row = model.embedding.row(i);
        for (int64_t j = 0; j < d; ++j) {
            double c = row[j] - mu[size_t(j)];
            sd[size_t(j)] += c * c;
        }
    }
    for (auto & x : sd) {
        x = std::sqrt(x / double(v));
    }

    matf h(v + n_random, d);
    for (int64_t i = 0; i < v; ++i) {
        std::copy_n(model.embedding.row(i), d, h.row(i));
    }
    xorshift_rng rng(seed);
    for (int64_t r = 0; r < n_random; ++r) {
        float * row = h.row(v + r);
        for (int64_t j = 0; j < d; ++j) {
            row[j] = float(mu[size_t(j)] + sd[size_t(j)] * rng.gaussian());
        }
    }
    if (spec.pos == pos_kind::learned) {
        for (int64_t i = 0; i < h.rows; ++i) {
            float * row = h.row(i);
            const float * p = model.pos_embedding.row(0);
            for (int64_t j = 0; j < d; ++j) {
                row[j] += p[j];
            }
        }
    }

    h = single_token_layers(model, std::move(h), 0, layer, false);
    vocab_scan_result out;
    out.vocab_norms.resize(size_t(v));
    for (int64_t i = 0; i < v; ++i) {
        out.vocab_norms[size_t(i)] = norm2(h.row(i), d);
    }
    out.random_norms.resize(size_t(n_random));
    for (int64_t r = 0; r < n_random; ++r) {
        out.random_norms[size_t(r)] = norm2(h.row(v + r), d);
    }
    return out;
}

std::vector<double> attention_ablation_scan(const model_bundle & model, int64_t layer) {
    const model_spec & spec = model.spec;
    if (layer < 0 || layer >= spec.n_layers) {
        throw error(errc::range, "ablation scan: layer out of range");
    }
    matf h(spec.vocab_size, spec.hidden_dim);
    for (int64_t i = 0; i < spec.vocab_size; ++i) {
        std::copy_n(model.embedding.row(i), spec.hidden_dim, h.row(i));
    }
    if (spec.pos == pos_kind::learned) {
        for (int64_t i = 0; i < h.rows; ++i) {
            float * row = h.row(i);
            const float * p = model.pos_embedding.row(0);
            for (int64_t j = 0; j < spec.hidden_dim; ++j) {
                row[j] += p[j];
            }
        }
    }
    h = single_token_layers(model, std::move(h), 0, layer, true);
    std::vector<double> norms(size_t(spec.vocab_size), 0.0);
    for (int64_t i = 0; i < spec.vocab_size; ++i) {
        norms[size_t(i)] = norm2(h.row(i), spec.hidden_dim);
    }
    return norms;
}

std::vector<double> subspace_coefficient(const model_bundle & model,
                                         const std::vector<int32_t> & token_ids, int64_t layer,
                                         const vecf & v1) {
    if (int64_t(v1.size()) != model.spec.hidden_dim) {
        throw error(errc::shape, "subspace coefficient: direction dimension mismatch");
    }
    std::vector<capture_request> reqs;
    for (int64_t t = 0; t < int64_t(token_ids.size()); ++t) {
        reqs.push_back({layer, t, capture_kind::ffn_input});
    }
    norm_trace tr = forward_trace(model, token_ids, reqs);
    std::vector<double> coef(token_ids.size(), 0.0);
    for (const auto & c : tr.captured) {
        if (c.kind == capture_kind::ffn_input && c.layer == layer) {
            coef[size_t(c.token)] = dot(c.state.data(), v1.data(), int64_t(v1.size()));
        }
    }
    return coef;
}

double perplexity(const model_bundle & model, const std::vector<int32_t> & corpus_ids,
                  const engine_options & opt) {
    const model_spec & spec = model.spec;
    const int64_t window = std::min<int64_t>(opt.max_seq > 0 ? opt.max_seq : spec.max_seq, 2048);
    if (int64_t(corpus_ids.size()) < 2) {
        throw error(errc::input, "perplexity: need at least two tokens");
    }

    double total_nll = 0.0;
    int64_t total_pred = 0;
    int64_t batch = 0;

    for (size_t start = 0; start + 1 < corpus_ids.size(); start += size_t(window), ++batch) {
        size_t end = std::min(corpus_ids.size(), start + size_t(window));
        if (end - start < 2) {
            break;
        }
        std::vector<int32_t> ids(corpus_ids.begin() + std::ptrdiff_t(start),
                                 corpus_ids.begin() + std::ptrdiff_t(end));
        matf h = forward_hidden(model, ids, opt);

        // blocked logits keep T x vocab off the heap
        const int64_t block = 16;
        for (int64_t t0 = 0; t0 + 1 < h.rows; t0 += block) {
            int64_t t1 = std::min(h.rows - 1, t0 + block);
            matf sub(t1 - t0, h.cols);
            for (int64_t t = t0; t < t1; ++t) {
                std::copy_n(h.row(t), h.cols, sub.row(t - t0));
            }
            matf fn;
            apply_norm(spec, model.final_norm_gain, model.final_norm_bias, sub, fn);
            matf lg = matmul_nt(fn, model.unembed_matrix());
            for (int64_t t = t0; t < t1; ++t) {
                const float * row = lg.row(t - t0);
                double mx = -1e300;
                for (int64_t j = 0; j < lg.cols; ++j) {
                    mx = std::max(mx, double(row[j]));
                }
                double lse = 0.0;
                for (int64_t j = 0; j < lg.cols; ++j) {
                    lse += std::exp(double(row[j]) - mx);
                }
                lse = mx + std::log(lse);
                const int32_t target = ids[size_t(t + 1)];
                total_nll += lse - double(row[target]);
                ++total_pred;
            }
        }
        if (!std::isfinite(total_nll)) {
            throw error(errc::numeric,
                        "perplexity: non-finite loss in batch " + std::to_string(batch));
        }
    }
    return std::exp(total_nll / double(total_pred));
}

trim_result trim_and_trace(const model_bundle & model, const std::vector<int32_t> & token_ids,
                           int64_t layer, const vecf & v1, int64_t gen_tokens) {
    trim_result out;
    out.baseline = forward_trace(model, token_ids);

    engine_options opt;
    opt.ablation.trim_layer = layer;
    opt.ablation.trim_direction = v1;
    out.trimmed = forward_trace(model, token_ids, {}, opt);

    std::vector<int32_t> ids = token_ids;
    for (int64_t g = 0; g < gen_tokens; ++g) {
        if (int64_t(ids.size()) >= model.spec.max_seq) {
            break;
        }
        vecf logits = last_logits(model, ids, opt);
        int32_t best = 0;
        float bv = logits[0];
        for (size_t j = 1; j < logits.size(); ++j) {
            if (logits[j] > bv) {
                bv = logits[j];
                best = int32_t(j);
            }
        }
        ids.push_back(best);
        out.generated.push_back(best);
    }
    return out;
}

vecf ffn_module_output(const model_bundle & model, int64_t layer, const vecf & x) {
    const model_spec & spec = model.spec;
    if (int64_t(x.size()) != spec.hidden_dim) {
        throw error(errc::shape, "ffn_module_output: dimension mismatch");
    }
    const layer_weights & w = model.layer(layer);
    matf in(1, spec.hidden_dim);
    std::copy(x.begin(), x.end(), in.row(0));
    matf xn;
    apply_norm(spec, w.ffn_norm_gain, w.ffn_norm_bias, in, xn);
    engine_options null_opt;
    rope_tables no_rope;
    layer_ctx ctx{model, null_opt, no_rope};
    matf out = ffn_block(ctx, layer, xn);
    return vecf(out.row(0), out.row(0) + out.cols);
}

} // namespace slens
