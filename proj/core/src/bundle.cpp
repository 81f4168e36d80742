#include "slens/bundle.hpp"

#include <algorithm>

namespace slens {

const layer_weights & model_bundle::layer(int64_t i) const {
    if (i < 0 || i >= int64_t(layers.size())) {
        throw error(errc::range, "layer index " + std::to_string(i) + " out of range [0, " +
                                     std::to_string(layers.size()) + ")");
    }
    return layers[size_t(i)];
}

namespace {

struct resolver {
    const model_spec & spec;
    const std::vector<tensor_store> & stores;
    std::vector<std::string> missing;

    const tensor_store * find(const std::string & name) const {
        for (const auto & st : stores) {
            if (st.has(name)) {
                return &st;
            }
        }
        return nullptr;
    }

    bool role_present(const std::string & role, int64_t layer) {
        if (!spec.has_role(role)) {
            return false;
        }
        return find(spec.resolve(role, layer)) != nullptr;
    }

    // fused tensors pack heads*3 blocks of head_dim rows (neox) or column
    // thirds (gpt2); slice out the requested part
    matf slice_fused_mat(const matf & full, const role_source & src, int64_t out_rows) {
        const int64_t hd = spec.head_dim();
        if (src.layout == fuse_layout::fused_qkv_rows) {
            // [heads, 3, head_dim, in] in row blocks
            const int64_t heads = full.rows / (3 * hd);
            matf out(out_rows, full.cols);
            int64_t dst = 0;
            for (int64_t h = 0; h < heads && dst < out_rows; ++h) {
                const int64_t base = h * 3 * hd + src.part * hd;
                for (int64_t r = 0; r < hd; ++r, ++dst) {
                    std::copy_n(full.row(base + r), full.cols, out.row(dst));
                }
            }
            return out;
        }
        // fused_qkv_cols: [in, 3*out] thirds (before the transpose step)
        const int64_t third = full.cols / 3;
        matf out(full.rows, third);
        for (int64_t r = 0; r < full.rows; ++r) {
            std::copy_n(full.row(r) + src.part * third, third, out.row(r));
        }
        return out;
    }

    vecf slice_fused_vec(const vecf & full, const role_source & src, int64_t out_len) {
        const int64_t hd = spec.head_dim();
        if (src.layout == fuse_layout::fused_qkv_rows) {
            const int64_t heads = int64_t(full.size()) / (3 * hd);
            vecf out;
            out.reserve(size_t(out_len));
            for (int64_t h = 0; h < heads && int64_t(out.size()) < out_len; ++h) {
                const int64_t base = h * 3 * hd + src.part * hd;
                out.insert(out.end(), full.begin() + base, full.begin() + base + hd);
            }
            return out;
        }
        const int64_t third = int64_t(full.size()) / 3;
        return vecf(full.begin() + src.part * third, full.begin() + (src.part + 1) * third);
    }

    matf load_mat(const std::string & role, int64_t layer, int64_t rows, int64_t cols,
                  bool required) {
        if (!spec.has_role(role)) {
            if (required) {
                missing.push_back("(role " + role + " not in spec)");
            }
            return {};
        }
        const role_source & src = spec.source(role);
        std::string name = spec.resolve(role, layer);
        const tensor_store * st = find(name);
        if (!st) {
            if (required) {
                missing.push_back(name);
            }
            return {};
        }
        matf m = st->tensor_mat(name);
        if (src.layout != fuse_layout::plain) {
            // for row-fused the slice happens pre-transpose on [3dims, in];
            // for col-fused pre-transpose on [in, 3*out]
            m = slice_fused_mat(m, src, src.layout == fuse_layout::fused_qkv_rows ? rows : cols);
        }
        if (src.transpose) {
            m = transpose(m);
        }
        if ((rows > 0 && m.rows != rows) || (cols > 0 && m.cols != cols)) {
            throw error(errc::shape, "tensor " + name + ": expected [" + std::to_string(rows) + ", " +
                                         std::to_string(cols) + "], got [" + std::to_string(m.rows) +
                                         ", " + std::to_string(m.cols) + "]");
        }
        return m;
    }

    vecf load_vec(const std::string & role, int64_t layer, int64_t len, bool required) {
        if (!spec.has_role(role)) {
            if (required) {
                missing.push_back("(role " + role + " not in spec)");
            }
            return {};
        }
        const role_source & src = spec.source(role);
        std::string name = spec.resolve(role, layer);
        const tensor_store * st = find(name);
        if (!st) {
            if (required) {
                missing.push_back(name);
            }
            return {};
        }
        vecf v = st->tensor_vec(name);
        if (src.layout != fuse_layout::plain) {
            v = slice_fused_vec(v, src, len);
        }
        if (len > 0 && int64_t(v.size()) != len) {
            throw error(errc::shape, "tensor " + name + ": expected length " + std::to_string(len) +
                                         ", got " + std::to_string(v.size()));
        }
        return v;
    }
};

} // namespace

model_bundle load_model_bundle(const model_spec & spec, const std::vector<tensor_store> & stores) {
    spec.validate();
    model_bundle b;
    b.spec = spec;

    resolver rv{spec, stores, {}};
    const int64_t d = spec.hidden_dim;
    const int64_t q_dim = spec.n_heads * spec.head_dim();
    const int64_t kv = spec.kv_dim();

    b.embedding = rv.load_mat("embed", 0, spec.vocab_size, d, true);
    if (spec.pos == pos_kind::learned) {
        b.pos_embedding = rv.load_mat("pos_embed", 0, 0, d, true);
    }
    b.final_norm_gain = rv.load_vec("final_norm_w", 0, d, true);
    b.final_norm_bias = rv.load_vec("final_norm_b", 0, d, false);
    if (spec.has_role("unembed") && !spec.tie_embeddings) {
        b.unembedding = rv.load_mat("unembed", 0, spec.vocab_size, d, true);
    } else {
        b.tied_unembedding = true;
    }

    // d_ff comes from the first resolvable w1 tensor
    int64_t d_ff = 0;
    for (int64_t l = 0; l < spec.n_layers && d_ff == 0; ++l) {
        if (rv.role_present("w1", l)) {
            matf w1 = rv.load_mat("w1", l, 0, d, true);
            d_ff = w1.rows;
        }
    }

    for (int64_t l = 0; l < spec.n_layers; ++l) {
        layer_weights w;
        w.attn_norm_gain = rv.load_vec("attn_norm_w", l, d, true);
        w.attn_norm_bias = rv.load_vec("attn_norm_b", l, d, false);
        w.wq = rv.load_mat("wq", l, q_dim, d, true);
        w.wk = rv.load_mat("wk", l, kv, d, true);
        w.wv = rv.load_mat("wv", l, kv, d, true);
        w.wo = rv.load_mat("wo", l, d, q_dim, true);
        w.bq = rv.load_vec("bq", l, q_dim, false);
        w.bk = rv.load_vec("bk", l, kv, false);
        w.bv = rv.load_vec("bv", l, kv, false);
        w.bo = rv.load_vec("bo", l, d, false);
        w.ffn_norm_gain = rv.load_vec("ffn_norm_w", l, d, true);
        w.ffn_norm_bias = rv.load_vec("ffn_norm_b", l, d, false);
        w.w1 = rv.load_mat("w1", l, d_ff, d, true);
        w.b1 = rv.load_vec("b1", l, d_ff, false);
        if (spec.ffn != ffn_kind::gelu_mlp) {
            bool required = spec.ffn == ffn_kind::gated_silu;
            w.w3 = rv.load_mat("w3", l, d_ff, d, required);
            w.b3 = rv.load_vec("b3", l, d_ff, false);
        }
        w.w2 = rv.load_mat("w2", l, d, d_ff, true);
        w.b2 = rv.load_vec("b2", l, d, false);
        b.layers.push_back(std::move(w));
    }

    if (!rv.missing.empty()) {
        std::string list;
        size_t shown = 0;
        for (const auto & n : rv.missing) {
            if (shown++ == 12) {
                list += ", ... (" + std::to_string(rv.missing.size()) + " total)";
                break;
            }
            list += list.empty() ? n : ", " + n;
        }
        throw error(errc::resolution, "unresolved tensors: " + list);
    }
    return b;
}

} // namespace slens
