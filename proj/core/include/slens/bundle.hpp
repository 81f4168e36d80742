#pragma once

#include "slens/mat.hpp"
#include "slens/model_spec.hpp"
#include "slens/safetensors.hpp"

#include <vector>

namespace slens {

// Per-layer weights in fp32 working precision, [out, in] row-major.
// Bias vectors are empty when the checkpoint has none.
struct layer_weights {
    vecf attn_norm_gain;
    vecf attn_norm_bias;
    matf wq, wk, wv, wo;
    vecf bq, bk, bv, bo;
    vecf ffn_norm_gain;
    vecf ffn_norm_bias;
    matf w1, w3, w2; // w3 only for the gated kinds
    vecf b1, b3, b2;

    int64_t d_ff() const { return w1.rows; }
};

// Immutable after construction; safe to share across threads.
struct model_bundle {
    model_spec spec;
    matf embedding;     // [vocab, d]
    matf pos_embedding; // [max_pos, d] when pos_embedding == learned
    vecf final_norm_gain;
    vecf final_norm_bias;
    matf unembedding;   // empty when tied
    bool tied_unembedding = false;
    std::vector<layer_weights> layers;

    const matf & unembed_matrix() const { return tied_unembedding ? embedding : unembedding; }
    const layer_weights & layer(int64_t i) const;
};

// Resolves every role across the union of stores (sharded checkpoints pass
// several), widening everything to fp32.
model_bundle load_model_bundle(const model_spec & spec, const std::vector<tensor_store> & stores);

inline const layer_weights & get_layer_weights(const model_bundle & b, int64_t layer) {
    return b.layer(layer);
}

} // namespace slens
