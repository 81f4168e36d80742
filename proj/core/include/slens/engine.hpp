#pragma once

#include "slens/bundle.hpp"
#include "slens/mat.hpp"
#include "slens/quant.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace slens {

struct ablation_config {
    bool zero_attention = false; // drop every self-attention block
    int64_t trim_layer = -1;     // remove the trim_direction component of the
    vecf trim_direction;         // FFN input (post-norm) at this layer
};

enum class capture_kind { block_output, ffn_input };

struct capture_request {
    int64_t layer = 0; // block_output: 0 = embedding row; ffn_input: layer index
    int64_t token = 0;
    capture_kind kind = capture_kind::block_output;
};

struct norm_trace {
    std::vector<int32_t> tokens;
    std::vector<std::string> token_strings; // empty unless a tokenizer was attached
    matf norms;                             // (n_layers+1) x n_tokens, row 0 = embedding
    struct captured_state {
        int64_t layer = 0;
        int64_t token = 0;
        capture_kind kind = capture_kind::block_output;
        vecf state;
    };
    std::vector<captured_state> captured;

    double max_norm() const;
};

struct engine_options {
    const quant_view * quant = nullptr;
    ablation_config ablation;
    int64_t max_seq = 0;      // 0: use spec.max_seq
    bool keep_hidden = false; // retain every post-block state in `hidden`
    // observes the full-precision input of every linear sub-layer
    // (smoothquant calibration); never mutates the run
    std::function<void(int64_t layer, lin_role role, const matf & input)> lin_observer;
};

struct forward_result {
    norm_trace trace;
    std::vector<matf> hidden; // filled when keep_hidden: (n_layers+1) entries of [T, d]
};

forward_result forward_full(const model_bundle & model, const std::vector<int32_t> & token_ids,
                            const std::vector<capture_request> & captures,
                            const engine_options & opt);

norm_trace forward_trace(const model_bundle & model, const std::vector<int32_t> & token_ids,
                         const std::vector<capture_request> & captures = {},
                         const engine_options & opt = {});

// logits of the last position only
vecf last_logits(const model_bundle & model, const std::vector<int32_t> & token_ids,
                 const engine_options & opt = {});

struct empirical_direction {
    vecf direction; // unit
    int64_t count = 0;
    double threshold = 0.0;
    double mean_pairwise_angle = 0.0; // degrees, over <= 2000 sampled states
};

// threshold <= 0 selects auto: 0.5 x the maximum norm seen across the corpus
empirical_direction empirical_high_norm_direction(const model_bundle & model,
                                                  const std::vector<std::vector<int32_t>> & rows,
                                                  double threshold, int64_t max_rows,
                                                  const engine_options & opt = {});

struct vocab_scan_result {
    std::vector<double> vocab_norms;  // per token id, after the given layer
    std::vector<double> random_norms; // per random embedding
};

// every vocab embedding as a length-1 sequence, plus Gaussian embeddings
// matched to the table's per-dimension mean/std
vocab_scan_result vocab_initial_scan(const model_bundle & model, int64_t layer, int64_t n_random,
                                     uint64_t seed);

// the same scan with all attention blocks removed
std::vector<double> attention_ablation_scan(const model_bundle & model, int64_t layer);

// v1^T x per token, x = hidden state entering the FFN (after the pre-FFN norm)
std::vector<double> subspace_coefficient(const model_bundle & model,
                                         const std::vector<int32_t> & token_ids, int64_t layer,
                                         const vecf & v1);

// sliding-window next-token perplexity; window = min(2048, model max), stride = window
double perplexity(const model_bundle & model, const std::vector<int32_t> & corpus_ids,
                  const engine_options & opt = {});

struct trim_result {
    norm_trace baseline;
    norm_trace trimmed;
    std::vector<int32_t> generated; // greedy continuation under the trim
};

trim_result trim_and_trace(const model_bundle & model, const std::vector<int32_t> & token_ids,
                           int64_t layer, const vecf & v1, int64_t gen_tokens = 64);

// exact nonlinear FFN of one layer applied to a single vector, norm included
// as in inference
vecf ffn_module_output(const model_bundle & model, int64_t layer, const vecf & x);

// rows of h as independent single-token sequences through layers
// [first_layer, last_layer]; exact under the single-token assumption
matf single_token_layers(const model_bundle & model, matf h, int64_t first_layer,
                         int64_t last_layer, bool zero_attention);

} // namespace slens
