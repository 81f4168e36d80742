#pragma once

#include "slens/bundle.hpp"
#include "slens/mat.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace slens {

enum class quant_scheme { rtn, smoothquant };

// linear sub-layers inside one transformer layer, in engine order
enum class lin_role : int { q = 0, k, v, o, w1, w3, w2 };
constexpr int k_n_lin_roles = 7;

const char * lin_role_name(lin_role r);
std::optional<lin_role> lin_role_from_name(const std::string & s);

struct quant_params {
    double delta = 1.0;
    int bits = 8;
    bool degenerate = false; // all-zero input tensor
};

struct rtn_result {
    std::vector<int32_t> q;
    quant_params params;
    int64_t saturated = 0; // values clipped at the integer range edge
};

// X_bar = round_half_even(X / delta) with delta = max|X| / (2^(N-1) - 1)
rtn_result quantize_rtn(const float * x, size_t n, int bits);
rtn_result quantize_rtn(const matf & x, int bits);
vecf dequantize(const rtn_result & r);

// per-channel difficulty migration: s_j = act_absmax_j^alpha / max|W[:,j]|^(1-alpha);
// activations get divided by s_j, column j of W multiplied by s_j
struct smoothquant_scales {
    vecf scales; // s_j per input channel
};
smoothquant_scales smoothquant_transform(const vecf & act_absmax, matf & w, double alpha);

struct quant_config {
    quant_scheme scheme = quant_scheme::rtn;
    int bits = 8;
    double alpha = 0.5;                                  // smoothquant only
    std::set<std::pair<int64_t, lin_role>> exempt;       // kept at full precision
    int64_t calibration_rows = 8;
    std::string label;

    static quant_config from_json(const std::string & text);
    std::string to_json() const;
};

// one fake-quantized linear sub-layer: weights pre-dequantized, activations
// quantized dynamically at call time
struct linear_view {
    bool quantized = false;
    matf w_deq;
    vecf b;                 // unchanged bias
    vecf act_div;           // smoothquant per-channel divisor (empty: none)
    int bits = 8;
};

// immutable quantized view over a bundle; the engine consults it per role
struct quant_view {
    std::vector<std::array<linear_view, k_n_lin_roles>> layers;

    const linear_view * get(int64_t layer, lin_role role) const {
        if (layer < 0 || size_t(layer) >= layers.size()) {
            return nullptr;
        }
        const linear_view & v = layers[size_t(layer)][size_t(role)];
        return v.quantized ? &v : nullptr;
    }
};

// calibration corpus rows are token-id sequences (smoothquant needs them)
quant_view apply_quant_config(const model_bundle & model, const quant_config & cfg,
                              const std::vector<std::vector<int32_t>> & calib);

struct quant_report_row {
    std::string label;
    std::string method;
    std::string weight;
    std::string activation;
    double ppl = 0.0;
};

// evaluates perplexity per config; the first row is the full-precision baseline
std::vector<quant_report_row> quant_report(const model_bundle & model,
                                           const std::vector<int32_t> & corpus_ids,
                                           const std::vector<quant_config> & configs);

std::string quant_report_csv(const std::vector<quant_report_row> & rows);
std::string quant_report_markdown(const std::vector<quant_report_row> & rows);

} // namespace slens
