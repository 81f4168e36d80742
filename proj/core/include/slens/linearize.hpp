#pragma once

#include "slens/bundle.hpp"
#include "slens/mat.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace slens {

struct fit_config {
    int64_t samples = 0;        // 0: max(4d, 4096)
    double input_scale = 0.0;   // 0: sqrt(d); else explicit (or a calibration median)
    double ridge_factor = 1e-8; // ridge = factor * trace(X X^T) / d
    uint64_t seed = 0x5EED5EEDull;
    bool layernorm_centering = true; // include I - (1/d) 1 1^T for layernorm

    int64_t effective_samples(int64_t d) const {
        return samples > 0 ? samples : std::max<int64_t>(4 * d, 4096);
    }
    double effective_scale(int64_t d) const {
        return input_scale > 0.0 ? input_scale : std::sqrt(double(d));
    }
};

struct layer_linearization {
    matf A; // attention path
    matf F; // ffn path
    matf R; // residual: A + F + F A (sequential) or A + F (parallel)
    matf L; // I + R
    int64_t layer = 0;
    double f1_fit_error = 0.0; // relative Frobenius residual of the F1 fit
};

// A = W_out . repeat_kv(W_value) . N, with N the norm stand-in: diag(gain)
// (rmsnorm/gain_only) or diag(gain) . (I - 1 1^T / d) (layernorm)
matf approx_attention(const layer_weights & w, const model_spec & spec,
                      bool layernorm_centering = true);

// samples x ~ Normal(0, s^2 I / d), evaluates the exact nonlinearity, fits
// F1 by ridge least squares, returns F = W2 . F1 . N and the relative fit
// residual
std::pair<matf, double> approx_ffn_linear(const layer_weights & w, const model_spec & spec,
                                          const fit_config & cfg);

layer_linearization approx_layer(const matf & a, const matf & f, const model_spec & spec,
                                 int64_t layer, double fit_error);

// the three steps above for one layer; the fit seed is mixed with the layer
// index so parallel per-layer runs stay deterministic
layer_linearization linearize_layer(const model_bundle & model, int64_t layer,
                                    const fit_config & cfg);

} // namespace slens
