#pragma once

#include "slens/bundle.hpp"
#include "slens/safetensors.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace slens {

// Small synthetic decoder with a planted high-norm life cycle: a trigger
// direction v fed by the embeddings, an explosion layer whose FFN responds
// linearly along v with gain sigma into direction u, passive middle layers,
// and a decay layer whose residual has the planted eigenpair (lambda, u).
struct planted_spec {
    int64_t d = 32;
    int64_t d_ff = 64;
    int64_t n_layers = 6;
    int64_t vocab = 48;
    int64_t explosion_layer = 2;
    int64_t decay_layer = 5;
    double gain_sigma = 400.0;  // leading singular value of the explosion FFN map
    double decay_lambda = -1.0; // eigenvalue of the decay residual along u
    int32_t delimiter_id = 1;   // noninitial high-norm carrier
    vecf u_plant; // optional explicit directions; derived from the spec when empty
    vecf v_plant;

    void validate() const;
};

struct planted_truth {
    vecf u, v, w_aux;
    int64_t explosion_layer = 0;
    int64_t decay_layer = 0;
    double sigma = 0.0;
    double lambda = 0.0;
    int32_t delimiter_id = 0;
    double carrier_v_component = 0.0;
    double normal_v_component = 0.0;
    uint64_t seed = 0;

    std::string to_json() const;
    static planted_truth from_json(const std::string & text);
};

struct planted_model {
    model_bundle bundle;
    planted_truth truth;
    std::vector<tensor_out> tensors; // exactly what the checkpoint contains
    std::string spec_json;
};

planted_model make_planted_model(const planted_spec & spec, uint64_t seed);

struct linear_model {
    model_bundle bundle;
    std::vector<tensor_out> tensors;
    std::string spec_json;
};

// every layer is exactly linear: gain-only norms, gate pinned to one; the
// oracle for the engine == L x check
linear_model make_linear_model(int64_t d, int64_t n_layers, uint64_t seed);

// writes model.safetensors, spec.json and (for planted) ground_truth.json
struct synth_files {
    std::string model_path;
    std::string spec_path;
    std::string truth_path;
};
synth_files write_planted_model(const planted_spec & spec, uint64_t seed,
                                const std::string & out_dir);
synth_files write_linear_model(int64_t d, int64_t n_layers, uint64_t seed,
                               const std::string & out_dir);

} // namespace slens
