#pragma once

#include "slens/engine.hpp"
#include "slens/linalg.hpp"
#include "slens/linearize.hpp"

#include <optional>
#include <string>
#include <vector>

namespace slens {

struct decay_result {
    eigen_pair pair;
    double angle = 0.0; // acute angle between pair.w and the reference
};

struct defect_record {
    int64_t layer = 0;
    vecf defect_direction; // leading left singular vector of L
    double sigma1 = 0.0;
    bool degenerate = false;
    double angle_to_reference = 0.0;
    std::optional<decay_result> decay;
    vecf explosion_v1; // leading right singular vector of F
    double explosion_sigma = 0.0;
    bool explosion_degenerate = false;
    double f1_fit_error = 0.0;
};

struct defect_report {
    std::string model_id;
    int64_t d = 0;
    int64_t n_layers = 0;
    vecf reference;
    std::string reference_source; // "empirical" | "sigma1-fallback" | "explicit"
    std::vector<defect_record> layers;

    std::string to_json() const;
    static defect_report from_json(const std::string & text);
};

// leading left singular triplet of L, sign-canonicalized, degeneracy flagged
svd_triplet layer_defect_direction(const layer_linearization & lin,
                                   const svd_options & opt = {});

// acute angle per layer against a reference direction, in layer order
std::vector<double> defect_angle_profile(const defect_report & report, const vecf & reference);

// Rayleigh-quotient iteration on R started at the reference
decay_result decay_eigen_analysis(const layer_linearization & lin, const vecf & reference,
                                  const eigen_options & opt = {});

// leading right singular triplet of F (the explosion subspace)
svd_triplet explosion_subspace(const layer_linearization & lin, const svd_options & opt = {});

// top-k triplets of F, for the response spectrum
std::vector<svd_triplet> ffn_top_triplets(const layer_linearization & lin, int k,
                                          const svd_options & opt = {});

// norms of the exact nonlinear FFN outputs over the given unit input vectors
std::vector<double> ffn_response_spectrum(const model_bundle & model, int64_t layer,
                                          const std::vector<vecf> & inputs);

struct layer_classification {
    std::vector<int64_t> explosion_layers;
    std::vector<int64_t> decay_layers;
    struct evidence_row {
        int64_t layer = 0;
        std::string kind; // "explosion" | "decay"
        double norm_ratio = 0.0;
        double angle = 0.0;
        double eigenvalue = 0.0;
        bool has_eigenvalue = false;
    };
    std::vector<evidence_row> evidence;
    bool empty_warning = false;

    std::string to_json() const;
};

// explosion: some token's norm ratio (out/in) >= tau; decay: some token that
// was high-norm at the layer input drops to <= 1/tau. high_norm_threshold
// <= 0 selects 0.5 x the max norm in the trace.
layer_classification classify_layers(const defect_report & report, const norm_trace & trace,
                                     double tau = 5.0, double high_norm_threshold = 0.0);

struct report_options {
    fit_config fit;
    svd_options svd;
    eigen_options eigen;
    // empty: use the empirical direction if given, else the sigma1 fallback
    vecf reference;
    std::string reference_source = "explicit";
};

// full per-layer analysis; reference resolution per the options
defect_report build_defect_report(const model_bundle & model, const std::string & model_id,
                                  const report_options & opt);

} // namespace slens
