#pragma once

#include "slens/spectral.hpp"

#include <optional>
#include <string>
#include <vector>

namespace slens {

// Weight-only model signature: the per-layer defect directions, with the
// explosion (else decay) layer marked when a classification is available.
struct model_signature {
    std::string model_id;
    int64_t d = 0;
    int64_t n_layers = 0;
    std::optional<int64_t> preferred_layer;
    std::vector<vecf> directions; // unit, sign-canonicalized, one per layer

    std::string to_json() const;
    static model_signature from_json(const std::string & text);
};

model_signature make_model_signature(const defect_report & report,
                                     const layer_classification & classification,
                                     const std::string & model_id);

struct distance_result {
    double degrees = 0.0;
    bool truncated = false; // depths differed; compared over the shorter prefix
};

// min over index-aligned layers of the acute angle between defect directions
distance_result model_distance(const model_signature & a, const model_signature & b);

struct distance_matrix_result {
    std::vector<std::string> labels;
    matf degrees;                             // symmetric, zero diagonal
    std::vector<std::vector<bool>> comparable; // false entries are missing
};

distance_matrix_result distance_matrix(const std::vector<model_signature> & sigs);

std::string distance_matrix_csv(const distance_matrix_result & m);
// compact text heat table (darker block = smaller angle = closer models)
std::string distance_matrix_heat(const distance_matrix_result & m);

// single-linkage grouping at a user threshold, for lineage clusters
std::vector<std::vector<size_t>> single_linkage_clusters(const distance_matrix_result & m,
                                                         double threshold_degrees);

} // namespace slens
