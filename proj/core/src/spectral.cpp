#include "slens/spectral.hpp"

#include "slens/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace slens {

using nlohmann::ordered_json;

svd_triplet layer_defect_direction(const layer_linearization & lin, const svd_options & opt) {
    // k=2 so exact ties resolve canonically and get flagged
    int k = lin.L.cols >= 2 ? 2 : 1;
    auto trips = leading_singular_triplets(lin.L, k, opt);
    svd_triplet t = trips[0];
    sign_canonicalize(t.u);
    return t;
}

std::vector<double> defect_angle_profile(const defect_report & report, const vecf & reference) {
    if (int64_t(reference.size()) != report.d) {
        throw error(errc::shape, "defect_angle_profile: reference dimension mismatch");
    }
    std::vector<double> out;
    out.reserve(report.layers.size());
    for (const auto & rec : report.layers) {
        out.push_back(acute_angle(rec.defect_direction, reference));
    }
    return out;
}

decay_result decay_eigen_analysis(const layer_linearization & lin, const vecf & reference,
                                  const eigen_options & opt) {
    if (int64_t(reference.size()) != lin.R.cols) {
        throw error(errc::shape, "decay_eigen_analysis: reference dimension mismatch");
    }
    vecf v0 = reference;
    double n = norm2(v0);
    if (n == 0.0) {
        throw error(errc::input, "decay_eigen_analysis: zero reference");
    }
    for (auto & x : v0) {
        x = float(double(x) / n);
    }
    decay_result out;
    out.pair = eigenpair_near(lin.R, v0, opt);
    out.angle = acute_angle(out.pair.w, reference);
    return out;
}

svd_triplet explosion_subspace(const layer_linearization & lin, const svd_options & opt) {
    int k = lin.F.cols >= 2 ? 2 : 1;
    auto trips = leading_singular_triplets(lin.F, k, opt);
    svd_triplet t = trips[0];
    sign_canonicalize(t.v);
    return t;
}

std::vector<svd_triplet> ffn_top_triplets(const layer_linearization & lin, int k,
                                          const svd_options & opt) {
    auto trips = leading_singular_triplets(lin.F, k, opt);
    for (auto & t : trips) {
        sign_canonicalize(t.v);
    }
    return trips;
}

std::vector<double> ffn_response_spectrum(const model_bundle & model, int64_t layer,
                                          const std::vector<vecf> & inputs) {
    std::vector<double> norms;
    norms.reserve(inputs.size());
    for (const auto & v : inputs) {
        vecf out = ffn_module_output(model, layer, v);
        norms.push_back(norm2(out));
    }
    return norms;
}

layer_classification classify_layers(const defect_report & report, const norm_trace & trace,
                                     double tau, double high_norm_threshold) {
    if (trace.norms.rows != report.n_layers + 1) {
        throw error(errc::shape, "classify_layers: trace and report disagree on layer count");
    }
    if (tau <= 1.0) {
        throw error(errc::input, "classify_layers: tau must exceed 1");
    }
    const int64_t T = trace.norms.cols;
    double thr = high_norm_threshold;
    if (thr <= 0.0) {
        thr = 0.5 * trace.max_norm();
    }

    layer_classification out;
    for (int64_t l = 0; l < report.n_layers; ++l) {
        double max_ratio = 0.0;
        double min_high_ratio = 1e300;
        bool any_high = false;
        for (int64_t t = 0; t < T; ++t) {
            double before = trace.norms.at(l, t);
            double after = trace.norms.at(l + 1, t);
            double ratio = after / std::max(before, 1e-30);
            max_ratio = std::max(max_ratio, ratio);
            if (before > thr) {
                any_high = true;
                min_high_ratio = std::min(min_high_ratio, ratio);
            }
        }
        const defect_record & rec = report.layers[size_t(l)];
        bool is_explosion = max_ratio >= tau;
        bool is_decay = any_high && min_high_ratio <= 1.0 / tau;
        if (is_explosion && is_decay) {
            // a layer cannot be both; the eigen evidence decides
            bool negative_eigen = rec.decay && rec.decay->pair.lambda < 0.0 &&
                                  rec.decay->angle < 15.0;
            (negative_eigen ? is_explosion : is_decay) = false;
        }
        if (is_explosion) {
            out.explosion_layers.push_back(l);
            out.evidence.push_back({l, "explosion", max_ratio, rec.angle_to_reference,
                                    rec.decay ? rec.decay->pair.lambda : 0.0,
                                    rec.decay.has_value()});
        }
        if (is_decay) {
            out.decay_layers.push_back(l);
            out.evidence.push_back({l, "decay", min_high_ratio, rec.angle_to_reference,
                                    rec.decay ? rec.decay->pair.lambda : 0.0,
                                    rec.decay.has_value()});
        }
    }
    out.empty_warning = out.explosion_layers.empty() && out.decay_layers.empty();
    return out;
}

std::string layer_classification::to_json() const {
    ordered_json j;
    j["explosion_layers"] = explosion_layers;
    j["decay_layers"] = decay_layers;
    j["empty_warning"] = empty_warning;
    ordered_json ev = ordered_json::array();
    for (const auto & e : evidence) {
        ordered_json r;
        r["layer"] = e.layer;
        r["kind"] = e.kind;
        r["norm_ratio"] = e.norm_ratio;
        r["angle_to_reference"] = e.angle;
        if (e.has_eigenvalue) {
            r["eigenvalue"] = e.eigenvalue;
        }
        ev.push_back(r);
    }
    j["evidence"] = ev;
    return j.dump(2);
}

defect_report build_defect_report(const model_bundle & model, const std::string & model_id,
                                  const report_options & opt) {
    const model_spec & spec = model.spec;
    defect_report report;
    report.model_id = model_id;
    report.d = spec.hidden_dim;
    report.n_layers = spec.n_layers;

    // pass 1: linearize, take the SVD-side quantities, keep only R
    std::vector<matf> residuals;
    residuals.reserve(size_t(spec.n_layers));
    for (int64_t l = 0; l < spec.n_layers; ++l) {
        layer_linearization lin = linearize_layer(model, l, opt.fit);
        defect_record rec;
        rec.layer = l;
        svd_triplet dt = layer_defect_direction(lin, opt.svd);
        rec.defect_direction = dt.u;
        rec.sigma1 = dt.sigma;
        rec.degenerate = dt.degenerate;
        svd_triplet et = explosion_subspace(lin, opt.svd);
        rec.explosion_v1 = et.v;
        rec.explosion_sigma = et.sigma;
        rec.explosion_degenerate = et.degenerate;
        rec.f1_fit_error = lin.f1_fit_error;
        report.layers.push_back(std::move(rec));
        residuals.push_back(std::move(lin.R));
    }

    // reference resolution
    if (!opt.reference.empty()) {
        if (int64_t(opt.reference.size()) != spec.hidden_dim) {
            throw error(errc::shape, "build_defect_report: reference dimension mismatch");
        }
        report.reference = opt.reference;
        report.reference_source = opt.reference_source;
    } else {
        // data-free fallback: the defect direction of the strongest layer
        size_t best = 0;
        for (size_t i = 1; i < report.layers.size(); ++i) {
            if (report.layers[i].sigma1 > report.layers[best].sigma1) {
                best = i;
            }
        }
        if (report.layers.empty()) {
            throw error(errc::input, "build_defect_report: zero-layer model has no reference");
        }
        report.reference = report.layers[best].defect_direction;
        report.reference_source = "sigma1-fallback";
    }

    // pass 2: angles and the decay eigen analysis against the reference
    for (int64_t l = 0; l < spec.n_layers; ++l) {
        defect_record & rec = report.layers[size_t(l)];
        rec.angle_to_reference = acute_angle(rec.defect_direction, report.reference);
        layer_linearization stub;
        stub.R = std::move(residuals[size_t(l)]);
        try {
            decay_result dr = decay_eigen_analysis(stub, report.reference, opt.eigen);
            rec.decay = std::move(dr);
        } catch (const convergence_error & e) {
            // keep the best iterate the solver carried
            decay_result dr;
            dr.pair.lambda = e.best_value;
            dr.pair.w = e.best_vector;
            dr.pair.residual = e.best_residual;
            dr.pair.converged = false;
            dr.angle = dr.pair.w.empty() ? 90.0 : acute_angle(dr.pair.w, report.reference);
            rec.decay = std::move(dr);
        }
    }
    return report;
}

std::string defect_report::to_json() const {
    ordered_json j;
    j["model_id"] = model_id;
    j["d"] = d;
    j["n_layers"] = n_layers;
    ordered_json ref;
    ref["source"] = reference_source;
    ref["direction"] = base64_encode_f32(reference);
    j["reference"] = ref;
    ordered_json arr = ordered_json::array();
    for (const auto & rec : layers) {
        ordered_json r;
        r["layer"] = rec.layer;
        r["sigma1"] = rec.sigma1;
        r["degenerate"] = rec.degenerate;
        r["defect_direction"] = base64_encode_f32(rec.defect_direction);
        r["angle_to_reference"] = rec.angle_to_reference;
        r["explosion_sigma"] = rec.explosion_sigma;
        r["explosion_v1"] = base64_encode_f32(rec.explosion_v1);
        r["explosion_degenerate"] = rec.explosion_degenerate;
        r["f1_fit_error"] = rec.f1_fit_error;
        if (rec.decay) {
            ordered_json dj;
            dj["lambda"] = rec.decay->pair.lambda;
            dj["residual"] = rec.decay->pair.residual;
            dj["converged"] = rec.decay->pair.converged;
            dj["angle_to_reference"] = rec.decay->angle;
            dj["vector"] = base64_encode_f32(rec.decay->pair.w);
            r["decay"] = dj;
        } else {
            r["decay"] = nullptr;
        }
        arr.push_back(r);
    }
    j["layers"] = arr;
    return j.dump(2);
}

defect_report defect_report::from_json(const std::string & text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception & e) {
        throw error(errc::format, std::string("defect report json: ") + e.what());
    }
    defect_report r;
    r.model_id = j["model_id"].get<std::string>();
    r.d = j["d"].get<int64_t>();
    r.n_layers = j["n_layers"].get<int64_t>();
    r.reference = base64_decode_f32(j["reference"]["direction"].get<std::string>());
    r.reference_source = j["reference"]["source"].get<std::string>();
    for (const auto & rec : j["layers"]) {
        defect_record d2;
        d2.layer = rec["layer"].get<int64_t>();
        d2.sigma1 = rec["sigma1"].get<double>();
        d2.degenerate = rec["degenerate"].get<bool>();
        d2.defect_direction = base64_decode_f32(rec["defect_direction"].get<std::string>());
        d2.angle_to_reference = rec["angle_to_reference"].get<double>();
        d2.explosion_sigma = rec["explosion_sigma"].get<double>();
        d2.explosion_v1 = base64_decode_f32(rec["explosion_v1"].get<std::string>());
        d2.explosion_degenerate = rec["explosion_degenerate"].get<bool>();
        d2.f1_fit_error = rec["f1_fit_error"].get<double>();
        if (!rec["decay"].is_null()) {
            decay_result dr;
            dr.pair.lambda = rec["decay"]["lambda"].get<double>();
            dr.pair.residual = rec["decay"]["residual"].get<double>();
            dr.pair.converged = rec["decay"]["converged"].get<bool>();
            dr.angle = rec["decay"]["angle_to_reference"].get<double>();
            dr.pair.w = base64_decode_f32(rec["decay"]["vector"].get<std::string>());
            d2.decay = std::move(dr);
        }
        r.layers.push_back(std::move(d2));
    }
    return r;
}

} // namespace slens
