#include "slens/quant.hpp"

#include "slens/engine.hpp"
#include "slens/util.hpp"

#include <json.hpp>

#include <cmath>

namespace slens {

using nlohmann::ordered_json;

const char * lin_role_name(lin_role r) {
    switch (r) {
        case lin_role::q: return "q";
        case lin_role::k: return "k";
        case lin_role::v: return "v";
        case lin_role::o: return "o";
        case lin_role::w1: return "w1";
        case lin_role::w3: return "w3";
        case lin_role::w2: return "w2";
    }
    return "?";
}

std::optional<lin_role> lin_role_from_name(const std::string & s) {
    for (int i = 0; i < k_n_lin_roles; ++i) {
        if (s == lin_role_name(lin_role(i))) {
            return lin_role(i);
        }
    }
    return std::nullopt;
}

rtn_result quantize_rtn(const float * x, size_t n, int bits) {
    if (bits < 2 || bits > 16) {
        throw error(errc::input, "quantize_rtn: bits must be in [2, 16]");
    }
    float absmax = 0.0f;
    for (size_t i = 0; i < n; ++i) {
        if (!std::isfinite(x[i])) {
            throw error(errc::numeric, "quantize_rtn: non-finite input at index " + std::to_string(i));
        }
        absmax = std::max(absmax, std::fabs(x[i]));
    }
    rtn_result out;
    out.params.bits = bits;
    out.q.assign(n, 0);
    if (absmax == 0.0f) {
        out.params.delta = 1.0;
        out.params.degenerate = true;
        return out;
    }
    const double qmax = double((1 << (bits - 1)) - 1);
    out.params.delta = double(absmax) / qmax;
    for (size_t i = 0; i < n; ++i) {
        double q = std::nearbyint(double(x[i]) / out.params.delta); // half to even
        if (q > qmax) {
            q = qmax;
            ++out.saturated;
        } else if (q < -qmax) {
            q = -qmax;
            ++out.saturated;
        }
        out.q[i] = int32_t(q);
    }
    return out;
}

rtn_result quantize_rtn(const matf & x, int bits) {
    return quantize_rtn(x.data.data(), x.data.size(), bits);
}

vecf dequantize(const rtn_result & r) {
    vecf out(r.q.size(), 0.0f);
    for (size_t i = 0; i < r.q.size(); ++i) {
        out[i] = float(double(r.q[i]) * r.params.delta);
    }
    return out;
}

smoothquant_scales smoothquant_transform(const vecf & act_absmax, matf & w, double alpha) {
    if (int64_t(act_absmax.size()) != w.cols) {
        throw error(errc::shape, "smoothquant_transform: channel count mismatch");
    }
    if (alpha < 0.0 || alpha > 1.0) {
        throw error(errc::input, "smoothquant_transform: alpha must be in [0, 1]");
    }
    smoothquant_scales out;
    out.scales.assign(act_absmax.size(), 1.0f);
    for (int64_t j = 0; j < w.cols; ++j) {
        float wmax = 0.0f;
        for (int64_t i = 0; i < w.rows; ++i) {
            wmax = std::max(wmax, std::fabs(w.at(i, j)));
        }
        double a = double(act_absmax[size_t(j)]);
        double s = 1.0;
        if (a > 0.0 && wmax > 0.0) {
            s = std::pow(a, alpha) / std::pow(double(wmax), 1.0 - alpha);
            if (!(s > 0.0) || !std::isfinite(s)) {
                s = 1.0;
            }
        }
        out.scales[size_t(j)] = float(s);
        for (int64_t i = 0; i < w.rows; ++i) {
            w.at(i, j) = float(double(w.at(i, j)) * s);
        }
    }
    return out;
}

quant_config quant_config::from_json(const std::string & text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception & e) {
        throw error(errc::config, std::string("quant config json: ") + e.what());
    }
    quant_config cfg;
    if (j.contains("scheme")) {
        std::string s = j["scheme"].get<std::string>();
        if (s == "rtn") {
            cfg.scheme = quant_scheme::rtn;
        } else if (s == "smoothquant") {
            cfg.scheme = quant_scheme::smoothquant;
        } else {
            throw error(errc::config, "quant config: unknown scheme \"" + s + "\"");
        }
    }
    if (j.contains("bits")) cfg.bits = j["bits"].get<int>();
    if (j.contains("alpha")) cfg.alpha = j["alpha"].get<double>();
    if (j.contains("calibration_rows")) cfg.calibration_rows = j["calibration_rows"].get<int64_t>();
    if (j.contains("label")) cfg.label = j["label"].get<std::string>();
    if (cfg.bits < 2) {
        throw error(errc::config, "quant config: bits must be >= 2");
    }
    if (cfg.alpha < 0.0 || cfg.alpha > 1.0) {
        throw error(errc::config, "quant config: alpha must be in [0, 1]");
    }
    if (j.contains("exempt")) {
        for (const auto & e : j["exempt"]) {
            int64_t layer = e["layer"].get<int64_t>();
            auto role = lin_role_from_name(e["role"].get<std::string>());
            if (!role) {
                throw error(errc::config,
                            "quant config: unknown exempt role \"" + e["role"].get<std::string>() + "\"");
            }
            cfg.exempt.insert({layer, *role});
        }
    }
    return cfg;
}

std::string quant_config::to_json() const {
    ordered_json j;
    j["scheme"] = scheme == quant_scheme::rtn ? "rtn" : "smoothquant";
    j["bits"] = bits;
    if (scheme == quant_scheme::smoothquant) {
        j["alpha"] = alpha;
        j["calibration_rows"] = calibration_rows;
    }
    if (!label.empty()) {
        j["label"] = label;
    }
    ordered_json ex = ordered_json::array();
    for (const auto & [layer, role] : exempt) {
        ordered_json e;
        e["layer"] = layer;
        e["role"] = lin_role_name(role);
        ex.push_back(e);
    }
    j["exempt"] = ex;
    return j.dump(2);
}

namespace {

const matf * role_matrix(const layer_weights & w, lin_role r) {
    switch (r) {
        case lin_role::q: return &w.wq;
        case lin_role::k: return &w.wk;
        case lin_role::v: return &w.wv;
        case lin_role::o: return &w.wo;
        case lin_role::w1: return &w.w1;
        case lin_role::w3: return w.w3.empty() ? nullptr : &w.w3;
        case lin_role::w2: return &w.w2;
    }
    return nullptr;
}

const vecf * role_bias(const layer_weights & w, lin_role r) {
    switch (r) {
        case lin_role::q: return &w.bq;
        case lin_role::k: return &w.bk;
        case lin_role::v: return &w.bv;
        case lin_role::o: return &w.bo;
        case lin_role::w1: return &w.b1;
        case lin_role::w3: return &w.b3;
        case lin_role::w2: return &w.b2;
    }
    return nullptr;
}

} // namespace

quant_view apply_quant_config(const model_bundle & model, const quant_config & cfg,
                              const std::vector<std::vector<int32_t>> & calib) {
    const model_spec & spec = model.spec;

    for (const auto & [layer, role] : cfg.exempt) {
        if (layer < 0 || layer >= spec.n_layers) {
            throw error(errc::config, "quant config: exempt layer " + std::to_string(layer) +
                                          " out of range");
        }
        if (!role_matrix(model.layer(layer), role)) {
            throw error(errc::config, std::string("quant config: exempt role \"") +
                                          lin_role_name(role) + "\" absent from the model");
        }
    }

    // per-(layer, role, channel) absmax over the calibration pass
    std::vector<std::array<vecf, k_n_lin_roles>> absmax(size_t(spec.n_layers));
    if (cfg.scheme == quant_scheme::smoothquant) {
        if (calib.empty()) {
            throw error(errc::config, "smoothquant needs a calibration corpus");
        }
        engine_options opt;
        opt.lin_observer = [&](int64_t layer, lin_role role, const matf & input) {
            vecf & acc = absmax[size_t(layer)][size_t(role)];
            if (acc.empty()) {
                acc.assign(size_t(input.cols), 0.0f);
            }
            for (int64_t t = 0; t < input.rows; ++t) {
                const float * row = input.row(t);
                for (int64_t j = 0; j < input.cols; ++j) {
                    acc[size_t(j)] = std::max(acc[size_t(j)], std::fabs(row[j]));
                }
            }
        };
        int64_t rows = 0;
        for (const auto & ids : calib) {
            if (ids.empty()) {
                continue;
            }
            (void) forward_trace(model, ids, {}, opt);
            if (++rows >= cfg.calibration_rows) {
                break;
            }
        }
        if (rows == 0) {
            throw error(errc::config, "smoothquant calibration corpus is empty");
        }
    }

    quant_view view;
    view.layers.resize(size_t(spec.n_layers));
    for (int64_t l = 0; l < spec.n_layers; ++l) {
        const layer_weights & w = model.layer(l);
        for (int r = 0; r < k_n_lin_roles; ++r) {
            lin_role role = lin_role(r);
            if (cfg.exempt.count({l, role})) {
                continue; // full precision
            }
            const matf * wm = role_matrix(w, role);
            if (!wm || wm->empty()) {
                continue;
            }
            linear_view lv;
            lv.bits = cfg.bits;
            matf scaled = *wm;
            if (cfg.scheme == quant_scheme::smoothquant) {
                const vecf & am = absmax[size_t(l)][size_t(r)];
                if (!am.empty()) {
                    smoothquant_scales ss = smoothquant_transform(am, scaled, cfg.alpha);
                    lv.act_div = ss.scales;
                }
            }
            rtn_result rq = quantize_rtn(scaled, cfg.bits);
            lv.w_deq.rows = scaled.rows;
            lv.w_deq.cols = scaled.cols;
            lv.w_deq.data = dequantize(rq);
            const vecf * b = role_bias(w, role);
            lv.b = b ? *b : vecf{};
            lv.quantized = true;
            view.layers[size_t(l)][size_t(r)] = std::move(lv);
        }
    }
    return view;
}

std::vector<quant_report_row> quant_report(const model_bundle & model,
                                           const std::vector<int32_t> & corpus_ids,
                                           const std::vector<quant_config> & configs) {
    if (configs.empty()) {
        throw error(errc::input, "quant report: no configurations given");
    }
    std::vector<quant_report_row> rows;
    {
        quant_report_row base;
        base.label = "baseline";
        base.method = "-";
        base.weight = "-";
        base.activation = "-";
        base.ppl = perplexity(model, corpus_ids);
        rows.push_back(base);
    }
    // calibration reuses the evaluation stream split into rows of 64 ids
    std::vector<std::vector<int32_t>> calib_rows;
    for (size_t i = 0; i < corpus_ids.size(); i += 64) {
        calib_rows.emplace_back(corpus_ids.begin() + std::ptrdiff_t(i),
                                corpus_ids.begin() + std::ptrdiff_t(std::min(corpus_ids.size(), i + 64)));
    }
    for (const auto & cfg : configs) {
        quant_view view = apply_quant_config(model, cfg, calib_rows);
        engine_options opt;
        opt.quant = &view;
        quant_report_row row;
        bool star = !cfg.exempt.empty();
        row.method = (cfg.scheme == quant_scheme::rtn ? "RTN" : "SQ") + std::string(star ? "*" : "");
        row.label = cfg.label.empty() ? row.method : cfg.label;
        row.weight = "Per-Tensor";
        row.activation = star ? "Per-Tensor*" : "Per-Tensor";
        row.ppl = perplexity(model, corpus_ids, opt);
        rows.push_back(row);
    }
    return rows;
}

std::string quant_report_csv(const std::vector<quant_report_row> & rows) {
    std::string out = "label,method,weight,activation,ppl\n";
    for (const auto & r : rows) {
        out += r.label + "," + r.method + "," + r.weight + "," + r.activation + "," +
               fmt_float(r.ppl) + "\n";
    }
    return out;
}

std::string quant_report_markdown(const std::vector<quant_report_row> & rows) {
    std::string out = "| Method | Weight | Activation | PPL |\n|---|---|---|---|\n";
    for (const auto & r : rows) {
        out += "| " + r.method + " | " + r.weight + " | " + r.activation + " | " +
               fmt_float(r.ppl) + " |\n";
    }
    return out;
}

} // namespace slens
