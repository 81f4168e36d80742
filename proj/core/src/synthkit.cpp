#include "slens/synthkit.hpp"

#include "slens/model_spec.hpp"
#include "slens/rng.hpp"
#include "slens/util.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>

namespace slens {

using nlohmann::ordered_json;

void planted_spec::validate() const {
    auto fail = [](const std::string & msg) {
        throw error(errc::construction, "planted spec: " + msg);
    };
    if (d < 8 || d_ff < 2) fail("d must be >= 8 and d_ff >= 2");
    if (n_layers < 3) fail("need at least three layers");
    if (!(explosion_layer >= 1 && explosion_layer < decay_layer && decay_layer < n_layers)) {
        fail("need 1 <= explosion_layer < decay_layer < n_layers");
    }
    if (vocab < 4) fail("vocab must be at least 4");
    if (!(gain_sigma >= 10.0 || gain_sigma == 0.0)) fail("gain_sigma must be >= 10 (or 0 for the no-plant variant)");
    if (!(decay_lambda > -1.5 && decay_lambda < -0.5)) fail("decay_lambda must be in (-1.5, -0.5)");
    if (delimiter_id <= 0 || delimiter_id >= vocab) fail("delimiter_id out of vocab range");
    if (!u_plant.empty() && int64_t(u_plant.size()) != d) fail("u_plant dimension mismatch");
    if (!v_plant.empty() && int64_t(v_plant.size()) != d) fail("v_plant dimension mismatch");
}

namespace {

constexpr double k_gate_bias = 20.0;       // silu(20) is linear to ~2e-9
constexpr double k_suppress = 1.5;         // explosion-layer v suppressor strength
constexpr double k_decay_aux_gain = 12.0;  // secondary u-writer; atan(1/12) keeps the decay dip under 5 degrees
constexpr double k_side_gain = 2.0;        // small second channel through the explosion FFN;
                                           // the sigma-sized outlier swamps it under per-tensor
                                           // activation quantization unless F2 is exempted
constexpr double k_carrier = 1.0;          // v component of token 0
constexpr double k_delimiter = 1.2;        // v component of the delimiter token
constexpr double k_normal_v = 0.08;        // |v component| of every other token
constexpr double k_normal_noise = 0.35;    // off-v embedding noise scale
constexpr double k_int_attn = 0.002;       // intermediate-layer weight scales; kept
constexpr double k_int_ffn = 0.004;        // tiny so pass-through junk stays << the plant

void normalize_f(vecf & v) {
    double n = norm2(v);
    for (auto & x : v) {
        x = float(double(x) / n);
    }
}

void project_out(vecf & x, const vecf & dir) {
    double c = dot(x, dir);
    for (size_t i = 0; i < x.size(); ++i) {
        x[i] -= float(c * double(dir[i]));
    }
}

vecf random_unit(xorshift_rng & rng, int64_t d) {
    vecf v(size_t(d), 0.0f);
    for (auto & x : v) {
        x = float(rng.gaussian());
    }
    normalize_f(v);
    return v;
}

// directions are a function of the spec alone so that analyses recover the
// same plant regardless of the fill seed
uint64_t spec_hash(const planted_spec & s) {
    uint64_t h = 0xD1CE5EEDull;
    auto mix = [&](uint64_t v) {
        h ^= v + 0x9E3779B97F4A7C15ull + (h << 6) + (h >> 2);
    };
    mix(uint64_t(s.d));
    mix(uint64_t(s.d_ff));
    mix(uint64_t(s.n_layers));
    mix(uint64_t(s.explosion_layer));
    mix(uint64_t(s.decay_layer));
    mix(uint64_t(int64_t(s.gain_sigma * 1e6)));
    mix(uint64_t(int64_t(s.decay_lambda * 1e6)));
    return h;
}

matf rand_mat(xorshift_rng & rng, int64_t r, int64_t c, double scale) {
    matf m(r, c);
    for (auto & x : m.data) {
        x = float(rng.gaussian() * scale);
    }
    return m;
}

std::string synth_spec_json(int64_t d, int64_t n_layers, int64_t vocab, ffn_kind ffn,
                            bool with_ffn_bias) {
    ordered_json j;
    j["hidden_dim"] = d;
    j["n_layers"] = n_layers;
    j["n_heads"] = 2;
    j["n_kv_heads"] = 2;
    j["norm_kind"] = "gain_only";
    j["ffn_kind"] = ffn == ffn_kind::gated_silu ? "gated_silu" : "gated_identity";
    j["attn_layout"] = "sequential";
    j["rope_theta"] = 10000.0;
    j["vocab_size"] = vocab;
    j["pos_embedding"] = "rope";
    j["max_seq"] = 512;
    ordered_json names;
    names["embed"] = "embed";
    names["final_norm_w"] = "final_norm";
    names["unembed"] = "unembed";
    names["attn_norm_w"] = "layer.{L}.attn_norm";
    names["wq"] = "layer.{L}.wq";
    names["wk"] = "layer.{L}.wk";
    names["wv"] = "layer.{L}.wv";
    names["wo"] = "layer.{L}.wo";
    names["ffn_norm_w"] = "layer.{L}.ffn_norm";
    names["w1"] = "layer.{L}.w1";
    if (ffn == ffn_kind::gated_silu) {
        names["w3"] = "layer.{L}.w3";
        names["b1"] = "layer.{L}.b1";
        names["b3"] = "layer.{L}.b3";
    }
    names["w2"] = "layer.{L}.w2";
    j["names"] = names;
    return j.dump(2);
}

} // namespace

std::string planted_truth::to_json() const {
    ordered_json j;
    j["u"] = base64_encode_f32(u);
    j["v"] = base64_encode_f32(v);
    j["w_aux"] = base64_encode_f32(w_aux);
    j["explosion_layer"] = explosion_layer;
    j["decay_layer"] = decay_layer;
    j["sigma"] = sigma;
    j["lambda"] = lambda;
    j["delimiter_id"] = delimiter_id;
    j["carrier_v_component"] = carrier_v_component;
    j["normal_v_component"] = normal_v_component;
    j["seed"] = seed;
    return j.dump(2);
}

planted_truth planted_truth::from_json(const std::string & text) {
    ordered_json j = ordered_json::parse(text);
    planted_truth t;
    t.u = base64_decode_f32(j["u"].get<std::string>());
    t.v = base64_decode_f32(j["v"].get<std::string>());
    t.w_aux = base64_decode_f32(j["w_aux"].get<std::string>());
    t.explosion_layer = j["explosion_layer"].get<int64_t>();
    t.decay_layer = j["decay_layer"].get<int64_t>();
    t.sigma = j["sigma"].get<double>();
    t.lambda = j["lambda"].get<double>();
    t.delimiter_id = j["delimiter_id"].get<int32_t>();
    t.carrier_v_component = j["carrier_v_component"].get<double>();
    t.normal_v_component = j["normal_v_component"].get<double>();
    t.seed = j["seed"].get<uint64_t>();
    return t;
}

planted_model make_planted_model(const planted_spec & spec, uint64_t seed) {
    spec.validate();
    const int64_t d = spec.d, d_ff = spec.d_ff, L = spec.n_layers, V = spec.vocab;

    // plant directions from the spec, fill noise from the seed
    xorshift_rng dir_rng(spec_hash(spec));
    vecf u = spec.u_plant, v = spec.v_plant;
    if (u.empty()) {
        u = random_unit(dir_rng, d);
    }
    if (v.empty()) {
        v = random_unit(dir_rng, d);
        project_out(v, u);
        normalize_f(v);
    }
    vecf w_aux = random_unit(dir_rng, d);
    project_out(w_aux, u);
    project_out(w_aux, v);
    normalize_f(w_aux);
    // side-channel read/write directions for the explosion FFN
    vecf r_side = random_unit(dir_rng, d);
    project_out(r_side, u);
    project_out(r_side, v);
    project_out(r_side, w_aux);
    normalize_f(r_side);
    vecf u_side = random_unit(dir_rng, d);
    project_out(u_side, u);
    project_out(u_side, v);
    project_out(u_side, w_aux);
    project_out(u_side, r_side);
    normalize_f(u_side);

    xorshift_rng rng(seed ? seed : 0xF111ull);

    std::vector<tensor_out> tensors;
    const vecf ones(size_t(d), 1.0f);

    // embeddings: controlled v components, noise orthogonal to u, v, w_aux
    matf embed(V, d);
    for (int64_t i = 0; i < V; ++i) {
        double carrier = i == 0 ? k_carrier
                       : i == spec.delimiter_id ? k_delimiter
                       : k_normal_v * (rng.next_double() < 0.5 ? -1.0 : 1.0);
        vecf noise = random_unit(rng, d);
        project_out(noise, u);
        project_out(noise, v);
        project_out(noise, w_aux);
        normalize_f(noise);
        double nscale = (i == 0 || i == spec.delimiter_id) ? 0.1 : k_normal_noise;
        for (int64_t j = 0; j < d; ++j) {
            embed.at(i, j) = float(carrier * double(v[size_t(j)]) + nscale * double(noise[size_t(j)]));
        }
    }
    tensors.push_back(tensor_out_f32("embed", embed));
    tensors.push_back(tensor_out_f32("final_norm", ones));
    tensors.push_back(tensor_out_f32("unembed", rand_mat(rng, V, d, 0.05)));

    const double sigma_eff = spec.gain_sigma; // silu(k_gate_bias)/k_gate_bias is 1 - 2e-9

    for (int64_t l = 0; l < L; ++l) {
        std::string p = "layer." + std::to_string(l) + ".";
        matf wq(d, d), wk(d, d), wv(d, d), wo(d, d), w1(d_ff, d), w3(d_ff, d), w2(d, d_ff);
        vecf b1(size_t(d_ff), 0.0f), b3(size_t(d_ff), 0.0f);

        if (l == spec.explosion_layer) {
            // attention: uniform causal mean subtracting the v component;
            // zeroes the pre-FFN coefficient of a repeated carrier at
            // position 2 while position 0 keeps half of its own
            for (int64_t i = 0; i < d; ++i) {
                wo.at(i, i) = 1.0f;
                for (int64_t j = 0; j < d; ++j) {
                    wv.at(i, j) = float(-k_suppress * double(v[size_t(i)]) * double(v[size_t(j)]));
                }
            }
            // FFN: gate pinned open by the bias, up path reads v, output writes u;
            // a second pinned unit carries a small side channel whose output
            // only survives full-precision F2 evaluation
            b1[0] = float(k_gate_bias);
            b1[1] = float(k_gate_bias);
            for (int64_t j = 0; j < d; ++j) {
                w3.at(0, j) = float(sigma_eff / k_gate_bias * double(v[size_t(j)]));
                w2.at(j, 0) = u[size_t(j)];
                w3.at(1, j) = float(k_side_gain / k_gate_bias * double(r_side[size_t(j)]));
                w2.at(j, 1) = u_side[size_t(j)];
            }
        } else if (l == spec.decay_layer) {
            // attention-path residual: lambda u u^T + aux u w^T, exactly linear
            for (int64_t i = 0; i < d; ++i) {
                wo.at(i, i) = 1.0f;
                for (int64_t j = 0; j < d; ++j) {
                    wv.at(i, j) = float(spec.decay_lambda * double(u[size_t(i)]) * double(u[size_t(j)]) +
                                        k_decay_aux_gain * double(u[size_t(i)]) * double(w_aux[size_t(j)]));
                }
            }
            // FFN identically zero
        } else {
            wq = rand_mat(rng, d, d, k_int_attn);
            wk = rand_mat(rng, d, d, k_int_attn);
            wv = rand_mat(rng, d, d, k_int_attn);
            wo = rand_mat(rng, d, d, k_int_attn);
            w1 = rand_mat(rng, d_ff, d, k_int_ffn);
            w3 = rand_mat(rng, d_ff, d, k_int_ffn);
            w2 = rand_mat(rng, d, d_ff, k_int_ffn);
        }

        tensors.push_back(tensor_out_f32(p + "attn_norm", ones));
        tensors.push_back(tensor_out_f32(p + "wq", wq));
        tensors.push_back(tensor_out_f32(p + "wk", wk));
        tensors.push_back(tensor_out_f32(p + "wv", wv));
        tensors.push_back(tensor_out_f32(p + "wo", wo));
        tensors.push_back(tensor_out_f32(p + "ffn_norm", ones));
        tensors.push_back(tensor_out_f32(p + "w1", w1));
        tensors.push_back(tensor_out_f32(p + "b1", b1));
        tensors.push_back(tensor_out_f32(p + "w3", w3));
        tensors.push_back(tensor_out_f32(p + "b3", b3));
        tensors.push_back(tensor_out_f32(p + "w2", w2));
    }

    planted_model out;
    out.spec_json = synth_spec_json(d, L, V, ffn_kind::gated_silu, true);
    model_spec ms = model_spec_from_json(out.spec_json);
    out.bundle = load_model_bundle(ms, {parse_safetensors(serialize_safetensors(tensors))});
    out.tensors = std::move(tensors);
    out.truth.u = u;
    out.truth.v = v;
    out.truth.w_aux = w_aux;
    out.truth.explosion_layer = spec.explosion_layer;
    out.truth.decay_layer = spec.decay_layer;
    out.truth.sigma = sigma_eff;
    out.truth.lambda = spec.decay_lambda;
    out.truth.delimiter_id = spec.delimiter_id;
    out.truth.carrier_v_component = k_carrier;
    out.truth.normal_v_component = k_normal_v;
    out.truth.seed = seed;
    return out;
}

linear_model make_linear_model(int64_t d, int64_t n_layers, uint64_t seed) {
    if (d < 2) {
        throw error(errc::construction, "linear model: d must be >= 2");
    }
    xorshift_rng rng(seed ? seed : 0x11EAull);
    const int64_t d_ff = 2 * d;
    const int64_t V = 16;

    std::vector<tensor_out> tensors;
    auto rand_gain = [&](int64_t nn) {
        vecf g(size_t(nn), 0.0f);
        for (auto & x : g) {
            x = float(rng.uniform(0.5, 1.5));
        }
        return g;
    };

    tensors.push_back(tensor_out_f32("embed", rand_mat(rng, V, d, 0.3)));
    tensors.push_back(tensor_out_f32("final_norm", rand_gain(d)));
    tensors.push_back(tensor_out_f32("unembed", rand_mat(rng, V, d, 0.3)));
    const double ws = 0.25 / std::sqrt(double(d));
    for (int64_t l = 0; l < n_layers; ++l) {
        std::string p = "layer." + std::to_string(l) + ".";
        tensors.push_back(tensor_out_f32(p + "attn_norm", rand_gain(d)));
        tensors.push_back(tensor_out_f32(p + "wq", rand_mat(rng, d, d, ws)));
        tensors.push_back(tensor_out_f32(p + "wk", rand_mat(rng, d, d, ws)));
        tensors.push_back(tensor_out_f32(p + "wv", rand_mat(rng, d, d, ws)));
        tensors.push_back(tensor_out_f32(p + "wo", rand_mat(rng, d, d, ws)));
        tensors.push_back(tensor_out_f32(p + "ffn_norm", rand_gain(d)));
        tensors.push_back(tensor_out_f32(p + "w1", rand_mat(rng, d_ff, d, ws)));
        tensors.push_back(tensor_out_f32(p + "w2", rand_mat(rng, d, d_ff, ws)));
    }

    linear_model out;
    out.spec_json = synth_spec_json(d, n_layers, V, ffn_kind::gated_identity, false);
    model_spec ms = model_spec_from_json(out.spec_json);
    out.bundle = load_model_bundle(ms, {parse_safetensors(serialize_safetensors(tensors))});
    out.tensors = std::move(tensors);
    return out;
}

namespace {

synth_files write_common(const std::vector<tensor_out> & tensors, const std::string & spec_json,
                         const std::string * truth_json, const std::string & out_dir) {
    std::filesystem::create_directories(out_dir);
    synth_files f;
    f.model_path = out_dir + "/model.safetensors";
    f.spec_path = out_dir + "/spec.json";
    write_file(f.model_path, serialize_safetensors(tensors, {{"format", "pt"}}));
    write_file(f.spec_path, spec_json + "\n");
    if (truth_json) {
        f.truth_path = out_dir + "/ground_truth.json";
        write_file(f.truth_path, *truth_json + "\n");
    }
    return f;
}

} // namespace

synth_files write_planted_model(const planted_spec & spec, uint64_t seed,
                                const std::string & out_dir) {
    planted_model m = make_planted_model(spec, seed);
    std::string truth = m.truth.to_json();
    return write_common(m.tensors, m.spec_json, &truth, out_dir);
}

synth_files write_linear_model(int64_t d, int64_t n_layers, uint64_t seed,
                               const std::string & out_dir) {
    linear_model m = make_linear_model(d, n_layers, seed);
    return write_common(m.tensors, m.spec_json, nullptr, out_dir);
}

} // namespace slens
