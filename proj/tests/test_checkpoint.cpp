#include <doctest.h>

#include <slens/bundle.hpp>
#include <slens/model_spec.hpp>
#include <slens/rng.hpp>
#include <slens/safetensors.hpp>
#include <slens/util.hpp>

#include "helpers.hpp"

#include <cmath>
#include <cstring>
#include <limits>

using namespace slens;

static std::string zero_tensor_file() {
    std::string header = R"({"t":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})";
    std::string file;
    uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) {
        file.push_back(char(uint8_t(n >> (8 * i))));
    }
    file += header;
    file.append(16, '\0');
    return file;
}

TEST_CASE("zero tensor round trip") {
    tensor_store st = parse_safetensors(zero_tensor_file());
    REQUIRE(st.has("t"));
    matf m = st.tensor_mat("t");
    CHECK(m.rows == 2);
    CHECK(m.cols == 2);
    for (float x : m.data) {
        CHECK(x == 0.0f);
    }
}

TEST_CASE("truncated header errors name the offset") {
    std::string file = zero_tensor_file();
    // header length field larger than the file
    std::string bad = file;
    bad[0] = char(0xFF);
    bad[1] = char(0xFF);
    CHECK_THROWS_WITH_AS((void) parse_safetensors(bad),
                         doctest::Contains("truncated header"), const error &);

    CHECK_THROWS_WITH_AS((void) parse_safetensors(std::string("abc")),
                         doctest::Contains("offset 0"), const error &);
}

TEST_CASE("out-of-bounds and overlapping offsets are format errors") {
    std::string header = R"({"t":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},)"
                         R"("s":{"dtype":"F32","shape":[2,2],"data_offsets":[8,24]}})";
    std::string file;
    uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) {
        file.push_back(char(uint8_t(n >> (8 * i))));
    }
    file += header;
    file.append(24, '\0');
    bool threw = false;
    try {
        (void) parse_safetensors(file);
    } catch (const error & e) {
        threw = e.kind() == errc::format;
        CHECK(std::string(e.what()).find("overlap") != std::string::npos);
    }
    CHECK(threw);

    std::string header2 = R"({"t":{"dtype":"F32","shape":[4,4],"data_offsets":[0,64]}})";
    std::string file2;
    n = header2.size();
    for (int i = 0; i < 8; ++i) {
        file2.push_back(char(uint8_t(n >> (8 * i))));
    }
    file2 += header2;
    file2.append(16, '\0'); // too short for 64 bytes
    CHECK_THROWS_AS((void) parse_safetensors(file2), const error &);
}

TEST_CASE("unknown dtype string") {
    std::string header = R"({"t":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})";
    std::string file;
    uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) {
        file.push_back(char(uint8_t(n >> (8 * i))));
    }
    file += header;
    file.append(8, '\0');
    bool threw = false;
    try {
        (void) parse_safetensors(file);
    } catch (const error & e) {
        threw = e.kind() == errc::unsupported_dtype;
    }
    CHECK(threw);
}

TEST_CASE("serializer round trip preserves names, dtypes, shapes, bytes") {
    xorshift_rng rng(3);
    std::vector<tensor_out> tensors;
    matf a(3, 5);
    for (auto & x : a.data) {
        x = float(rng.gaussian());
    }
    tensors.push_back(tensor_out_f32("alpha", a));
    vecf v(7);
    for (auto & x : v) {
        x = float(rng.gaussian());
    }
    tensors.push_back(tensor_out_f32("beta", v));
    tensor_out half;
    half.name = "gamma";
    half.dtype = st_dtype::f16;
    half.shape = {2, 2};
    for (int i = 0; i < 4; ++i) {
        uint16_t h = f32_to_f16(float(rng.gaussian()));
        half.bytes.push_back(uint8_t(h & 0xFF));
        half.bytes.push_back(uint8_t(h >> 8));
    }
    tensors.push_back(half);

    std::string blob = serialize_safetensors(tensors, {{"origin", "unit-test"}});
    tensor_store st = parse_safetensors(blob);
    CHECK(st.metadata.at("origin") == "unit-test");
    CHECK(st.entries.size() == 3);
    for (const auto & t : tensors) {
        const tensor_entry & e = st.entry(t.name);
        CHECK(e.dtype == t.dtype);
        CHECK(e.shape == t.shape);
        CHECK(std::memcmp(st.raw(e), t.bytes.data(), t.bytes.size()) == 0);
    }
    // and the reserialization is bit-identical
    std::vector<tensor_out> again;
    for (const auto & t : tensors) {
        tensor_out o;
        o.name = t.name;
        o.dtype = st.entry(t.name).dtype;
        o.shape = st.entry(t.name).shape;
        const tensor_entry & e = st.entry(t.name);
        o.bytes.assign(st.raw(e), st.raw(e) + (e.end - e.begin));
        again.push_back(o);
    }
    CHECK(serialize_safetensors(again, {{"origin", "unit-test"}}) == blob);
}

TEST_CASE("f16/bf16 widening is value-exact") {
    // every bf16 payload widens to the float whose top 16 bits it is
    for (uint32_t i = 0; i < 0x10000; i += 7) {
        uint16_t h = uint16_t(i);
        float f = bf16_to_f32(h);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        CHECK(bits == uint32_t(h) << 16);
    }
    // f16: exact on representable values incl. subnormals and infinities
    CHECK(f16_to_f32(0x3C00) == 1.0f);
    CHECK(f16_to_f32(0xBC00) == -1.0f);
    CHECK(f16_to_f32(0x0001) == std::ldexp(1.0f, -24)); // smallest subnormal
    CHECK(f16_to_f32(0x7C00) == std::numeric_limits<float>::infinity());
    CHECK(std::isnan(f16_to_f32(0x7E00)));
    CHECK(f16_to_f32(0x0000) == 0.0f);
    CHECK(std::signbit(f16_to_f32(0x8000)));
    // round trip through the narrowing for every finite f16 bit pattern
    for (uint32_t i = 0; i < 0x10000; ++i) {
        uint16_t h = uint16_t(i);
        if ((h & 0x7C00) == 0x7C00) {
            continue; // inf/nan
        }
        float f = f16_to_f32(h);
        CHECK(f32_to_f16(f) == h);
    }
}

TEST_CASE("fuzz totality: arbitrary bytes parse or raise a structured error") {
    xorshift_rng rng(0xF0CC);
    std::string base = zero_tensor_file();
    for (int trial = 0; trial < 300; ++trial) {
        std::string s;
        size_t len = rng.below(200);
        if (trial % 3 == 0) {
            // mutate a valid file
            s = base;
            size_t flips = 1 + rng.below(8);
            for (size_t f = 0; f < flips && !s.empty(); ++f) {
                s[rng.below(s.size())] = char(uint8_t(rng.below(256)));
            }
        } else {
            for (size_t i = 0; i < len; ++i) {
                s.push_back(char(uint8_t(rng.below(256))));
            }
        }
        try {
            tensor_store st = parse_safetensors(s);
            for (const auto & [name, e] : st.entries) {
                (void) st.tensor_f32(name);
            }
        } catch (const error &) {
            // structured failure is the expected outcome
        }
    }
    CHECK(true);
}

static std::string tiny_model_blob(ffn_kind ffn, int64_t d, int64_t d_ff, int64_t layers,
                                   int64_t vocab) {
    xorshift_rng rng(17);
    std::vector<tensor_out> tensors;
    auto rand_mat = [&](int64_t r, int64_t c) {
        matf m(r, c);
        for (auto & x : m.data) {
            x = float(rng.gaussian() * 0.05);
        }
        return m;
    };
    auto ones = [&](int64_t nn) { return vecf(size_t(nn), 1.0f); };
    tensors.push_back(tensor_out_f32("embed", rand_mat(vocab, d)));
    tensors.push_back(tensor_out_f32("final_norm", ones(d)));
    tensors.push_back(tensor_out_f32("unembed", rand_mat(vocab, d)));
    for (int64_t l = 0; l < layers; ++l) {
        std::string p = "layer." + std::to_string(l) + ".";
        tensors.push_back(tensor_out_f32(p + "attn_norm", ones(d)));
        tensors.push_back(tensor_out_f32(p + "wq", rand_mat(d, d)));
        tensors.push_back(tensor_out_f32(p + "wk", rand_mat(d, d)));
        tensors.push_back(tensor_out_f32(p + "wv", rand_mat(d, d)));
        tensors.push_back(tensor_out_f32(p + "wo", rand_mat(d, d)));
        tensors.push_back(tensor_out_f32(p + "ffn_norm", ones(d)));
        tensors.push_back(tensor_out_f32(p + "w1", rand_mat(d_ff, d)));
        if (ffn == ffn_kind::gated_silu) {
            tensors.push_back(tensor_out_f32(p + "w3", rand_mat(d_ff, d)));
        }
        tensors.push_back(tensor_out_f32(p + "w2", rand_mat(d, d_ff)));
    }
    return serialize_safetensors(tensors);
}

static std::string tiny_spec_json(ffn_kind ffn, int64_t d, int64_t layers, int64_t vocab) {
    std::string f = ffn == ffn_kind::gated_silu ? "gated_silu" : "gelu_mlp";
    std::string w3 = ffn == ffn_kind::gated_silu ? R"("w3": "layer.{L}.w3",)" : "";
    return std::string(R"({
      "hidden_dim": )") + std::to_string(d) + R"(, "n_layers": )" + std::to_string(layers) +
           R"(, "n_heads": 2, "n_kv_heads": 2,
      "norm_kind": "rmsnorm", "ffn_kind": ")" + f + R"(", "attn_layout": "sequential",
      "rope_theta": 10000.0, "vocab_size": )" + std::to_string(vocab) + R"(,
      "names": {
        "embed": "embed", "final_norm_w": "final_norm", "unembed": "unembed",
        "attn_norm_w": "layer.{L}.attn_norm",
        "wq": "layer.{L}.wq", "wk": "layer.{L}.wk", "wv": "layer.{L}.wv", "wo": "layer.{L}.wo",
        "ffn_norm_w": "layer.{L}.ffn_norm",
        "w1": "layer.{L}.w1", )" + w3 + R"( "w2": "layer.{L}.w2"
      }
    })";
}

TEST_CASE("bundle load: shapes, layer access, range errors") {
    std::string blob = tiny_model_blob(ffn_kind::gated_silu, 8, 16, 3, 11);
    model_spec spec = model_spec_from_json(tiny_spec_json(ffn_kind::gated_silu, 8, 3, 11));
    model_bundle b = load_model_bundle(spec, {parse_safetensors(blob)});
    CHECK(b.layers.size() == 3);
    CHECK(b.layer(0).w1.rows == 16);
    CHECK(b.layer(0).d_ff() == 16);
    CHECK(b.embedding.rows == 11);
    CHECK_THROWS_AS((void) b.layer(3), const error &);
    CHECK_THROWS_AS((void) b.layer(-1), const error &);
    CHECK(&get_layer_weights(b, 0) == &b.layer(0));
}

TEST_CASE("bundle load: zero-layer degenerate model") {
    std::string blob = tiny_model_blob(ffn_kind::gated_silu, 8, 16, 0, 11);
    model_spec spec = model_spec_from_json(tiny_spec_json(ffn_kind::gated_silu, 8, 0, 11));
    model_bundle b = load_model_bundle(spec, {parse_safetensors(blob)});
    CHECK(b.layers.empty());
    CHECK(b.embedding.rows == 11);
}

TEST_CASE("bundle load: gated_silu spec against a gelu checkpoint resolves to an error") {
    // checkpoint has no w3 tensors, spec demands them
    std::string blob = tiny_model_blob(ffn_kind::gelu_mlp, 8, 16, 2, 11);
    model_spec spec = model_spec_from_json(tiny_spec_json(ffn_kind::gated_silu, 8, 2, 11));
    bool threw = false;
    try {
        (void) load_model_bundle(spec, {parse_safetensors(blob)});
    } catch (const error & e) {
        threw = e.kind() == errc::resolution;
        CHECK(std::string(e.what()).find("w3") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("bundle load: union across shards") {
    std::string blob = tiny_model_blob(ffn_kind::gated_silu, 8, 16, 2, 11);
    tensor_store whole = parse_safetensors(blob);
    // split tensors across two shards
    std::vector<tensor_out> s1, s2;
    int i = 0;
    for (const auto & [name, e] : whole.entries) {
        tensor_out t;
        t.name = name;
        t.dtype = e.dtype;
        t.shape = e.shape;
        t.bytes.assign(whole.raw(e), whole.raw(e) + (e.end - e.begin));
        (i++ % 2 == 0 ? s1 : s2).push_back(t);
    }
    model_spec spec = model_spec_from_json(tiny_spec_json(ffn_kind::gated_silu, 8, 2, 11));
    model_bundle b = load_model_bundle(
        spec, {parse_safetensors(serialize_safetensors(s1)),
               parse_safetensors(serialize_safetensors(s2))});
    CHECK(b.layers.size() == 2);
    // missing shard -> resolution error listing names
    CHECK_THROWS_AS((void) load_model_bundle(spec, {parse_safetensors(serialize_safetensors(s1))}),
                    const error &);
}

TEST_CASE("model spec json rejects schema violations") {
    CHECK_THROWS_AS((void) model_spec_from_json("{"), const error &);
    CHECK_THROWS_AS((void) model_spec_from_json("[]"), const error &);
    CHECK_THROWS_AS((void) model_spec_from_json(R"({"hidden_dim": 8})"), const error &);
    // gelu_mlp with a w3 role is contradictory
    std::string bad = tiny_spec_json(ffn_kind::gated_silu, 8, 1, 7);
    size_t pos = bad.find("gated_silu");
    bad.replace(pos, strlen("gated_silu"), "gelu_mlp");
    CHECK_THROWS_AS((void) model_spec_from_json(bad), const error &);
}

TEST_CASE("builtin presets parse and round trip") {
    for (const auto & name : builtin_preset_names()) {
        auto json = builtin_preset(name);
        REQUIRE(json.has_value());
        model_spec spec = model_spec_from_json(*json);
        CHECK(spec.hidden_dim > 0);
        // round trip through our serializer
        model_spec again = model_spec_from_json(model_spec_to_json(spec));
        CHECK(again.hidden_dim == spec.hidden_dim);
        CHECK(again.names.size() == spec.names.size());
        CHECK(again.norm == spec.norm);
        CHECK(again.rotary_pct == spec.rotary_pct);
    }
    CHECK(!builtin_preset("no-such-model").has_value());
}

TEST_CASE("preset files in the repo match the builtins") {
    for (const char * name : {"pythia-160m", "gpt2-medium", "llama2-7b", "llama3-8b"}) {
        std::string path = std::string(SLENS_SOURCE_DIR) + "/presets/" + name + ".json";
        model_spec from_file = model_spec_from_json(read_file(path));
        model_spec from_builtin = model_spec_from_json(*builtin_preset(name));
        CHECK(model_spec_to_json(from_file) == model_spec_to_json(from_builtin));
    }
}

TEST_CASE("real pythia-160m checkpoint exposes the documented tensors" *
          doctest::skip(!slens::testing::have_model("pythia-160m"))) {
    tensor_store st =
        parse_safetensors_file(slens::testing::model_file("pythia-160m", "model.safetensors"));
    const tensor_entry & e = st.entry("gpt_neox.layers.0.mlp.dense_h_to_4h.weight");
    CHECK(e.shape == std::vector<int64_t>{3072, 768});
    model_spec spec = model_spec_from_json(*builtin_preset("pythia-160m"));
    model_bundle b = load_model_bundle(spec, {st});
    CHECK(b.layers.size() == 12);
    CHECK(b.layer(0).d_ff() == 3072);
    CHECK(b.layer(0).wq.rows == 768);
}
