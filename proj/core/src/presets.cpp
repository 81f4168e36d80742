#include "slens/model_spec.hpp"

#include <map>

namespace slens {

namespace {

// GPT-NeoX family: fused qkv with per-head [q;k;v] row blocks, partial rotary.
std::string neox_spec(int64_t d, int64_t layers, int64_t heads, int64_t d_ff, int64_t vocab) {
    (void) d_ff; // implied by the checkpoint tensors
    return std::string(R"({
  "hidden_dim": )") + std::to_string(d) + R"(,
  "n_layers": )" + std::to_string(layers) + R"(,
  "n_heads": )" + std::to_string(heads) + R"(,
  "n_kv_heads": )" + std::to_string(heads) + R"(,
  "norm_kind": "layernorm",
  "ffn_kind": "gelu_mlp",
  "attn_layout": "parallel",
  "rope_theta": 10000.0,
  "vocab_size": )" + std::to_string(vocab) + R"(,
  "rotary_pct": 0.25,
  "pos_embedding": "rope",
  "norm_eps": 1e-5,
  "max_seq": 2048,
  "names": {
    "embed": "gpt_neox.embed_in.weight",
    "attn_norm_w": "gpt_neox.layers.{L}.input_layernorm.weight",
    "attn_norm_b": "gpt_neox.layers.{L}.input_layernorm.bias",
    "wq": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.weight", "layout": "fused_qkv_rows", "part": "q"},
    "wk": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.weight", "layout": "fused_qkv_rows", "part": "k"},
    "wv": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.weight", "layout": "fused_qkv_rows", "part": "v"},
    "bq": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.bias", "layout": "fused_qkv_rows", "part": "q"},
    "bk": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.bias", "layout": "fused_qkv_rows", "part": "k"},
    "bv": {"tensor": "gpt_neox.layers.{L}.attention.query_key_value.bias", "layout": "fused_qkv_rows", "part": "v"},
    "wo": "gpt_neox.layers.{L}.attention.dense.weight",
    "bo": "gpt_neox.layers.{L}.attention.dense.bias",
    "ffn_norm_w": "gpt_neox.layers.{L}.post_attention_layernorm.weight",
    "ffn_norm_b": "gpt_neox.layers.{L}.post_attention_layernorm.bias",
    "w1": "gpt_neox.layers.{L}.mlp.dense_h_to_4h.weight",
    "b1": "gpt_neox.layers.{L}.mlp.dense_h_to_4h.bias",
    "w2": "gpt_neox.layers.{L}.mlp.dense_4h_to_h.weight",
    "b2": "gpt_neox.layers.{L}.mlp.dense_4h_to_h.bias",
    "final_norm_w": "gpt_neox.final_layer_norm.weight",
    "final_norm_b": "gpt_neox.final_layer_norm.bias",
    "unembed": "embed_out.weight"
  }
})";
}

// GPT-2 family: Conv1D tensors stored [in, out]; fused qkv in column thirds.
std::string gpt2_spec(int64_t d, int64_t layers, int64_t heads, int64_t vocab) {
    return std::string(R"({
  "hidden_dim": )") + std::to_string(d) + R"(,
  "n_layers": )" + std::to_string(layers) + R"(,
  "n_heads": )" + std::to_string(heads) + R"(,
  "n_kv_heads": )" + std::to_string(heads) + R"(,
  "norm_kind": "layernorm",
  "ffn_kind": "gelu_mlp",
  "attn_layout": "sequential",
  "rope_theta": 10000.0,
  "vocab_size": )" + std::to_string(vocab) + R"(,
  "pos_embedding": "learned",
  "gelu_variant": "tanh",
  "norm_eps": 1e-5,
  "max_seq": 1024,
  "tie_embeddings": true,
  "names": {
    "embed": "wte.weight",
    "pos_embed": "wpe.weight",
    "attn_norm_w": "h.{L}.ln_1.weight",
    "attn_norm_b": "h.{L}.ln_1.bias",
    "wq": {"tensor": "h.{L}.attn.c_attn.weight", "layout": "fused_qkv_cols", "part": "q", "transpose": true},
    "wk": {"tensor": "h.{L}.attn.c_attn.weight", "layout": "fused_qkv_cols", "part": "k", "transpose": true},
    "wv": {"tensor": "h.{L}.attn.c_attn.weight", "layout": "fused_qkv_cols", "part": "v", "transpose": true},
    "bq": {"tensor": "h.{L}.attn.c_attn.bias", "layout": "fused_qkv_cols", "part": "q"},
    "bk": {"tensor": "h.{L}.attn.c_attn.bias", "layout": "fused_qkv_cols", "part": "k"},
    "bv": {"tensor": "h.{L}.attn.c_attn.bias", "layout": "fused_qkv_cols", "part": "v"},
    "wo": {"tensor": "h.{L}.attn.c_proj.weight", "transpose": true},
    "bo": "h.{L}.attn.c_proj.bias",
    "ffn_norm_w": "h.{L}.ln_2.weight",
    "ffn_norm_b": "h.{L}.ln_2.bias",
    "w1": {"tensor": "h.{L}.mlp.c_fc.weight", "transpose": true},
    "b1": "h.{L}.mlp.c_fc.bias",
    "w2": {"tensor": "h.{L}.mlp.c_proj.weight", "transpose": true},
    "b2": "h.{L}.mlp.c_proj.bias",
    "final_norm_w": "ln_f.weight",
    "final_norm_b": "ln_f.bias"
  }
})";
}

std::string llama_spec(int64_t d, int64_t layers, int64_t heads, int64_t kv_heads, int64_t vocab,
                       double theta, int64_t max_seq) {
    return std::string(R"({
  "hidden_dim": )") + std::to_string(d) + R"(,
  "n_layers": )" + std::to_string(layers) + R"(,
  "n_heads": )" + std::to_string(heads) + R"(,
  "n_kv_heads": )" + std::to_string(kv_heads) + R"(,
  "norm_kind": "rmsnorm",
  "ffn_kind": "gated_silu",
  "attn_layout": "sequential",
  "rope_theta": )" + std::to_string(theta) + R"(,
  "vocab_size": )" + std::to_string(vocab) + R"(,
  "pos_embedding": "rope",
  "norm_eps": 1e-5,
  "max_seq": )" + std::to_string(max_seq) + R"(,
  "names": {
    "embed": "model.embed_tokens.weight",
    "attn_norm_w": "model.layers.{L}.input_layernorm.weight",
    "wq": "model.layers.{L}.self_attn.q_proj.weight",
    "wk": "model.layers.{L}.self_attn.k_proj.weight",
    "wv": "model.layers.{L}.self_attn.v_proj.weight",
    "wo": "model.layers.{L}.self_attn.o_proj.weight",
    "ffn_norm_w": "model.layers.{L}.post_attention_layernorm.weight",
    "w1": "model.layers.{L}.mlp.gate_proj.weight",
    "w3": "model.layers.{L}.mlp.up_proj.weight",
    "w2": "model.layers.{L}.mlp.down_proj.weight",
    "final_norm_w": "model.norm.weight",
    "unembed": "lm_head.weight"
  }
})";
}

std::map<std::string, std::string> make_presets() {
    std::map<std::string, std::string> p;
    p["pythia-160m"] = neox_spec(768, 12, 12, 3072, 50304);
    p["pythia-410m"] = neox_spec(1024, 24, 16, 4096, 50304);
    p["pythia-1b"] = neox_spec(2048, 16, 8, 8192, 50304);
    p["gpt2"] = gpt2_spec(768, 12, 12, 50257);
    p["gpt2-medium"] = gpt2_spec(1024, 24, 16, 50257);
    p["gpt2-large"] = gpt2_spec(1280, 36, 20, 50257);
    p["llama2-7b"] = llama_spec(4096, 32, 32, 32, 32000, 10000.0, 4096);
    p["vicuna1.5-7b"] = llama_spec(4096, 32, 32, 32, 32000, 10000.0, 4096);
    p["llama3-8b"] = llama_spec(4096, 32, 32, 8, 128256, 500000.0, 8192);
    return p;
}

const std::map<std::string, std::string> & presets() {
    static const std::map<std::string, std::string> p = make_presets();
    return p;
}

} // namespace

std::optional<std::string> builtin_preset(const std::string & name) {
    auto it = presets().find(name);
    if (it == presets().end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<std::string> builtin_preset_names() {
    std::vector<std::string> names;
    for (const auto & [k, v] : presets()) {
        names.push_back(k);
    }
    return names;
}

} // namespace slens
