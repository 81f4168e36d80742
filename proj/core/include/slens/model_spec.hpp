#pragma once

#include "slens/errors.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace slens {

enum class norm_kind { rmsnorm, layernorm, gain_only };
enum class ffn_kind { gated_silu, gelu_mlp, gated_identity };
enum class attn_layout { sequential, parallel };
enum class pos_kind { rope, learned, none };
enum class gelu_kind { exact, tanh_approx };

// How a weight role maps onto checkpoint tensors. Fused qkv tensors need
// slice metadata because the paper-era checkpoints disagree on packing:
//   fused_qkv_rows: [heads*3*head_dim, in] with per-head q;k;v row blocks (GPT-NeoX)
//   fused_qkv_cols: [in, 3*out] column thirds, stored transposed (GPT-2 Conv1D)
enum class fuse_layout { plain, fused_qkv_rows, fused_qkv_cols };

struct role_source {
    std::string pattern;   // tensor name, "{L}" is the layer index
    fuse_layout layout = fuse_layout::plain;
    int part = -1;         // 0=q 1=k 2=v when fused
    bool transpose = false; // tensor stored [in, out]
};

struct model_spec {
    int64_t hidden_dim = 0;
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t vocab_size = 0;
    norm_kind norm = norm_kind::rmsnorm;
    ffn_kind ffn = ffn_kind::gated_silu;
    attn_layout layout = attn_layout::sequential;
    double rope_theta = 10000.0;

    // extensions beyond the required schema keys, all with defaults
    double rotary_pct = 1.0;
    pos_kind pos = pos_kind::rope;
    gelu_kind gelu = gelu_kind::exact;
    double norm_eps = 1e-5;
    int64_t max_seq = 2048;
    bool tie_embeddings = false;

    std::map<std::string, role_source> names;

    int64_t head_dim() const { return n_heads > 0 ? hidden_dim / n_heads : 0; }
    int64_t kv_dim() const { return n_kv_heads * head_dim(); }

    bool has_role(const std::string & role) const { return names.count(role) != 0; }
    // substitute {L}; throws resolution error if the role is unknown
    std::string resolve(const std::string & role, int64_t layer) const;
    const role_source & source(const std::string & role) const;

    void validate() const;
};

model_spec model_spec_from_json(const std::string & json_text);
std::string model_spec_to_json(const model_spec & spec);

// built-in name templates for the LLaMA and GPT-NeoX/GPT-2 families
std::optional<std::string> builtin_preset(const std::string & name);
std::vector<std::string> builtin_preset_names();

// path or preset name
model_spec load_model_spec(const std::string & path_or_preset);

} // namespace slens
