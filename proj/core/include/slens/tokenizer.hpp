#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace slens {

// GPT-2-style byte-level BPE. Loads either vocab.json + merges.txt or the
// combined tokenizer.json; no external tokenizer dependency.
class bpe_tokenizer {
public:
    static bpe_tokenizer from_vocab_merges(const std::string & vocab_json_path,
                                           const std::string & merges_path);
    static bpe_tokenizer from_tokenizer_json(const std::string & tokenizer_json_path);

    std::vector<int32_t> encode(const std::string & text) const;
    std::string decode(const std::vector<int32_t> & ids) const;

    // raw bytes of one token (may be an incomplete UTF-8 fragment)
    std::string token_bytes(int32_t id) const;
    // printable form with non-ASCII bytes escaped, for report columns
    std::string token_display(int32_t id) const;

    int64_t vocab_size() const { return int64_t(id_to_token_.size()); }

private:
    void finish_init();
    std::vector<int32_t> bpe_chunk(const std::string & chunk_bytes) const;

    std::unordered_map<std::string, int32_t> token_to_id_;
    std::vector<std::string> id_to_token_; // byte-level unicode form
    std::unordered_map<std::string, int32_t> merge_rank_; // "left right"
};

// pre-tokenizer split (exposed for tests): GPT-2 pattern over codepoints
std::vector<std::string> gpt2_pretokenize(const std::string & text);

// raw bytes -> byte-level unicode form (the representation vocab files use)
std::string byte_level_str(const std::string & raw_bytes);

// pre-tokenized id files: 16-byte magic "SLENS-IDS" + NULs, then u32 LE ids
extern const char k_ids_magic[16];
std::vector<int32_t> read_ids_file(const std::string & path);
void write_ids_file(const std::string & path, const std::vector<int32_t> & ids);

} // namespace slens
