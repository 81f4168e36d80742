#include "slens/tokenizer.hpp"

#include "slens/errors.hpp"
#include "slens/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>

namespace slens {

using nlohmann::ordered_json;

namespace {

// ---- codepoint helpers ----

void append_utf8(std::string & out, uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(char(cp));
    } else if (cp < 0x800) {
        out.push_back(char(0xC0 | (cp >> 6)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(char(0xE0 | (cp >> 12)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(char(0xF0 | (cp >> 18)));
        out.push_back(char(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(char(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(char(0x80 | (cp & 0x3F)));
    }
}

// decode UTF-8 into codepoints; bad sequences fall back to latin-1 bytes
std::vector<uint32_t> utf8_codepoints(const std::string & s) {
    std::vector<uint32_t> cps;
    cps.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        uint8_t c = uint8_t(s[i]);
        uint32_t cp = c;
        size_t len = 1;
        if (c >= 0xF0 && i + 3 < s.size()) {
            cp = c & 0x07;
            len = 4;
        } else if (c >= 0xE0 && i + 2 < s.size()) {
            cp = c & 0x0F;
            len = 3;
        } else if (c >= 0xC0 && i + 1 < s.size()) {
            cp = c & 0x1F;
            len = 2;
        }
        if (len > 1) {
            bool ok = true;
            uint32_t acc = cp;
            for (size_t k = 1; k < len; ++k) {
                uint8_t cc = uint8_t(s[i + k]);
                if ((cc & 0xC0) != 0x80) {
                    ok = false;
                    break;
                }
                acc = acc << 6 | (cc & 0x3F);
            }
            if (ok) {
                cps.push_back(acc);
                i += len;
                continue;
            }
        }
        cps.push_back(c);
        ++i;
    }
    return cps;
}

// ---- GPT-2 byte <-> unicode table ----

struct byte_unicode_table {
    std::array<uint32_t, 256> byte_to_cp{};
    std::unordered_map<uint32_t, uint8_t> cp_to_byte;

    byte_unicode_table() {
        std::array<bool, 256> direct{};
        auto mark = [&](int lo, int hi) {
            for (int c = lo; c <= hi; ++c) {
                direct[size_t(c)] = true;
            }
        };
        mark('!', '~');
        mark(0xA1, 0xAC);
        mark(0xAE, 0xFF);
        uint32_t n = 0;
        for (int b = 0; b < 256; ++b) {
            uint32_t cp = direct[size_t(b)] ? uint32_t(b) : 256 + n++;
            byte_to_cp[size_t(b)] = cp;
            cp_to_byte[cp] = uint8_t(b);
        }
    }
};

const byte_unicode_table & bu_table() {
    static const byte_unicode_table t;
    return t;
}

// ---- coarse unicode classes for the pre-tokenizer ----

bool is_space_cp(uint32_t cp) {
    return cp == ' ' || (cp >= 0x09 && cp <= 0x0D) || cp == 0x85 || cp == 0xA0 ||
           cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 ||
           cp == 0x202F || cp == 0x205F || cp == 0x3000;
}

bool is_number_cp(uint32_t cp) {
    return (cp >= '0' && cp <= '9') || cp == 0xB2 || cp == 0xB3 || cp == 0xB9 ||
           (cp >= 0xBC && cp <= 0xBE) || (cp >= 0x660 && cp <= 0x669) ||
           (cp >= 0x6F0 && cp <= 0x6F9) || (cp >= 0x966 && cp <= 0x96F) ||
           (cp >= 0x2070 && cp <= 0x2079) || (cp >= 0x2080 && cp <= 0x2089) ||
           (cp >= 0xFF10 && cp <= 0xFF19);
}

bool is_letter_cp(uint32_t cp) {
    if (cp < 0x80) {
        return (cp >= 'A' && cp <= 'Z') || (cp >= 'a' && cp <= 'z');
    }
    if (is_space_cp(cp) || is_number_cp(cp)) {
        return false;
    }
    // coarse letter blocks; general punctuation and symbol planes excluded
    return cp == 0xAA || cp == 0xB5 || cp == 0xBA || (cp >= 0xC0 && cp <= 0xD6) ||
           (cp >= 0xD8 && cp <= 0xF6) || (cp >= 0xF8 && cp <= 0x2FF) ||
           (cp >= 0x370 && cp <= 0x1FFF && cp != 0x37E && cp != 0x385 && cp != 0x387) ||
           (cp >= 0x2C00 && cp <= 0x2DFF) || (cp >= 0x3040 && cp <= 0x312F) ||
           (cp >= 0x3130 && cp <= 0x318F) || (cp >= 0x3400 && cp <= 0x4DBF) ||
           (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0xA000 && cp <= 0xA71F) ||
           (cp >= 0xAC00 && cp <= 0xD7FF) || (cp >= 0xF900 && cp <= 0xFAFF) ||
           (cp >= 0x10000 && cp <= 0x2FFFF);
}

} // namespace

std::vector<std::string> gpt2_pretokenize(const std::string & text) {
    // decode codepoints while remembering their byte spans so chunks are
    // substrings of the original bytes (invalid UTF-8 must survive verbatim)
    std::vector<uint32_t> cp;
    std::vector<size_t> start;
    {
        size_t i = 0;
        while (i < text.size()) {
            std::string one;
            size_t len = 1;
            uint8_t c = uint8_t(text[i]);
            if (c >= 0xF0 && i + 3 < text.size()) {
                len = 4;
            } else if (c >= 0xE0 && i + 2 < text.size()) {
                len = 3;
            } else if (c >= 0xC0 && i + 1 < text.size()) {
                len = 2;
            }
            bool ok = len > 1;
            uint32_t acc = len == 4 ? (c & 0x07) : len == 3 ? (c & 0x0F) : (c & 0x1F);
            for (size_t k = 1; k < len && ok; ++k) {
                uint8_t cc = uint8_t(text[i + k]);
                if ((cc & 0xC0) != 0x80) {
                    ok = false;
                }
                acc = acc << 6 | (cc & 0x3F);
            }
            if (!ok) {
                len = 1;
                acc = c;
            }
            cp.push_back(acc);
            start.push_back(i);
            i += len;
        }
        start.push_back(text.size());
    }
    const size_t n = cp.size();
    std::vector<std::string> out;

    auto emit = [&](size_t a, size_t b) {
        out.push_back(text.substr(start[a], start[b] - start[a]));
    };

    size_t i = 0;
    while (i < n) {
        // contractions: 's 't 're 've 'm 'll 'd
        if (cp[i] == '\'' && i + 1 < n) {
            uint32_t a = cp[i + 1];
            uint32_t b = i + 2 < n ? cp[i + 2] : 0;
            if (a == 's' || a == 't' || a == 'm' || a == 'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) {
                emit(i, i + 3);
                i += 3;
                continue;
            }
        }
        // ' ?\p{L}+'
        {
            size_t j = i;
            if (cp[j] == ' ' && j + 1 < n && is_letter_cp(cp[j + 1])) {
                ++j;
            }
            if (j < n && is_letter_cp(cp[j])) {
                size_t k = j;
                while (k < n && is_letter_cp(cp[k])) {
                    ++k;
                }
                emit(i, k);
                i = k;
                continue;
            }
        }
        // ' ?\p{N}+'
        {
            size_t j = i;
            if (cp[j] == ' ' && j + 1 < n && is_number_cp(cp[j + 1])) {
                ++j;
            }
            if (j < n && is_number_cp(cp[j])) {
                size_t k = j;
                while (k < n && is_number_cp(cp[k])) {
                    ++k;
                }
                emit(i, k);
                i = k;
                continue;
            }
        }
        // ' ?[^\s\p{L}\p{N}]+'
        {
            auto is_other = [&](uint32_t c) {
                return !is_space_cp(c) && !is_letter_cp(c) && !is_number_cp(c);
            };
            size_t j = i;
            if (cp[j] == ' ' && j + 1 < n && is_other(cp[j + 1])) {
                ++j;
            }
            if (j < n && is_other(cp[j])) {
                size_t k = j;
                while (k < n && is_other(cp[k])) {
                    ++k;
                }
                emit(i, k);
                i = k;
                continue;
            }
        }
        // whitespace runs: the final space stays attached to the next token
        {
            size_t j = i;
            while (j < n && is_space_cp(cp[j])) {
                ++j;
            }
            if (j == i) {
                emit(i, i + 1); // defensive; branches above should have consumed
                ++i;
                continue;
            }
            if (j < n && j - i > 1) {
                emit(i, j - 1);
                i = j - 1;
            } else {
                emit(i, j); // single non-' ' whitespace, or a trailing run
                i = j;
            }
        }
    }
    return out;
}

std::string byte_level_str(const std::string & raw_bytes) {
    std::string out;
    for (uint8_t b : raw_bytes) {
        append_utf8(out, bu_table().byte_to_cp[b]);
    }
    return out;
}

void bpe_tokenizer::finish_init() {
    id_to_token_.clear();
    int32_t max_id = -1;
    for (const auto & [tok, id] : token_to_id_) {
        max_id = std::max(max_id, id);
    }
    id_to_token_.assign(size_t(max_id + 1), "");
    for (const auto & [tok, id] : token_to_id_) {
        id_to_token_[size_t(id)] = tok;
    }
}

bpe_tokenizer bpe_tokenizer::from_vocab_merges(const std::string & vocab_json_path,
                                               const std::string & merges_path) {
    bpe_tokenizer t;
    ordered_json vocab;
    try {
        vocab = ordered_json::parse(read_file(vocab_json_path));
    } catch (const std::exception & e) {
        throw error(errc::format, std::string("vocab json: ") + e.what());
    }
    if (!vocab.is_object()) {
        throw error(errc::format, "vocab json must be an object");
    }
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
        t.token_to_id_[it.key()] = it.value().get<int32_t>();
    }
    int32_t rank = 0;
    for (const std::string & line : read_lines(merges_path)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        t.merge_rank_[line] = rank++;
    }
    t.finish_init();
    return t;
}

bpe_tokenizer bpe_tokenizer::from_tokenizer_json(const std::string & tokenizer_json_path) {
    bpe_tokenizer t;
    ordered_json j;
    try {
        j = ordered_json::parse(read_file(tokenizer_json_path));
    } catch (const std::exception & e) {
        throw error(errc::format, std::string("tokenizer json: ") + e.what());
    }
    if (!j.contains("model") || !j["model"].contains("vocab")) {
        throw error(errc::format, "tokenizer json: missing model.vocab");
    }
    for (auto it = j["model"]["vocab"].begin(); it != j["model"]["vocab"].end(); ++it) {
        t.token_to_id_[it.key()] = it.value().get<int32_t>();
    }
    int32_t rank = 0;
    for (const auto & m : j["model"]["merges"]) {
        if (m.is_string()) {
            t.merge_rank_[m.get<std::string>()] = rank++;
        } else if (m.is_array() && m.size() == 2) {
            t.merge_rank_[m[0].get<std::string>() + " " + m[1].get<std::string>()] = rank++;
        }
    }
    if (j.contains("added_tokens")) {
        for (const auto & a : j["added_tokens"]) {
            t.token_to_id_[a["content"].get<std::string>()] = a["id"].get<int32_t>();
        }
    }
    t.finish_init();
    return t;
}

std::vector<int32_t> bpe_tokenizer::bpe_chunk(const std::string & chunk_bytes) const {
    // bytes -> unicode symbol list
    std::vector<std::string> word;
    word.reserve(chunk_bytes.size());
    for (uint8_t b : chunk_bytes) {
        std::string sym;
        append_utf8(sym, bu_table().byte_to_cp[b]);
        word.push_back(std::move(sym));
    }
    // lowest-rank merge until stable
    while (word.size() > 1) {
        int32_t best_rank = INT32_MAX;
        size_t best_i = 0;
        for (size_t i = 0; i + 1 < word.size(); ++i) {
            auto it = merge_rank_.find(word[i] + " " + word[i + 1]);
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_i = i;
            }
        }
        if (best_rank == INT32_MAX) {
            break;
        }
        word[best_i] += word[best_i + 1];
        word.erase(word.begin() + std::ptrdiff_t(best_i + 1));
    }
    std::vector<int32_t> ids;
    ids.reserve(word.size());
    for (const auto & sym : word) {
        auto it = token_to_id_.find(sym);
        if (it == token_to_id_.end()) {
            // merged symbol missing from the vocab: fall back to the
            // underlying per-byte tokens
            for (uint32_t cp : utf8_codepoints(sym)) {
                std::string one;
                append_utf8(one, cp);
                auto bit = token_to_id_.find(one);
                if (bit != token_to_id_.end()) {
                    ids.push_back(bit->second);
                }
            }
            continue;
        }
        ids.push_back(it->second);
    }
    return ids;
}

std::vector<int32_t> bpe_tokenizer::encode(const std::string & text) const {
    std::vector<int32_t> out;
    for (const std::string & chunk : gpt2_pretokenize(text)) {
        std::vector<int32_t> ids = bpe_chunk(chunk);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::string bpe_tokenizer::token_bytes(int32_t id) const {
    if (id < 0 || size_t(id) >= id_to_token_.size()) {
        throw error(errc::range, "token id " + std::to_string(id) + " out of range");
    }
    const std::string & tok = id_to_token_[size_t(id)];
    std::string out;
    for (uint32_t cp : utf8_codepoints(tok)) {
        auto it = bu_table().cp_to_byte.find(cp);
        if (it != bu_table().cp_to_byte.end()) {
            out.push_back(char(it->second));
        } else {
            append_utf8(out, cp); // added tokens like <|endoftext|> pass through
        }
    }
    return out;
}

std::string bpe_tokenizer::decode(const std::vector<int32_t> & ids) const {
    std::string out;
    for (int32_t id : ids) {
        out += token_bytes(id);
    }
    return out;
}

std::string bpe_tokenizer::token_display(int32_t id) const {
    std::string raw = token_bytes(id);
    std::string out;
    for (uint8_t c : raw) {
        if (c == '\n') {
            out += "\\n";
        } else if (c == '\t') {
            out += "\\t";
        } else if (c < 0x20 || c == 0x7F) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        } else {
            out.push_back(char(c));
        }
    }
    return out;
}

const char k_ids_magic[16] = {'S', 'L', 'E', 'N', 'S', '-', 'I', 'D', 'S',
                              '\0', '\0', '\0', '\0', '\0', '\0', '\0'};

std::vector<int32_t> read_ids_file(const std::string & path) {
    std::string data = read_file(path);
    if (data.size() < 16 || std::memcmp(data.data(), k_ids_magic, 16) != 0) {
        throw error(errc::format, "ids file " + path + ": bad magic");
    }
    if ((data.size() - 16) % 4 != 0) {
        throw error(errc::format, "ids file " + path + ": payload not a multiple of 4 bytes");
    }
    size_t count = (data.size() - 16) / 4;
    std::vector<int32_t> ids(count, 0);
    for (size_t i = 0; i < count; ++i) {
        uint32_t v = 0;
        for (int b = 3; b >= 0; --b) {
            v = v << 8 | uint8_t(data[16 + i * 4 + size_t(b)]);
        }
        ids[i] = int32_t(v);
    }
    return ids;
}

void write_ids_file(const std::string & path, const std::vector<int32_t> & ids) {
    std::string out(k_ids_magic, 16);
    for (int32_t id : ids) {
        uint32_t v = uint32_t(id);
        for (int b = 0; b < 4; ++b) {
            out.push_back(char(uint8_t(v >> (8 * b))));
        }
    }
    write_file(path, out);
}

} // namespace slens
