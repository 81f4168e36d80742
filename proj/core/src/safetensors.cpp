#include "slens/safetensors.hpp"

#include "slens/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace slens {

using nlohmann::ordered_json;

size_t dtype_size(st_dtype dt) {
    switch (dt) {
        case st_dtype::f32: return 4;
        case st_dtype::f16: return 2;
        case st_dtype::bf16: return 2;
    }
    return 4;
}

st_dtype dtype_from_string(const std::string & s) {
    if (s == "F32") return st_dtype::f32;
    if (s == "F16") return st_dtype::f16;
    if (s == "BF16") return st_dtype::bf16;
    throw error(errc::unsupported_dtype, "unsupported dtype string: \"" + s + "\"");
}

const char * dtype_to_string(st_dtype dt) {
    switch (dt) {
        case st_dtype::f32: return "F32";
        case st_dtype::f16: return "F16";
        case st_dtype::bf16: return "BF16";
    }
    return "F32";
}

float f16_to_f32(uint16_t h) {
    const uint32_t sign = uint32_t(h >> 15) & 1u;
    const uint32_t exp = uint32_t(h >> 10) & 0x1Fu;
    const uint32_t frac = uint32_t(h) & 0x3FFu;
    uint32_t out;
    if (exp == 0) {
        if (frac == 0) {
            out = sign << 31; // signed zero
        } else {
            // subnormal: renormalize
            int e = -1;
            uint32_t f = frac;
            do {
                ++e;
                f <<= 1;
            } while ((f & 0x400u) == 0);
            out = (sign << 31) | uint32_t(127 - 15 - e) << 23 | ((f & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        out = (sign << 31) | 0x7F800000u | (frac << 13); // inf / nan
    } else {
        out = (sign << 31) | ((exp - 15 + 127) << 23) | (frac << 13);
    }
    float r;
    std::memcpy(&r, &out, 4);
    return r;
}

float bf16_to_f32(uint16_t h) {
    uint32_t out = uint32_t(h) << 16;
    float r;
    std::memcpy(&r, &out, 4);
    return r;
}

uint16_t f32_to_bf16(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    // round to nearest even on the dropped 16 bits
    uint32_t lsb = (bits >> 16) & 1u;
    uint32_t rounded = bits + 0x7FFFu + lsb;
    if (std::isnan(v)) {
        return uint16_t((bits >> 16) | 0x0040u);
    }
    return uint16_t(rounded >> 16);
}

uint16_t f32_to_f16(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const uint32_t sign = (bits >> 16) & 0x8000u;
    int32_t exp = int32_t((bits >> 23) & 0xFFu) - 127 + 15;
    uint32_t frac = bits & 0x7FFFFFu;
    if (((bits >> 23) & 0xFFu) == 0xFFu) {
        return uint16_t(sign | 0x7C00u | (frac ? 0x200u : 0u)); // inf / nan
    }
    if (exp >= 0x1F) {
        return uint16_t(sign | 0x7C00u); // overflow to inf
    }
    if (exp <= 0) {
        if (exp < -10) {
            return uint16_t(sign); // underflow to zero
        }
        frac |= 0x800000u;
        uint32_t shift = uint32_t(14 - exp);
        uint32_t half = frac >> shift;
        uint32_t rem = frac & ((1u << shift) - 1u);
        uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) {
            ++half;
        }
        return uint16_t(sign | half);
    }
    uint32_t half = uint32_t(exp) << 10 | (frac >> 13);
    uint32_t rem = frac & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) {
        ++half; // may carry into the exponent; that is correct rounding
    }
    return uint16_t(sign | half);
}

int64_t tensor_entry::numel() const {
    int64_t n = 1;
    for (int64_t s : shape) {
        n *= s;
    }
    return n;
}

const tensor_entry & tensor_store::entry(const std::string & name) const {
    auto it = entries.find(name);
    if (it == entries.end()) {
        throw error(errc::resolution, "tensor not found: " + name);
    }
    return it->second;
}

const uint8_t * tensor_store::raw(const tensor_entry & e) const {
    return reinterpret_cast<const uint8_t *>(blob->data()) + data_base + e.begin;
}

vecf tensor_store::tensor_f32(const std::string & name) const {
    const tensor_entry & e = entry(name);
    const uint8_t * src = raw(e);
    const int64_t n = e.numel();
    vecf out(size_t(n), 0.0f);
    switch (e.dtype) {
        case st_dtype::f32:
            std::memcpy(out.data(), src, size_t(n) * 4);
            break;
        case st_dtype::f16:
            for (int64_t i = 0; i < n; ++i) {
                uint16_t h;
                std::memcpy(&h, src + i * 2, 2);
                out[size_t(i)] = f16_to_f32(h);
            }
            break;
        case st_dtype::bf16:
            for (int64_t i = 0; i < n; ++i) {
                uint16_t h;
                std::memcpy(&h, src + i * 2, 2);
                out[size_t(i)] = bf16_to_f32(h);
            }
            break;
    }
    return out;
}

matf tensor_store::tensor_mat(const std::string & name) const {
    const tensor_entry & e = entry(name);
    if (e.shape.size() != 2) {
        throw error(errc::shape, "tensor " + name + " is not rank-2");
    }
    matf m(e.shape[0], e.shape[1]);
    m.data = tensor_f32(name);
    return m;
}

vecf tensor_store::tensor_vec(const std::string & name) const {
    const tensor_entry & e = entry(name);
    if (e.shape.size() != 1) {
        throw error(errc::shape, "tensor " + name + " is not rank-1");
    }
    return tensor_f32(name);
}

tensor_store parse_safetensors(std::string bytes) {
    auto blob = std::make_shared<const std::string>(std::move(bytes));
    const std::string & buf = *blob;

    if (buf.size() < 8) {
        throw error(errc::format, "truncated header: file has " + std::to_string(buf.size()) +
                                      " bytes, need 8 for the header length at offset 0");
    }
    uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) {
        header_len = header_len << 8 | uint8_t(buf[size_t(i)]);
    }
    if (header_len > buf.size() - 8) {
        throw error(errc::format, "truncated header: declared length " + std::to_string(header_len) +
                                      " exceeds remaining " + std::to_string(buf.size() - 8) +
                                      " bytes at offset 8");
    }
    const size_t data_base = 8 + size_t(header_len);
    const size_t data_len = buf.size() - data_base;

    ordered_json header;
    try {
        header = ordered_json::parse(buf.begin() + 8, buf.begin() + std::ptrdiff_t(data_base));
    } catch (const std::exception & e) {
        throw error(errc::format, std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) {
        throw error(errc::format, "header JSON is not an object");
    }

    tensor_store store;
    store.blob = blob;
    store.data_base = data_base;

    std::vector<std::pair<size_t, size_t>> spans;
    std::vector<std::string> span_names;

    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string & name = it.key();
        const ordered_json & val = it.value();
        if (name == "__metadata__") {
            if (!val.is_object()) {
                throw error(errc::format, "__metadata__ is not an object");
            }
            for (auto mit = val.begin(); mit != val.end(); ++mit) {
                if (!mit.value().is_string()) {
                    throw error(errc::format, "__metadata__ values must be strings");
                }
                store.metadata[mit.key()] = mit.value().get<std::string>();
            }
            continue;
        }
        if (!val.is_object() || !val.contains("dtype") || !val.contains("shape") ||
            !val.contains("data_offsets")) {
            throw error(errc::format, "tensor \"" + name + "\": missing dtype/shape/data_offsets");
        }
        tensor_entry e;
        if (!val["dtype"].is_string()) {
            throw error(errc::format, "tensor \"" + name + "\": dtype is not a string");
        }
        e.dtype = dtype_from_string(val["dtype"].get<std::string>());
        if (!val["shape"].is_array() || val["shape"].empty()) {
            throw error(errc::format, "tensor \"" + name + "\": shape must be a non-empty array");
        }
        int64_t checked_numel = 1;
        for (const auto & s : val["shape"]) {
            if (!s.is_number_integer() ||
                (s.is_number_unsigned() && s.get<uint64_t>() > uint64_t(INT64_MAX))) {
                throw error(errc::format, "tensor \"" + name + "\": non-integer shape entry");
            }
            int64_t dim = s.get<int64_t>();
            if (dim < 0) {
                throw error(errc::format, "tensor \"" + name + "\": negative shape entry");
            }
            if (dim > 0 && checked_numel > int64_t(data_len) / dim + 1) {
                throw error(errc::format, "tensor \"" + name + "\": shape exceeds the data region");
            }
            checked_numel *= dim;
            e.shape.push_back(dim);
        }
        const auto & off = val["data_offsets"];
        if (!off.is_array() || off.size() != 2 || !off[0].is_number_integer() || !off[1].is_number_integer() ||
            (!off[0].is_number_unsigned() && off[0].get<int64_t>() < 0) ||
            (!off[1].is_number_unsigned() && off[1].get<int64_t>() < 0)) {
            throw error(errc::format, "tensor \"" + name + "\": data_offsets must be two non-negative integers");
        }
        uint64_t b = off[0].get<uint64_t>();
        uint64_t en = off[1].get<uint64_t>();
        if (en < b || en > data_len) {
            throw error(errc::format, "tensor \"" + name + "\": data_offsets [" + std::to_string(b) + ", " +
                                          std::to_string(en) + ") out of bounds for data region of " +
                                          std::to_string(data_len) + " bytes");
        }
        e.begin = size_t(b);
        e.end = size_t(en);
        const int64_t expect = e.numel() * int64_t(dtype_size(e.dtype));
        if (int64_t(e.end - e.begin) != expect) {
            throw error(errc::format, "tensor \"" + name + "\": byte span " +
                                          std::to_string(e.end - e.begin) + " != shape x dtype size " +
                                          std::to_string(expect));
        }
        if (!store.entries.emplace(name, e).second) {
            throw error(errc::format, "duplicate tensor name: " + name);
        }
        if (e.begin != e.end) {
            spans.emplace_back(e.begin, e.end);
            span_names.push_back(name);
        }
    }

    // overlap check
    std::vector<size_t> order(spans.size());
    for (size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return spans[a].first < spans[b].first; });
    for (size_t i = 1; i < order.size(); ++i) {
        if (spans[order[i]].first < spans[order[i - 1]].second) {
            throw error(errc::format, "overlapping data_offsets: \"" + span_names[order[i - 1]] +
                                          "\" and \"" + span_names[order[i]] + "\" at offset " +
                                          std::to_string(spans[order[i]].first));
        }
    }
    return store;
}

tensor_store parse_safetensors_file(const std::string & path) {
    return parse_safetensors(read_file(path));
}

tensor_out tensor_out_f32(const std::string & name, const matf & m) {
    tensor_out t;
    t.name = name;
    t.shape = {m.rows, m.cols};
    t.bytes.resize(m.data.size() * 4);
    std::memcpy(t.bytes.data(), m.data.data(), t.bytes.size());
    return t;
}

tensor_out tensor_out_f32(const std::string & name, const vecf & v, std::vector<int64_t> shape) {
    tensor_out t;
    t.name = name;
    t.shape = shape.empty() ? std::vector<int64_t>{int64_t(v.size())} : std::move(shape);
    t.bytes.resize(v.size() * 4);
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
    return t;
}

std::string serialize_safetensors(const std::vector<tensor_out> & tensors,
                                  const std::map<std::string, std::string> & metadata) {
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json md = ordered_json::object();
        for (const auto & [k, v] : metadata) {
            md[k] = v;
        }
        header["__metadata__"] = md;
    }
    size_t offset = 0;
    for (const auto & t : tensors) {
        ordered_json e;
        e["dtype"] = dtype_to_string(t.dtype);
        e["shape"] = t.shape;
        e["data_offsets"] = {offset, offset + t.bytes.size()};
        header[t.name] = e;
        offset += t.bytes.size();
    }
    std::string hj = header.dump();
    // pad header to 8-byte alignment, as the reference implementation does
    while (hj.size() % 8 != 0) {
        hj.push_back(' ');
    }
    std::string out;
    out.reserve(8 + hj.size() + offset);
    uint64_t n = hj.size();
    for (int i = 0; i < 8; ++i) {
        out.push_back(char(uint8_t(n >> (8 * i))));
    }
    out += hj;
    for (const auto & t : tensors) {
        out.append(reinterpret_cast<const char *>(t.bytes.data()), t.bytes.size());
    }
    return out;
}

} // namespace slens
