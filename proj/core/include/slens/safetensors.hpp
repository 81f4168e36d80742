#pragma once

#include "slens/errors.hpp"
#include "slens/mat.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace slens {

enum class st_dtype { f32, f16, bf16 };

size_t dtype_size(st_dtype dt);
st_dtype dtype_from_string(const std::string & s); // "F32" | "F16" | "BF16"
const char * dtype_to_string(st_dtype dt);

float f16_to_f32(uint16_t bits);
float bf16_to_f32(uint16_t bits);
uint16_t f32_to_f16(float v);
uint16_t f32_to_bf16(float v);

struct tensor_entry {
    st_dtype dtype = st_dtype::f32;
    std::vector<int64_t> shape;
    size_t begin = 0; // offsets into the data region
    size_t end = 0;
    int64_t numel() const;
};

// Parsed view over one safetensors file. The raw bytes are shared and
// immutable; tensor payloads are widened to fp32 only on access.
struct tensor_store {
    std::shared_ptr<const std::string> blob;
    size_t data_base = 0;
    std::map<std::string, tensor_entry> entries;
    std::map<std::string, std::string> metadata;

    bool has(const std::string & name) const { return entries.count(name) != 0; }
    const tensor_entry & entry(const std::string & name) const;
    const uint8_t * raw(const tensor_entry & e) const;

    vecf tensor_f32(const std::string & name) const; // flattened
    matf tensor_mat(const std::string & name) const; // rank-2 only
    vecf tensor_vec(const std::string & name) const; // rank-1 only
};

tensor_store parse_safetensors(std::string bytes);
tensor_store parse_safetensors_file(const std::string & path);

struct tensor_out {
    std::string name;
    st_dtype dtype = st_dtype::f32;
    std::vector<int64_t> shape;
    std::vector<uint8_t> bytes;
};

tensor_out tensor_out_f32(const std::string & name, const matf & m);
tensor_out tensor_out_f32(const std::string & name, const vecf & v,
                          std::vector<int64_t> shape = {});

std::string serialize_safetensors(const std::vector<tensor_out> & tensors,
                                  const std::map<std::string, std::string> & metadata = {});

} // namespace slens
