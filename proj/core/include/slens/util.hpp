#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace slens {

std::string base64_encode(const uint8_t * data, size_t n);
std::vector<uint8_t> base64_decode(const std::string & s);

std::string base64_encode_f32(const std::vector<float> & v); // little-endian payload
std::vector<float> base64_decode_f32(const std::string & s);

std::string read_file(const std::string & path);
void write_file(const std::string & path, const std::string & contents);

std::vector<std::string> read_lines(const std::string & path);

// fixed formatting used by every CSV/JSON emitter (repr round-trips a float)
std::string fmt_float(double v);

} // namespace slens
