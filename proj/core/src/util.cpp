#include "slens/util.hpp"

#include "slens/errors.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace slens {

static const char k_b64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const uint8_t * data, size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        uint32_t v = uint32_t(data[i]) << 16 | uint32_t(data[i + 1]) << 8 | uint32_t(data[i + 2]);
        out.push_back(k_b64[(v >> 18) & 63]);
        out.push_back(k_b64[(v >> 12) & 63]);
        out.push_back(k_b64[(v >> 6) & 63]);
        out.push_back(k_b64[v & 63]);
    }
    size_t rem = n - i;
    if (rem == 1) {
        uint32_t v = uint32_t(data[i]) << 16;
        out.push_back(k_b64[(v >> 18) & 63]);
        out.push_back(k_b64[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        uint32_t v = uint32_t(data[i]) << 16 | uint32_t(data[i + 1]) << 8;
        out.push_back(k_b64[(v >> 18) & 63]);
        out.push_back(k_b64[(v >> 12) & 63]);
        out.push_back(k_b64[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

static int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

std::vector<uint8_t> base64_decode(const std::string & s) {
    std::vector<uint8_t> out;
    out.reserve(s.size() / 4 * 3);
    uint32_t acc = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=' || c == '\n' || c == '\r') {
            continue;
        }
        int v = b64_value(c);
        if (v < 0) {
            throw error(errc::format, "base64: invalid character");
        }
        acc = acc << 6 | uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(uint8_t((acc >> bits) & 0xFF));
        }
    }
    return out;
}

std::string base64_encode_f32(const std::vector<float> & v) {
    // serialize little-endian regardless of host order (all targets here are LE)
    static_assert(sizeof(float) == 4);
    return base64_encode(reinterpret_cast<const uint8_t *>(v.data()), v.size() * 4);
}

std::vector<float> base64_decode_f32(const std::string & s) {
    std::vector<uint8_t> bytes = base64_decode(s);
    if (bytes.size() % 4 != 0) {
        throw error(errc::format, "base64 fp32 payload not a multiple of 4 bytes");
    }
    std::vector<float> out(bytes.size() / 4);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::string read_file(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw error(errc::input, "cannot open file: " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string & path, const std::string & contents) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw error(errc::input, "cannot write file: " + path);
    }
    f.write(contents.data(), std::streamsize(contents.size()));
    if (!f) {
        throw error(errc::input, "short write: " + path);
    }
}

std::vector<std::string> read_lines(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw error(errc::input, "cannot open file: " + path);
    }
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        rows.push_back(line);
    }
    return rows;
}

std::string fmt_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace slens
