#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <openssl/evp.h>
#include <zlib.h>

namespace dvgaze {

inline std::string to_hex(const unsigned char* bytes, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(digits[bytes[i] >> 4]);
        out.push_back(digits[bytes[i] & 0xF]);
    }
    return out;
}

inline std::string sha1_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
        throw std::runtime_error("sha1 digest failed");
    return to_hex(md, len);
}

// Same id git assigns to a blob with this content.
inline std::string git_blob_hash(std::string_view content) {
    std::string buf = "blob " + std::to_string(content.size());
    buf.push_back('\0');
    buf.append(content);
    return sha1_hex(buf);
}

inline std::uint32_t crc32_of(std::string_view data) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t off = 0;
    while (off < data.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - off, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data() + off), chunk);
        off += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace dvgaze
