#include "delta/digest.hpp"

#include <openssl/sha.h>

namespace delta {

Digest sha256(std::span<const std::uint8_t> bytes) {
    Digest out{};
    SHA256(bytes.data(), bytes.size(), out.data());
    return out;
}

Digest sha256(std::string_view bytes) {
    return sha256(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t *>(bytes.data()), bytes.size()));
}

std::string to_hex(const Digest &d) {
    static const char *hex = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (std::uint8_t b : d) {
        s.push_back(hex[b >> 4]);
        s.push_back(hex[b & 15]);
    }
    return s;
}

} // namespace delta
