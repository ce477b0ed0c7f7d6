#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace delta {

using Digest = std::array<std::uint8_t, 32>;

// SHA-256 (OpenSSL).
Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view bytes);
std::string to_hex(const Digest &d);

} // namespace delta
