#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace semfl {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

/// Lowercase hex MD5 digest of a file (dataset archive checksums).
std::string md5_file(const std::filesystem::path& path);

}  // namespace semfl
