#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "semfl/common/error.hpp"

namespace semfl::io {

// All binary artifacts are little-endian, row-major, no header.
static_assert(std::endian::native == std::endian::little,
              "binary artifacts assume a little-endian host");

template <typename T>
void write_array(const std::filesystem::path& path, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw FormatError("short write to " + path.string());
}

/// Reads exactly `count` elements; a size mismatch is a FormatError.
template <typename T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t count) {
  static_assert(std::is_arithmetic_v<T>);
  std::error_code ec;
  auto size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat " + path.string());
  if (size != count * sizeof(T)) {
    throw FormatError(path.string() + ": expected " + std::to_string(count * sizeof(T)) +
                      " bytes, found " + std::to_string(size));
  }
  std::vector<T> out(count);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  if (!in) throw FormatError("short read from " + path.string());
  return out;
}

/// Reads a whole file whose length must be a multiple of sizeof(T).
template <typename T>
std::vector<T> read_all(const std::filesystem::path& path) {
  std::error_code ec;
  auto size = std::filesystem::file_size(path, ec);
  if (ec) throw FormatError("cannot stat " + path.string());
  if (size % sizeof(T) != 0) throw FormatError(path.string() + ": truncated element");
  return read_array<T>(path, size / sizeof(T));
}

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace semfl::io
