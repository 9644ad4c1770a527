#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace cfdiff {

/// Hex SHA-256 of a byte buffer.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

/// Throw IOError on failure. Parent directories are created on write.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

}  // namespace cfdiff
