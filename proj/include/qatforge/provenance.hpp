#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace qatforge {

/// Hex SHA-1 of "blob <size>\0" followed by the bytes, as git computes it.
std::string git_blob_hash(std::span<const std::uint8_t> bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

}  // namespace qatforge
