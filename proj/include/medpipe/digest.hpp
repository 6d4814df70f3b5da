#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace medpipe::digest {

/// SHA-256, lowercase hex.
std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& file);

/// Digest over a directory tree: relative paths and file contents, in sorted
/// order. Two trees hash equal iff they are byte-identical (timestamps aside).
std::string sha256_tree(const std::filesystem::path& dir);

} // namespace medpipe::digest
