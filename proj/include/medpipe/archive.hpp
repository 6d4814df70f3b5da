#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

namespace medpipe {

/// Extracts a tar, tar.gz, or zip archive into `dest`. The format is sniffed
/// from the file bytes; entries escaping `dest` are rejected. Throws
/// BadArchive or Truncated.
void extract_archive(const std::filesystem::path& archive, const std::filesystem::path& dest);

void extract_tar(std::span<const std::uint8_t> bytes, const std::filesystem::path& dest);
void extract_zip(std::span<const std::uint8_t> bytes, const std::filesystem::path& dest);

} // namespace medpipe
