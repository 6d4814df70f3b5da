#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace medpipe::fs {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& file);
std::string read_text(const std::filesystem::path& file);
void write_bytes(const std::filesystem::path& file, const void* data, std::size_t size);
void write_text(const std::filesystem::path& file, std::string_view text);

/// Recursive listing of regular files as generic-format paths relative to
/// `dir`, sorted lexicographically. Symlinks to files are included.
std::vector<std::string> list_files(const std::filesystem::path& dir);

/// Shell-style glob against a relative path: `*` and `?` stay within one
/// path segment, `**` spans segments. Matching is on generic separators.
bool glob_match(std::string_view pattern, std::string_view relative_path);

/// True when `p` is lexically inside `root` (or equal to it).
bool path_under(const std::filesystem::path& p, const std::filesystem::path& root);

/// Strips the extension; double extensions ending in .gz (.nii.gz, .tar.gz)
/// are stripped as one unit.
std::string stem_of(const std::filesystem::path& file);

/// Byte-for-byte equality of two files.
bool files_equal(const std::filesystem::path& a, const std::filesystem::path& b);

/// Inflates a gzip stream; throws Truncated on corruption.
std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> data);

/// Gzip with a pinned header (mtime 0, fixed OS byte): identical input gives
/// identical output bytes across runs.
std::vector<std::uint8_t> gzip_deterministic(std::span<const std::uint8_t> data);

} // namespace medpipe::fs
