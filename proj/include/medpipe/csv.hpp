#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace medpipe::csv {

/// RFC-4180 style parse: double-quoted fields, "" escapes, CRLF or LF rows.
/// A trailing newline does not produce an empty row.
std::vector<std::vector<std::string>> parse(std::string_view text);

std::string quote_field(std::string_view field);
std::string format_row(const std::vector<std::string>& fields);

/// Shortest round-trip decimal form (std::to_chars), deterministic.
std::string format_double(double value);

} // namespace medpipe::csv
