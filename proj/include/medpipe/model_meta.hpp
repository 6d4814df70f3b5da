#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medpipe/segdb.hpp"

namespace medpipe {

enum class Severity { Warning, Error };

struct ValidationIssue {
    std::string path; // json-path, e.g. $.outputs[0].classes[1]
    Severity severity = Severity::Error;
    std::string message;
};

/// Schema checks for a model's meta.json: required keys, enumerations, type
/// correctness, URL shape (warning), segdb resolution of output classes.
/// Issues come back sorted by json-path; empty means fully clean.
std::vector<ValidationIssue> validate_meta(const nlohmann::json& document,
                                           const SegmentRegistry& segdb);

/// True when no error-severity issue is present.
bool meta_is_valid(const std::vector<ValidationIssue>& issues);

/// Parses text as JSON; throws ParseError (distinct from validation issues).
nlohmann::json parse_meta_text(std::string_view text);

struct ModelFilter {
    std::optional<std::string> modality;
    std::optional<std::string> task;
    std::optional<std::string> output_class;
};

struct ModelEntry {
    std::string directory; // model directory name under the repo root
    nlohmann::json meta;
};

struct ModelQueryResult {
    std::vector<ModelEntry> models;
    std::vector<std::string> warnings;
};

/// Scans `<repo_dir>/<model>/meta.json`, skipping invalid documents with a
/// warning, and returns the valid ones matching every provided filter field.
ModelQueryResult query_models(const std::filesystem::path& repo_dir, const ModelFilter& filter,
                              const SegmentRegistry& segdb);

} // namespace medpipe
