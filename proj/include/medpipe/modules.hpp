#pragma once

#include <filesystem>
#include <string>

#include "medpipe/segdb.hpp"
#include "medpipe/workflow.hpp"

namespace medpipe {

/// The built-in module toolbox: DicomImporter, FileSystemImporter,
/// InstanceFilter, ThresholdRunner, ReportExporter, DataOrganizer.
/// The segment registry is copied into modules that validate roi ids.
ModuleRegistry builtin_registry(const SegmentRegistry& segdb);

/// Declarative external-command module: name, category, scope, params,
/// inputs, outputs, argv template with {input:...}/{output:...}/{param:...}
/// substitution tokens, expected_exit, timeout.
Module module_from_definition_text(const std::string& yaml_text);
Module module_from_definition_file(const std::filesystem::path& file);

/// Registers every `*.yml`/`*.yaml` definition found in `dir` (sorted order).
void load_module_definitions(ModuleRegistry& registry, const std::filesystem::path& dir);

} // namespace medpipe
