#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "medpipe/model_meta.hpp"
#include "medpipe/modules.hpp"
#include "medpipe/workflow.hpp"

namespace medpipe {

/// A model workspace: build recipe, metadata, workflows, test spec, and
/// declarative module definitions.
///
///   <dir>/Dockerfile
///   <dir>/meta.json
///   <dir>/test.yml
///   <dir>/workflows/<name>.yml   (`default` is mandatory)
///   <dir>/modules/*.yml          (auto-registered module definitions)
struct Workspace {
    std::filesystem::path dir;

    std::filesystem::path recipe_path() const { return dir / "Dockerfile"; }
    std::filesystem::path meta_path() const { return dir / "meta.json"; }
    std::filesystem::path test_spec_path() const { return dir / "test.yml"; }
    std::filesystem::path workflows_dir() const { return dir / "workflows"; }
    std::filesystem::path modules_dir() const { return dir / "modules"; }
    std::filesystem::path workflow_path(const std::string& name) const;

    std::string name() const; // meta.json id, else directory name
};

/// Built-ins plus the workspace's declarative module definitions.
ModuleRegistry workspace_registry(const Workspace& workspace, const SegmentRegistry& segdb);

/// Loads `workflows/<name>.yml`; "-" reads the workflow YAML from `custom_in`.
Workflow load_workspace_workflow(const Workspace& workspace, const std::string& name,
                                 const ModuleRegistry& registry, std::istream* custom_in);

/// Generates a complete demo workspace (threshold pipeline). Refuses to touch
/// a non-empty directory unless `force`.
void scaffold_model(const std::string& name, const std::filesystem::path& dir, bool force);

/// Recipe rules + default workflow presence + meta.json validation, as one
/// issue list (paths are pseudo-jsonpath: $.recipe..., $.workflows...).
std::vector<ValidationIssue> validate_workspace(const Workspace& workspace,
                                                const SegmentRegistry& segdb);

/// The uniform container run command; identical across models except for the
/// model identifier token.
std::string container_run_command(const std::string& model_name);

inline constexpr const char* kContainerInputDir = "/app/data/input_data";
inline constexpr const char* kContainerOutputDir = "/app/data/output_data";

} // namespace medpipe
